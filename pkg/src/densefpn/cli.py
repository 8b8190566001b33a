"""Command-line entry point: ``densefpn <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 check failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import geometry as geo
from .backbone import backbone_forward, build_backbone
from .config import ConfigError, desk_profile, load_config, serialize_config
from .data import (
    DataError,
    load_annotation_dir,
    load_image,
    objects_from_boxes,
    resize_short_side,
    save_image,
    synth_scene,
    write_annotations,
)
from .detector import build_detector, detect
from .evaluator import evaluate, per_class_report
from .gradcheck import run_suite
from .pyramid import (
    ABLATION_CONFIGS,
    FusionConfig,
    build_fpn_params,
    dmffpn_forward,
    fpn_param_count,
    fusion_input_channels,
)
from .tensor import Tensor
from .train import rescale_detection, train_toy
from .weights import WeightFileError, load_weights, save_weights

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3

CATEGORY_NAMES = ("pedestrian", "people", "bicycle", "car", "van", "truck", "tricycle",
                  "awning-tricycle", "bus", "motor")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _err(msg: str) -> None:
    print(f"densefpn: {msg}", file=sys.stderr)


def _config(path: Optional[str]):
    if path is None:
        return desk_profile()
    if not Path(path).is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return load_config(path)


# ---------------------------------------------------------------------------
# detection file format: image_id,x1,y1,w,h,score,category (category 1..10)
# ---------------------------------------------------------------------------

def format_detection(image_id: str, d: geo.Detection) -> str:
    b = d.box
    return f"{image_id},{b.x1!r},{b.y1!r},{b.width!r},{b.height!r},{d.score!r},{d.class_id + 1}"


def read_detections(path) -> dict[str, list[geo.Detection]]:
    out: dict[str, list[geo.Detection]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            if len(parts) != 7:
                raise DataError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            try:
                x, y, w, h, score = (float(v) for v in parts[1:6])
                cat = int(parts[6])
                det = geo.Detection(geo.Box(x, y, x + w, y + h), score, cat - 1)
            except ValueError as e:
                raise DataError(f"{path}:{lineno}: {e}") from None
            out.setdefault(parts[0], []).append(det)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    results, elapsed = run_suite(args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<32} rel_err={r.error:.3e}  tol={r.tolerance:g}")
    ok = all(r.passed for r in results)
    print(f"{sum(r.passed for r in results)}/{len(results)} checks passed in {elapsed:.1f}s")
    return EXIT_OK if ok else EXIT_CHECK


def fuse_demo_table(cfg, image_size: int = 64) -> list[str]:
    """Per-level shapes and fusion-conv widths / parameter counts for the four ablation rows."""
    det = cfg.detector
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    image = Tensor(rng.uniform(0, 1, (1, det.backbone.input_channels, image_size, image_size)))
    bparams = build_backbone(det.backbone, cfg.seed)
    feats = backbone_forward(image, bparams, det.backbone)
    chans = det.backbone.stage_channels
    lines = []

    def shape_rows(fcfg, fparams):
        pyr = dmffpn_forward(feats, fcfg, fparams)
        names = ["P2*", "P3*", "P4*", "P5*", "P6"]
        return [f"  {n:<4} {'x'.join(str(s) for s in t.shape)}" for n, t in zip(names, pyr.levels())]

    own = det.fusion
    lines.append(f"configured fusion: dense_to_p2={own.dense_to_p2} dense_to_p3={own.dense_to_p3} "
                 f"mode={own.fusion_mode} out_channels={own.out_channels} ({image_size}x{image_size} input)")
    own_p6 = own.add_p6 and image_size % 64 == 0
    own_cfg = FusionConfig(own.dense_to_p2, own.dense_to_p3, own.fusion_mode, own.out_channels, own_p6)
    lines += shape_rows(own_cfg, build_fpn_params(chans, own_cfg, cfg.seed))
    lines.append("")
    lines.append(f"{'config':<14}{'dense_p3':>9}{'dense_p2':>9}{'mode':>8}"
                 f"{'P3* in':>8}{'P2* in':>8}{'params':>11}{'closed':>11}")
    for name, kw in ABLATION_CONFIGS.items():
        fcfg = FusionConfig(out_channels=own.out_channels, add_p6=own_p6, **kw)
        fparams = build_fpn_params(chans, fcfg, cfg.seed)
        p3_in = fusion_input_channels(3, fcfg) if fcfg.dense_to_p3 else "-"
        p2_in = fusion_input_channels(2, fcfg) if fcfg.dense_to_p2 else "-"
        # exercise the forward so the reported widths are the ones actually consumed
        dmffpn_forward(feats, fcfg, fparams)
        lines.append(f"{name:<14}{str(fcfg.dense_to_p3):>9}{str(fcfg.dense_to_p2):>9}"
                     f"{fcfg.fusion_mode:>8}{p3_in:>8}{p2_in:>8}{fparams.count():>11}"
                     f"{fpn_param_count(chans, fcfg):>11}")
    return lines


def cmd_fuse_demo(args) -> int:
    cfg = _config(args.config)
    size = args.size
    if size % 32:
        raise UsageError("--size must be a multiple of 32")
    print("\n".join(fuse_demo_table(cfg, size)))
    return EXIT_OK


def cmd_train_toy(args) -> int:
    cfg = _config(args.config)
    if args.iterations is not None:
        from dataclasses import replace

        cfg = replace(cfg, train=replace(cfg.train, iterations=args.iterations))
    log_fh = open(args.log, "w") if args.log else None
    try:
        def emit(line):
            print(line, flush=True)
            if log_fh:
                log_fh.write(line + "\n")

        result = train_toy(cfg, emit)
    finally:
        if log_fh:
            log_fh.close()
    save_weights(result.params, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_detect(args) -> int:
    cfg = _config(args.config)
    params = build_detector(cfg.detector, cfg.seed)
    load_weights(args.weights, params)
    indir = Path(args.input)
    if not indir.is_dir():
        raise FileNotFoundError(f"input directory not found: {indir}")
    lines = []
    for path in sorted(indir.glob("*.ppm")):
        image = load_image(path)
        image, _, scale = resize_short_side(image, np.zeros((0, 4)), cfg.input.short_side)
        dets = detect(image, params, cfg.detector)
        for d in dets:
            d = rescale_detection(d, 1.0 / scale) if scale != 1.0 else d
            lines.append(format_detection(path.stem, d))
    Path(args.out).write_text("".join(line + "\n" for line in lines))
    print(f"wrote {len(lines)} detections to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not Path(args.dets).is_file():
        raise FileNotFoundError(f"detection file not found: {args.dets}")
    dets = read_detections(args.dets)
    gts = load_annotation_dir(args.gt)
    report = evaluate(dets, gts)
    print(report.format_text())
    print()
    print(report.format_kv())
    print()
    print(f"{'category':<18}AP@[0.50:0.95]")
    for name, ap in zip(CATEGORY_NAMES, per_class_report(dets, gts)):
        print(f"{name:<18}{'n/a' if ap is None else f'{100 * ap:.2f}'}")
    return EXIT_OK


def cmd_make_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(args.seed))
    for i in range(args.count):
        scene = synth_scene(int(rng.integers(2**31 - 1)), args.size, int(rng.integers(1, args.max_objects + 1)))
        save_image(out / f"{i:04d}.ppm", scene.image)
        write_annotations(out / f"{i:04d}.txt", objects_from_boxes(scene.boxes, scene.classes))
    print(f"wrote {args.count} scenes to {out}")
    return EXIT_OK


def cmd_show_config(args) -> int:
    print(serialize_config(_config(args.config)), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="densefpn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    f = sub.add_parser("fuse-demo", help="pyramid shapes and ablation fusion widths")
    f.add_argument("--config")
    f.add_argument("--size", type=int, default=64, help="synthetic input side (multiple of 32)")
    f.set_defaults(func=cmd_fuse_demo)

    t = sub.add_parser("train-toy", help="train on synthetic rectangle scenes")
    t.add_argument("--config")
    t.add_argument("--out", required=True, help="weight file to write")
    t.add_argument("--log", help="also write the loss log here")
    t.add_argument("--iterations", type=int)
    t.set_defaults(func=cmd_train_toy)

    d = sub.add_parser("detect", help="write detections for every .ppm in a directory")
    d.add_argument("--weights", required=True)
    d.add_argument("--input", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--config")
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", help="score a detection file against an annotation directory")
    e.add_argument("--dets", required=True)
    e.add_argument("--gt", required=True)
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("make-synth", help="write synthetic .ppm scenes with annotation files")
    m.add_argument("--out", required=True)
    m.add_argument("--count", type=int, default=8)
    m.add_argument("--size", type=int, default=96)
    m.add_argument("--max-objects", type=int, default=3)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_make_synth)

    s = sub.add_parser("show-config", help="print the effective configuration")
    s.add_argument("--config")
    s.set_defaults(func=cmd_show_config)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
        return args.func(args)
    except UsageError as e:
        _err(f"usage error: {e}")
        return EXIT_USAGE
    except ConfigError as e:
        _err(f"config error: {e}")
        return EXIT_USAGE
    except (FileNotFoundError, DataError, WeightFileError) as e:
        _err(str(e))
        return EXIT_DATA


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
