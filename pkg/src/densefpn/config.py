"""Run configuration and its flat ``section.key = value`` text format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .detector import AnchorConfig, DetectorConfig, InferenceConfig
from .heads import CascadeConfig, RCNNConfig, RPNConfig
from .pyramid import FusionConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    lr_schedule: tuple[tuple[int, float], ...] = ((70000, 0.00125), (15000, 0.000125))
    momentum: float = 0.9
    weight_decay: float = 0.0001

    def __post_init__(self):
        if not self.lr_schedule or any(lr <= 0 or n < 1 for n, lr in self.lr_schedule):
            raise ConfigError(f"lr schedule needs positive segments: {self.lr_schedule}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")


@dataclass(frozen=True)
class InputConfig:
    short_side: int = 800
    flip_probability: float = 0.5

    def __post_init__(self):
        if not 0 <= self.flip_probability <= 1:
            raise ConfigError(f"flip_probability must lie in [0, 1], got {self.flip_probability}")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 85000
    scenes: int = 8
    scene_size: int = 96
    max_objects: int = 3
    eval_every: int = 0
    images_per_step: int = 1


@dataclass(frozen=True)
class RunConfig:
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    input: InputConfig = field(default_factory=InputConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0


def _tuple(conv):
    def parse(s: str):
        return tuple(conv(v) for v in s.split(",") if v.strip())

    return parse


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _schedule(s: str):
    out = []
    for seg in s.split(","):
        n, lr = seg.split(":")
        out.append((int(n), float(lr)))
    return tuple(out)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ",".join(f"{n}:{lr!r}" for n, lr in v)
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# file key -> (RunConfig attribute path, parser)
SCHEMA: dict[str, tuple[tuple[str, ...], object]] = {
    "backbone.stage_channels": (("detector", "backbone", "stage_channels"), _tuple(int)),
    "backbone.blocks_per_stage": (("detector", "backbone", "blocks_per_stage"), _tuple(int)),
    "backbone.input_channels": (("detector", "backbone", "input_channels"), int),
    "fusion.dense_to_p2": (("detector", "fusion", "dense_to_p2"), _bool),
    "fusion.dense_to_p3": (("detector", "fusion", "dense_to_p3"), _bool),
    "fusion.mode": (("detector", "fusion", "fusion_mode"), str),
    "fusion.out_channels": (("detector", "fusion", "out_channels"), int),
    "fusion.add_p6": (("detector", "fusion", "add_p6"), _bool),
    "anchors.base_sizes": (("detector", "anchors", "base_sizes"), _tuple(float)),
    "anchors.ratios": (("detector", "anchors", "ratios"), _tuple(float)),
    "rpn.batch": (("detector", "rpn", "batch"), int),
    "rpn.pos_fraction": (("detector", "rpn", "pos_fraction"), float),
    "rpn.pos_iou": (("detector", "rpn", "pos_iou"), float),
    "rpn.neg_iou": (("detector", "rpn", "neg_iou"), float),
    "rpn.pre_nms_train": (("detector", "rpn", "pre_nms_train"), int),
    "rpn.post_nms_train": (("detector", "rpn", "post_nms_train"), int),
    "rpn.pre_nms_test": (("detector", "rpn", "pre_nms_test"), int),
    "rpn.post_nms_test": (("detector", "rpn", "post_nms_test"), int),
    "rpn.nms_iou": (("detector", "rpn", "nms_iou"), float),
    "rpn.min_size": (("detector", "rpn", "min_size"), float),
    "rcnn.batch": (("detector", "rcnn", "batch"), int),
    "rcnn.pos_fraction": (("detector", "rcnn", "pos_fraction"), float),
    "cascade.stages": (("detector", "cascade", "num_stages"), int),
    "cascade.lambda": (("detector", "cascade", "lam"), float),
    "cascade.iou_thresholds": (("detector", "cascade", "stage_iou_thresholds"), _tuple(float)),
    "cascade.fc_dim": (("detector", "cascade", "fc_dim"), int),
    "cascade.roi_size": (("detector", "cascade", "roi_size"), int),
    "test.score_threshold": (("detector", "test", "score_threshold"), float),
    "test.nms_iou": (("detector", "test", "nms_iou"), float),
    "test.max_dets": (("detector", "test", "max_dets"), int),
    "optimizer.lr_schedule": (("optimizer", "lr_schedule"), _schedule),
    "optimizer.momentum": (("optimizer", "momentum"), float),
    "optimizer.weight_decay": (("optimizer", "weight_decay"), float),
    "input.short_side": (("input", "short_side"), int),
    "input.flip_probability": (("input", "flip_probability"), float),
    "train.iterations": (("train", "iterations"), int),
    "train.scenes": (("train", "scenes"), int),
    "train.scene_size": (("train", "scene_size"), int),
    "train.max_objects": (("train", "max_objects"), int),
    "train.eval_every": (("train", "eval_every"), int),
    "train.images_per_step": (("train", "images_per_step"), int),
    "run.seed": (("seed",), int),
}


def _get(cfg, path):
    for attr in path:
        cfg = getattr(cfg, attr)
    return cfg


def _nested_dict(cfg) -> dict:
    return {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}


def _build(base: RunConfig, values: dict[tuple[str, ...], object]) -> RunConfig:
    """Rebuild ``base`` bottom-up so every dataclass validates its final field values."""

    def rebuild(obj, prefix):
        kw = {}
        for f in dataclasses.fields(obj):
            path = prefix + (f.name,)
            cur = getattr(obj, f.name)
            if dataclasses.is_dataclass(cur):
                kw[f.name] = rebuild(cur, path)
            elif path in values:
                kw[f.name] = values[path]
            else:
                kw[f.name] = cur
        return type(obj)(**kw)

    try:
        return rebuild(base, ())
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Apply ``section.key = value`` lines (``#`` comments allowed) on top of ``base``."""
    base = base or desk_profile()
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        path, conv = SCHEMA[key]
        try:
            values[path] = conv(val)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"line {lineno}: bad value for {key}: {e}") from None
    return _build(base, values)


def serialize_config(cfg: RunConfig) -> str:
    return "".join(f"{key} = {_fmt(_get(cfg, path))}\n" for key, (path, _) in SCHEMA.items())


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def full_profile() -> RunConfig:
    """Full-scale training values (800 px short side, 85k iterations, 256-wide pyramid).

    The backbone stays the toy residual net; ResNet-101 is not part of this package.
    """
    return RunConfig()


def desk_profile() -> RunConfig:
    """Small, CPU-friendly defaults used by the toy training run."""
    det = DetectorConfig(
        backbone=BackboneConfig((16, 32, 64, 128), (1, 1, 1, 1)),
        fusion=FusionConfig(True, True, "concat", out_channels=32, add_p6=False),
        anchors=AnchorConfig(base_sizes=(16, 32, 64, 128)),
        rpn=RPNConfig(batch=256, pre_nms_train=600, post_nms_train=300,
                      pre_nms_test=300, post_nms_test=100),
        rcnn=RCNNConfig(batch=128, pos_fraction=0.25),
        cascade=CascadeConfig(fc_dim=128),
        test=InferenceConfig(),
    )
    return RunConfig(
        detector=det,
        optimizer=OptimizerConfig(lr_schedule=((100, 0.002), (1100, 0.01), (300, 0.001)),
                                  momentum=0.9, weight_decay=0.0001),
        input=InputConfig(short_side=96, flip_probability=0.5),
        train=TrainConfig(iterations=1500, scenes=8, scene_size=96, max_objects=3, eval_every=250),
        seed=0,
    )
