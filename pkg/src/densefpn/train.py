"""Toy training on synthetic rectangle scenes."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .config import RunConfig
from .data import Scene, random_hflip, resize_short_side, synth_scene
from .detector import build_detector, detect, train_forward
from .evaluator import EvalReport, evaluate
from .geometry import Box, Detection
from .optim import MomentumSGD
from .params import ParamSet, make_rng
from .tensor import backward

log = logging.getLogger(__name__)


def make_scenes(config: RunConfig) -> list[Scene]:
    t = config.train
    rng = make_rng(config.seed)
    counts = rng.integers(1, t.max_objects + 1, size=t.scenes)
    seeds = rng.integers(0, 2**31 - 1, size=t.scenes)
    return [synth_scene(int(s), t.scene_size, int(n)) for s, n in zip(seeds, counts)]


def evaluate_scenes(params: ParamSet, config: RunConfig, scenes: list[Scene]) -> EvalReport:
    dets, gts = {}, {}
    for i, scene in enumerate(scenes):
        image, _, scale = resize_short_side(scene.image, scene.boxes, config.input.short_side)
        found = detect(image, params, config.detector)
        if scale != 1.0:
            found = [rescale_detection(d, 1.0 / scale) for d in found]
        dets[f"{i:04d}"] = found
        gts[f"{i:04d}"] = scene.ground_truth()
    return evaluate(dets, gts)


def rescale_detection(d: Detection, factor: float) -> Detection:
    b = d.box
    return Detection(Box(b.x1 * factor, b.y1 * factor, b.x2 * factor, b.y2 * factor), d.score, d.class_id)


@dataclass
class TrainResult:
    params: ParamSet
    log_lines: list[str] = field(default_factory=list)
    reports: list[tuple[int, EvalReport]] = field(default_factory=list)


def train_toy(config: RunConfig, emit: Optional[Callable[[str], None]] = None,
              scenes: Optional[list[Scene]] = None) -> TrainResult:
    """Deterministic training run; every log line is also passed to ``emit``."""
    scenes = scenes if scenes is not None else make_scenes(config)
    params = build_detector(config.detector, config.seed)
    opt = MomentumSGD(params, config.optimizer.lr_schedule, config.optimizer.momentum,
                      config.optimizer.weight_decay)
    result = TrainResult(params)
    step_rng = make_rng(config.seed + 1)
    k = config.train.images_per_step

    def out(line: str) -> None:
        result.log_lines.append(line)
        log.info(line)
        if emit:
            emit(line)

    for it in range(config.train.iterations):
        opt.zero_grad()
        totals = np.zeros(3)
        for _ in range(k):
            scene = scenes[int(step_rng.integers(len(scenes)))]
            flip_seed, fwd_seed = (int(v) for v in step_rng.integers(0, 2**31 - 1, size=2))
            image, boxes, _ = resize_short_side(scene.image, scene.boxes, config.input.short_side)
            image, boxes, _ = random_hflip(image, boxes, flip_seed, config.input.flip_probability)
            res = train_forward(image, boxes, scene.classes, params, config.detector, fwd_seed)
            loss = res.loss * (1.0 / k) if k > 1 else res.loss
            backward(loss)
            totals += [res.loss.item(), res.cls.item(), res.reg.item()]
        lr = opt.step(it)
        loss_v, cls_v, reg_v = (float(v) for v in totals / k)
        out(f"iter={it} lr={lr!r} loss={loss_v!r} cls={cls_v!r} reg={reg_v!r}")
        every = config.train.eval_every
        if every and ((it + 1) % every == 0 or it + 1 == config.train.iterations):
            report = evaluate_scenes(params, config, scenes)
            result.reports.append((it + 1, report))
            out(f"eval iter={it + 1} " + " ".join(f"{k_}={v:.4f}" for k_, v in report.as_dict().items()))
    return result
