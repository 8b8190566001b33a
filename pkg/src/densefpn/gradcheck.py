"""Finite-difference gradient checks for every differentiable op and the full pipeline.

Relative error of a checked tensor is ``max|analytic - numeric|`` divided by
``max(max|analytic|, max|numeric|)`` over the checked elements.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .backbone import BackboneConfig, backbone_forward, build_backbone
from .detector import AnchorConfig, DetectorConfig, build_detector, train_forward
from .heads import CascadeConfig, RCNNConfig, RPNConfig
from .params import make_rng
from .pyramid import ABLATION_CONFIGS, FusionConfig, build_fpn_params, dmffpn_forward
from .tensor import Tensor, backward

DOUBLE_TOL = 1e-6
SINGLE_TOL = 1e-3


def finite_difference_grad(f: Callable[[], Tensor], p: Tensor, eps: float = 1e-4,
                           indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``p`` (perturbed in place).

    With ``indices`` only those flat positions are evaluated; other entries are 0.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    flat = p.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f().item()
        flat[i] = orig - eps
        lo = f().item()
        flat[i] = orig
        out[i] = (hi - lo) / (2 * eps)
    return out.reshape(p.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def check(name: str, f: Callable[[], Tensor], wrt: Sequence[Tensor], eps: float = 1e-4,
          tolerance: float = DOUBLE_TOL, max_elements: Optional[int] = None,
          rng: Optional[np.random.Generator] = None) -> CheckResult:
    """Compare backward() against central differences for each tensor in ``wrt``."""
    for t in wrt:
        t.grad = None
    backward(f())
    worst = 0.0
    for t in wrt:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        idx = None
        if max_elements is not None and t.size > max_elements:
            idx = np.sort((rng or make_rng(0)).choice(t.size, size=max_elements, replace=False))
        numeric = finite_difference_grad(f, t, eps, idx)
        if idx is not None:
            analytic = analytic.reshape(-1)[idx]
            numeric = numeric.reshape(-1)[idx]
        worst = max(worst, relative_error(analytic, numeric))
    return CheckResult(name, worst, tolerance)


def _leaf(rng, shape, dtype=np.float64) -> Tensor:
    return Tensor(rng.standard_normal(shape).astype(dtype), requires_grad=True)


def op_checks(seed: int = 0, dtype=np.float64) -> list[CheckResult]:
    """Random instances (extent <= 6 per dimension) of every differentiable op."""
    rng = make_rng(seed)
    tol = DOUBLE_TOL if dtype == np.float64 else SINGLE_TOL
    eps = 1e-4 if dtype == np.float64 else 1e-2
    results = []

    def run(name, f, wrt):
        results.append(check(name, f, wrt, eps=eps, tolerance=tol))

    x = _leaf(rng, (2, 3, 5, 6), dtype)
    for k in (1, 3):
        w = _leaf(rng, (4, 3, k, k), dtype)
        b = _leaf(rng, (4,), dtype)
        proj = rng.standard_normal((2, 4, 5, 6))
        run(f"conv2d_{k}x{k}", lambda w=w, b=b, proj=proj: ops.sum_all(
            ops.mul(ops.conv2d(x, w, b), Tensor(proj.astype(dtype)))), [x, w, b])

    u = _leaf(rng, (1, 2, 3, 4), dtype)
    for factor in (1, 2, 4):
        proj = Tensor(rng.standard_normal((1, 2, 3 * factor, 4 * factor)).astype(dtype))
        run(f"bilinear_upsample_x{factor}",
            lambda factor=factor, proj=proj: ops.sum_all(ops.mul(ops.bilinear_upsample(u, factor), proj)),
            [u])

    a = _leaf(rng, (1, 2, 3, 3), dtype)
    b2 = _leaf(rng, (1, 3, 3, 3), dtype)
    proj = Tensor(rng.standard_normal((1, 5, 3, 3)).astype(dtype))
    run("concat_channels", lambda: ops.sum_all(ops.mul(ops.concat_channels([a, b2]), proj)), [a, b2])

    c = _leaf(rng, (2, 3, 4), dtype)
    d = _leaf(rng, (2, 3, 4), dtype)
    proj = Tensor(rng.standard_normal((2, 3, 4)).astype(dtype))
    run("add", lambda: ops.sum_all(ops.mul(ops.add(c, d), proj)), [c, d])
    run("mul", lambda: ops.sum_all(ops.mul(c, d)), [c, d])

    # keep inputs away from the kink so central differences stay one-sided-consistent
    r = rng.standard_normal((2, 3, 4, 4))
    r = np.where(np.abs(r) < 0.05, 0.5, r)
    rt = Tensor(r.astype(dtype), requires_grad=True)
    proj = Tensor(rng.standard_normal((2, 3, 4, 4)).astype(dtype))
    run("relu", lambda: ops.sum_all(ops.mul(ops.relu(rt), proj)), [rt])

    mp = Tensor(rng.permutation(96).reshape(2, 3, 4, 4).astype(dtype) * 0.1, requires_grad=True)
    proj = Tensor(rng.standard_normal((2, 3, 2, 2)).astype(dtype))
    run("max_pool2", lambda: ops.sum_all(ops.mul(ops.max_pool2(mp), proj)), [mp])

    lin_x = _leaf(rng, (5, 6), dtype)
    lin_w = _leaf(rng, (4, 6), dtype)
    lin_b = _leaf(rng, (4,), dtype)
    proj = Tensor(rng.standard_normal((5, 4)).astype(dtype))
    run("linear", lambda: ops.sum_all(ops.mul(ops.linear(lin_x, lin_w, lin_b), proj)),
        [lin_x, lin_w, lin_b])

    logits = _leaf(rng, (5, 6), dtype)
    target = np.eye(6)[rng.integers(0, 6, size=5)]
    run("softmax_cross_entropy", lambda: ops.softmax_cross_entropy(logits, target), [logits])

    pred = _leaf(rng, (5, 4), dtype)
    tgt = rng.standard_normal((5, 4)) * 2
    # avoid residuals within eps of the |x| = 1 seam
    tgt = np.where(np.abs(np.abs(pred.data - tgt) - 1) < 0.01, tgt + 0.1, tgt)
    run("smooth_l1", lambda: ops.smooth_l1(pred, tgt.astype(dtype)), [pred])

    g = _leaf(rng, (6, 3), dtype)
    idx = np.array([0, 2, 2, 5])
    proj = Tensor(rng.standard_normal((4, 3)).astype(dtype))
    run("take_rows", lambda: ops.sum_all(ops.mul(ops.take_rows(g, idx), proj)), [g])

    pm = _leaf(rng, (2, 3, 4), dtype)
    proj = Tensor(rng.standard_normal((4, 2, 3)).astype(dtype))
    run("permute_reshape", lambda: ops.sum_all(ops.mul(
        ops.reshape(ops.permute(pm, (2, 0, 1)), (4, 2, 3)), proj)), [pm])

    f1 = _leaf(rng, (1, 2, 6, 6), dtype)
    f2 = _leaf(rng, (1, 2, 3, 3), dtype)
    boxes = np.array([[1.0, 2.0, 17.0, 20.0], [3.5, 0.5, 9.0, 22.0], [0.0, 0.0, 24.0, 24.0]])
    levels = np.array([0, 1, 0])
    proj = Tensor(rng.standard_normal((3, 2, 3, 3)).astype(dtype))
    run("roi_align", lambda: ops.sum_all(ops.mul(
        ops.roi_align([f1, f2], [4, 8], boxes, levels, 3), proj)), [f1, f2])
    return results


def _tiny_detector(mode: str = "concat", stages: int = 2) -> DetectorConfig:
    return DetectorConfig(
        backbone=BackboneConfig((4, 4, 8, 8), (1, 1, 1, 1)),
        fusion=FusionConfig(True, True, mode, out_channels=4, add_p6=False),
        anchors=AnchorConfig(base_sizes=(8, 16, 32, 64)),
        rpn=RPNConfig(batch=16, pre_nms_train=50, post_nms_train=2),
        rcnn=RCNNConfig(batch=2, pos_fraction=0.5),
        cascade=CascadeConfig(num_stages=stages, stage_iou_thresholds=(0.5, 0.6, 0.7)[:stages],
                              fc_dim=8, roi_size=7),
    )


def pipeline_checks(seed: int = 0, per_param: int = 2) -> list[CheckResult]:
    """Backbone, every fusion configuration, and the full loss on a 32x32 image (double precision)."""
    rng = make_rng(seed)
    results = []
    image = Tensor(rng.uniform(0, 1, (1, 3, 32, 32)), requires_grad=True)

    bcfg = BackboneConfig((4, 4, 8, 8), (2, 2, 2, 2))
    bparams = build_backbone(bcfg, seed, np.float64)
    proj = [rng.standard_normal(t.shape) for t in backbone_forward(image, bparams, bcfg).levels()]

    def backbone_loss():
        feats = backbone_forward(image, bparams, bcfg).levels()
        total = ops.sum_all(ops.mul(feats[0], Tensor(proj[0])))
        for t, p in zip(feats[1:], proj[1:]):
            total = ops.add(total, ops.sum_all(ops.mul(t, Tensor(p))))
        return total

    results.append(check("backbone", backbone_loss, [image, *bparams.values()],
                         max_elements=per_param, rng=rng))

    small = BackboneConfig((4, 4, 8, 8), (1, 1, 1, 1))
    sparams = build_backbone(small, seed + 1, np.float64)
    for name, kw in ABLATION_CONFIGS.items():
        fcfg = FusionConfig(out_channels=4, add_p6=False, **kw)
        fparams = build_fpn_params(small.stage_channels, fcfg, seed + 2, np.float64)
        levels = dmffpn_forward(backbone_forward(image, sparams, small), fcfg, fparams).levels()
        proj_l = [Tensor(rng.standard_normal(t.shape)) for t in levels]

        def fusion_loss(fcfg=fcfg, fparams=fparams, proj_l=proj_l):
            lv = dmffpn_forward(backbone_forward(image, sparams, small), fcfg, fparams).levels()
            total = ops.sum_all(ops.mul(lv[0], proj_l[0]))
            for t, p in zip(lv[1:], proj_l[1:]):
                total = ops.add(total, ops.sum_all(ops.mul(t, p)))
            return total

        results.append(check(f"dmffpn[{name}]", fusion_loss, [image, *fparams.values()],
                             max_elements=per_param, rng=rng))

    cfg = _tiny_detector(stages=2)
    params = build_detector(cfg, seed + 3, np.float64)
    gt_boxes = np.array([[4.0, 6.0, 20.0, 18.0], [14.0, 12.0, 30.0, 30.0]])
    gt_classes = np.array([2, 7])
    first = train_forward(image, gt_boxes, gt_classes, params, cfg, seed)
    plan = first.plan

    def pipeline_loss():
        return train_forward(image, gt_boxes, gt_classes, params, cfg, seed, plan=plan).loss

    results.append(check("pipeline[T=2, 2 proposals]", pipeline_loss, [image, *params.values()],
                         max_elements=per_param, rng=rng))
    return results


def run_suite(seed: int = 0) -> tuple[list[CheckResult], float]:
    """All checks in double precision; returns results and wall time in seconds."""
    start = time.perf_counter()
    results = op_checks(seed, np.float64) + pipeline_checks(seed)
    return results, time.perf_counter() - start
