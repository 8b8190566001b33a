"""Region proposal head, cascade box heads, target sampling and the multi-task loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import geometry as geo
from . import ops
from .params import ParamSet, add_conv, add_linear, make_rng
from .tensor import ShapeError, Tensor

BACKGROUND = geo.NUM_CLASSES  # index 10 in an 11-way classifier


@dataclass(frozen=True)
class CascadeConfig:
    num_stages: int = 3
    lam: float = 1.0
    stage_iou_thresholds: tuple[float, ...] = (0.5, 0.6, 0.7)
    num_classes: int = geo.NUM_CLASSES + 1
    fc_dim: int = 1024
    roi_size: int = 7

    def __post_init__(self):
        if self.num_stages < 1:
            raise ValueError("cascade needs at least one stage")
        th = self.stage_iou_thresholds
        if len(th) != self.num_stages:
            raise ValueError(f"{len(th)} IoU thresholds for {self.num_stages} stages")
        if any(not 0.5 <= t < 1 for t in th) or any(a >= b for a, b in zip(th, th[1:])):
            raise ValueError(f"stage IoU thresholds must increase strictly within [0.5, 1): {th}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


@dataclass(frozen=True)
class RPNConfig:
    batch: int = 256
    pos_fraction: float = 0.5
    pos_iou: float = 0.7
    neg_iou: float = 0.3
    pre_nms_train: int = 2000
    post_nms_train: int = 1000
    pre_nms_test: int = 1000
    post_nms_test: int = 1000
    nms_iou: float = 0.7
    min_size: float = 1.0


@dataclass(frozen=True)
class RCNNConfig:
    batch: int = 512
    pos_fraction: float = 0.25


@dataclass
class SampledBatch:
    """Chosen rows with their labels and (positive-only) regression targets.

    ``labels`` are class ids; for the RPN they are 1 (object) / 0 (background),
    for box heads 0..9 with ``BACKGROUND`` for background rows.
    """

    indices: np.ndarray
    labels: np.ndarray
    targets: np.ndarray
    positive: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return len(self.indices)

    def one_hot(self) -> np.ndarray:
        out = np.zeros((len(self.labels), self.num_classes))
        out[np.arange(len(self.labels)), self.labels] = 1.0
        return out

    def localized(self) -> "SampledBatch":
        """Same batch with indices renumbered 0..N-1 (for outputs computed on the sample only)."""
        return SampledBatch(np.arange(len(self.indices)), self.labels, self.targets,
                            self.positive, self.num_classes)


@dataclass
class RPNOutput:
    objectness: Tensor  # (A,)
    deltas: Tensor  # (A, 4)
    level_sizes: list[int] = field(default_factory=list)


@dataclass
class StageOutput:
    class_logits: Tensor  # (R, num_classes)
    box_deltas: Tensor  # (R, 4)
    boxes: np.ndarray  # input boxes (R, 4)
    refined: np.ndarray  # decoded + clipped boxes (R, 4)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def build_head_params(out_channels: int, num_anchors: int, cascade: CascadeConfig,
                      seed: int, dtype=np.float32) -> ParamSet:
    rng = make_rng(seed)
    params = ParamSet()
    add_conv(params, rng, "rpn.conv", out_channels, out_channels, 3, dtype)
    add_conv(params, rng, "rpn.cls", num_anchors, out_channels, 1, dtype, std=0.01)
    add_conv(params, rng, "rpn.bbox", 4 * num_anchors, out_channels, 1, dtype, std=0.01)
    feat = out_channels * cascade.roi_size ** 2
    for t in range(cascade.num_stages):
        add_linear(params, rng, f"stage{t}.fc1", cascade.fc_dim, feat, dtype)
        add_linear(params, rng, f"stage{t}.fc2", cascade.fc_dim, cascade.fc_dim, dtype)
        add_linear(params, rng, f"stage{t}.cls", cascade.num_classes, cascade.fc_dim, dtype, std=0.01)
        add_linear(params, rng, f"stage{t}.bbox", 4, cascade.fc_dim, dtype, std=0.001)
    return params


# ---------------------------------------------------------------------------
# region proposal network
# ---------------------------------------------------------------------------

def rpn_forward(levels: Sequence[Tensor], params: ParamSet, num_anchors: int = 3,
                expected_levels: Optional[int] = None) -> RPNOutput:
    """Shared 3x3 conv and 1x1 objectness/delta heads over every pyramid level.

    Rows are ordered level, row, column, anchor shape, matching
    :func:`geometry.generate_anchors`.
    """
    if expected_levels is not None and len(levels) != expected_levels:
        raise ShapeError(f"RPN expects {expected_levels} pyramid levels, got {len(levels)}")
    objs, dels, sizes = [], [], []
    for p in levels:
        if p is None:
            raise ShapeError("RPN input is missing a pyramid level")
        n, _, h, w = p.shape
        if n != 1:
            raise ShapeError(f"RPN runs on one image at a time, got batch {n}")
        x = ops.relu(ops.conv2d(p, params["rpn.conv.weight"], params["rpn.conv.bias"]))
        o = ops.conv2d(x, params["rpn.cls.weight"], params["rpn.cls.bias"])
        d = ops.conv2d(x, params["rpn.bbox.weight"], params["rpn.bbox.bias"])
        objs.append(ops.reshape(ops.permute(o, (0, 2, 3, 1)), (h * w * num_anchors,)))
        d = ops.reshape(d, (1, num_anchors, 4, h, w))
        dels.append(ops.reshape(ops.permute(d, (0, 3, 4, 1, 2)), (h * w * num_anchors, 4)))
        sizes.append(h * w * num_anchors)
    return RPNOutput(ops.concat(objs, axis=0), ops.concat(dels, axis=0), sizes)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def generate_proposals(objectness: np.ndarray, deltas: np.ndarray, anchors: np.ndarray,
                       image_size: tuple[int, int], pre_nms_k: int, post_nms_k: int,
                       nms_iou: float = 0.7, min_size: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Decode, clip, drop boxes with a side under ``min_size``, keep the top
    ``pre_nms_k`` by score, suppress at ``nms_iou`` and keep ``post_nms_k``.

    Returns ``(boxes, scores)`` in descending score order.
    """
    if pre_nms_k < 1 or post_nms_k < 1:
        raise ValueError("pre_nms_k and post_nms_k must be >= 1")
    h, w = image_size
    scores = _sigmoid(np.asarray(objectness, dtype=np.float64).reshape(-1))
    boxes = geo.clip_boxes(geo.decode_boxes(anchors, deltas), w, h)
    ok = ((boxes[:, 2] - boxes[:, 0]) >= min_size) & ((boxes[:, 3] - boxes[:, 1]) >= min_size)
    idx = np.flatnonzero(ok)
    order = idx[np.lexsort((idx, -scores[idx]))][:pre_nms_k]
    keep = geo.nms_indices(boxes[order], scores[order], np.zeros(len(order), dtype=np.int64),
                           nms_iou, post_nms_k)
    sel = order[keep]
    return boxes[sel], scores[sel]


# ---------------------------------------------------------------------------
# region features and box heads
# ---------------------------------------------------------------------------

def roi_levels(boxes: np.ndarray, canonical: float = 224.0, canonical_level: int = 4,
               min_level: int = 2, max_level: int = 5) -> np.ndarray:
    """Pyramid level per box: floor(4 + log2(sqrt(area)/224)) clamped to [2, 5]."""
    boxes = geo.as_boxes(boxes)
    area = geo.box_areas(boxes)
    if np.any(area <= 0):
        raise ValueError("RoI boxes must have positive area")
    k = np.floor(canonical_level + np.log2(np.sqrt(area) / canonical))
    return np.clip(k, min_level, max_level).astype(np.int64)


def roi_align(levels: Sequence[Tensor], boxes, output_size: int = 7) -> Tensor:
    """(R, C, s, s) features for boxes on P2..P5 chosen by :func:`roi_levels`."""
    boxes = geo.as_boxes(boxes)
    lvl = roi_levels(boxes) - 2
    return ops.roi_align(list(levels[:4]), [4, 8, 16, 32], boxes, lvl, output_size)


def _affine(x: Tensor, params: ParamSet, name: str) -> Tensor:
    return ops.linear(x, params[f"{name}.weight"], params[f"{name}.bias"])


def stage_head(levels: Sequence[Tensor], boxes: np.ndarray, params: ParamSet, stage: int,
               config: CascadeConfig) -> tuple[Tensor, Tensor]:
    feats = roi_align(levels, boxes, config.roi_size)
    x = ops.reshape(feats, (feats.shape[0], -1))
    x = ops.relu(_affine(x, params, f"stage{stage}.fc1"))
    x = ops.relu(_affine(x, params, f"stage{stage}.fc2"))
    return _affine(x, params, f"stage{stage}.cls"), _affine(x, params, f"stage{stage}.bbox")


def refine_boxes(boxes: np.ndarray, deltas: np.ndarray, image_size: tuple[int, int]) -> np.ndarray:
    """Decode and clip; boxes collapsing below 1e-2 px keep their input coordinates."""
    h, w = image_size
    out = geo.clip_boxes(geo.decode_boxes(boxes, deltas), w, h)
    bad = ((out[:, 2] - out[:, 0]) < 1e-2) | ((out[:, 3] - out[:, 1]) < 1e-2)
    out[bad] = boxes[bad]
    return out


def run_stage(levels: Sequence[Tensor], boxes: np.ndarray, params: ParamSet, stage: int,
              config: CascadeConfig, image_size: tuple[int, int]) -> StageOutput:
    boxes = geo.as_boxes(boxes)
    logits, deltas = stage_head(levels, boxes, params, stage, config)
    return StageOutput(logits, deltas, boxes, refine_boxes(boxes, deltas.data, image_size))


def cascade_forward(proposals: np.ndarray, levels: Sequence[Tensor], config: CascadeConfig,
                    params: ParamSet, image_size: tuple[int, int]) -> list[StageOutput]:
    """Run all stages; stage t consumes the refined boxes of stage t-1."""
    boxes = geo.as_boxes(proposals)
    if len(boxes) == 0:
        raise ValueError("cascade_forward needs at least one proposal")
    outs = []
    for t in range(config.num_stages):
        out = run_stage(levels, boxes, params, t, config, image_size)
        outs.append(out)
        boxes = out.refined
    return outs


# ---------------------------------------------------------------------------
# target assignment and sampling
# ---------------------------------------------------------------------------

def assign_rpn_labels(anchors: np.ndarray, gt_boxes: np.ndarray, pos_iou: float = 0.7,
                      neg_iou: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor label (1 object, 0 background, -1 ignored) and matched gt index.

    Positive: IoU >= ``pos_iou`` with some gt, or the anchor attains a gt's best
    (nonzero) IoU.  Negative: max IoU < ``neg_iou`` and not positive.
    """
    anchors, gt_boxes = geo.as_boxes(anchors), geo.as_boxes(gt_boxes)
    n = len(anchors)
    labels = np.full(n, -1, dtype=np.int64)
    if len(gt_boxes) == 0:
        labels[:] = 0
        return labels, np.full(n, -1, dtype=np.int64)
    ious = geo.iou_matrix(anchors, gt_boxes)
    best = ious.max(axis=1)
    matched = ious.argmax(axis=1)
    labels[best < neg_iou] = 0
    labels[best >= pos_iou] = 1
    gt_best = ious.max(axis=0)
    for g in np.flatnonzero(gt_best > 0):
        hits = np.flatnonzero(ious[:, g] == gt_best[g])
        labels[hits] = 1
        matched[hits] = g
    return labels, matched


def _sample(pos: np.ndarray, neg: np.ndarray, batch: int, pos_fraction: float,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Pick ``batch`` rows at the requested positive fraction.

    Positives are capped at ``round(batch * pos_fraction)``; negatives fill the
    rest.  If negatives run out, further positives are taken; if the pool is
    still too small, rows are redrawn with replacement from what was chosen so
    the batch size stays exact.  Returns (positive rows, negative rows).
    """
    n_pos = min(len(pos), int(round(batch * pos_fraction)))
    n_neg = min(len(neg), batch - n_pos)
    n_pos = min(len(pos), batch - n_neg)
    pos_sel = rng.permutation(pos)[:n_pos]
    neg_sel = rng.permutation(neg)[:n_neg]
    short = batch - n_pos - n_neg
    if short > 0:
        if n_neg:
            neg_sel = np.concatenate([neg_sel, rng.choice(neg_sel, size=short)])
        elif n_pos:
            pos_sel = np.concatenate([pos_sel, rng.choice(pos_sel, size=short)])
    return pos_sel.astype(np.int64), neg_sel.astype(np.int64)


def assign_and_sample_rpn(anchors: np.ndarray, gt_boxes: np.ndarray, seed: int,
                          config: RPNConfig = RPNConfig()) -> SampledBatch:
    anchors, gt_boxes = geo.as_boxes(anchors), geo.as_boxes(gt_boxes)
    labels, matched = assign_rpn_labels(anchors, gt_boxes, config.pos_iou, config.neg_iou)
    rng = make_rng(seed)
    pos, neg = _sample(np.flatnonzero(labels == 1), np.flatnonzero(labels == 0),
                       config.batch, config.pos_fraction, rng)
    idx = np.concatenate([pos, neg])
    positive = np.zeros(len(idx), dtype=bool)
    positive[: len(pos)] = True
    targets = (geo.encode_boxes(anchors[pos], gt_boxes[matched[pos]])
               if len(pos) else np.zeros((0, 4)))
    return SampledBatch(idx, positive.astype(np.int64), targets, positive, 2)


def assign_rcnn_labels(boxes: np.ndarray, gt_boxes: np.ndarray, gt_classes: np.ndarray,
                       iou_threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Class label per box (``BACKGROUND`` below threshold) and matched gt index."""
    boxes, gt_boxes = geo.as_boxes(boxes), geo.as_boxes(gt_boxes)
    labels = np.full(len(boxes), BACKGROUND, dtype=np.int64)
    if len(gt_boxes) == 0:
        return labels, np.full(len(boxes), -1, dtype=np.int64)
    ious = geo.iou_matrix(boxes, gt_boxes)
    matched = ious.argmax(axis=1)
    fg = ious.max(axis=1) >= iou_threshold
    labels[fg] = np.asarray(gt_classes, dtype=np.int64)[matched[fg]]
    return labels, matched


def assign_and_sample_rcnn(boxes: np.ndarray, gt_boxes: np.ndarray, gt_classes: np.ndarray,
                           iou_threshold: float, seed: int,
                           config: RCNNConfig = RCNNConfig()) -> SampledBatch:
    if not 0.5 <= iou_threshold < 1:
        raise ValueError(f"iou_threshold must lie in [0.5, 1), got {iou_threshold}")
    boxes, gt_boxes = geo.as_boxes(boxes), geo.as_boxes(gt_boxes)
    labels, matched = assign_rcnn_labels(boxes, gt_boxes, gt_classes, iou_threshold)
    rng = make_rng(seed)
    pos, neg = _sample(np.flatnonzero(labels != BACKGROUND), np.flatnonzero(labels == BACKGROUND),
                       config.batch, config.pos_fraction, rng)
    idx = np.concatenate([pos, neg])
    positive = np.zeros(len(idx), dtype=bool)
    positive[: len(pos)] = True
    targets = (geo.encode_boxes(boxes[pos], gt_boxes[matched[pos]])
               if len(pos) else np.zeros((0, 4)))
    return SampledBatch(idx, labels[idx], targets, positive, BACKGROUND + 1)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def _task_terms(logits: Tensor, deltas: Tensor, batch: SampledBatch) -> tuple[Tensor, Tensor]:
    n = len(batch)
    if n == 0:
        raise ValueError("cannot normalise the loss over an empty batch (N = 0)")
    cls = ops.softmax_cross_entropy(ops.take_rows(logits, batch.indices), batch.one_hot())
    pos_rows = batch.indices[batch.positive]
    if len(pos_rows) == 0:
        return cls, Tensor(np.zeros((), dtype=logits.dtype))
    pred = ops.take_rows(deltas, pos_rows)
    # smooth_l1 averages over positives; rescale so the sum is divided by N
    reg = ops.mul(ops.smooth_l1(pred, batch.targets.astype(logits.dtype)), len(pos_rows) / n)
    return cls, reg


def rpn_logits(objectness: Tensor) -> Tensor:
    """Two-column (background, object) logits with the background logit pinned at 0."""
    col = ops.reshape(objectness, (objectness.shape[0], 1))
    return ops.concat([Tensor(np.zeros(col.shape, dtype=col.dtype)), col], axis=1)


def loss_terms(stage_batches: Sequence[SampledBatch], stage_outputs: Sequence[StageOutput],
               rpn_batch: SampledBatch, rpn_output: RPNOutput) -> tuple[Tensor, Tensor]:
    """Classification and regression parts, each summed over the RPN and every stage."""
    if len(stage_batches) != len(stage_outputs):
        raise ValueError("one sampled batch is needed per stage output")
    cls, reg = _task_terms(rpn_logits(rpn_output.objectness), rpn_output.deltas, rpn_batch)
    for batch, out in zip(stage_batches, stage_outputs):
        c, r = _task_terms(out.class_logits, out.box_deltas, batch)
        cls = ops.add(cls, c)
        reg = ops.add(reg, r)
    return cls, reg


def total_loss(stage_batches, stage_outputs, rpn_batch, rpn_output, lam: float = 1.0) -> Tensor:
    cls, reg = loss_terms(stage_batches, stage_outputs, rpn_batch, rpn_output)
    return ops.add(cls, ops.mul(reg, lam))
