"""Box geometry: IoU, anchor tiling, delta coding, clipping and NMS.

Boxes are corner form ``(x1, y1, x2, y2)`` in continuous pixel coordinates;
width is ``x2 - x1`` with no +1 convention.  Vectorised helpers operate on
``(N, 4)`` float arrays; :class:`Box` and :class:`Detection` are the
record types used at API boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

NUM_CLASSES = 10
DEFAULT_STRIDES = (4, 8, 16, 32, 64)
DEFAULT_BASE_SIZES = (16, 32, 64, 128, 256)
# height:width
DEFAULT_RATIOS = (0.5, 1.0, 2.0)
# largest log-scale accepted when decoding, as in common detector code
DELTA_CLAMP = math.log(1000.0 / 16)


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"invalid box {self}: need x2 >= x1 and y2 >= y1")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in a)
        return cls(x1, y1, x2, y2)


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    class_id: int

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")
        if not 0 <= self.class_id < NUM_CLASSES:
            raise ValueError(f"class_id {self.class_id} outside [0, {NUM_CLASSES - 1}]")


def as_boxes(boxes) -> np.ndarray:
    if isinstance(boxes, Box):
        return boxes.as_array()[None]
    if isinstance(boxes, (list, tuple)) and boxes and isinstance(boxes[0], Box):
        return np.stack([b.as_array() for b in boxes])
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def box_areas(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU, shape (len(a), len(b)); pairs with zero union give 0."""
    a, b = as_boxes(a), as_boxes(b)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = box_areas(a)[:, None] + box_areas(b)[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def iou(a: Box, b: Box) -> float:
    return float(iou_matrix(a, b)[0, 0])


# ---------------------------------------------------------------------------
# anchors
# ---------------------------------------------------------------------------

@dataclass
class AnchorSet:
    per_level: list[np.ndarray]
    level_strides: tuple[int, ...] = DEFAULT_STRIDES
    base_sizes: tuple[float, ...] = DEFAULT_BASE_SIZES
    ratios: tuple[float, ...] = DEFAULT_RATIOS
    extents: list[tuple[int, int]] = field(default_factory=list)

    @property
    def all(self) -> np.ndarray:
        return np.concatenate(self.per_level, axis=0)

    def __len__(self) -> int:
        return sum(len(a) for a in self.per_level)


def anchor_shapes(base: float, ratios: Sequence[float]) -> np.ndarray:
    """(width, height) per ratio; ratio is height:width and area stays base**2."""
    r = np.asarray(ratios, dtype=np.float64)
    return np.stack([base * np.sqrt(1.0 / r), base * np.sqrt(r)], axis=1)


def generate_anchors(
    level_extents: Sequence[tuple[int, int]],
    image_size: tuple[int, int],
    strides: Sequence[int] = DEFAULT_STRIDES,
    base_sizes: Sequence[float] = DEFAULT_BASE_SIZES,
    ratios: Sequence[float] = DEFAULT_RATIOS,
) -> AnchorSet:
    """Tile anchors over each level; ordering is row, column, ratio.  No clipping."""
    if not (len(level_extents) == len(strides) == len(base_sizes)):
        raise ValueError(
            f"{len(level_extents)} level extents for {len(strides)} strides "
            f"and {len(base_sizes)} base sizes"
        )
    img_h, img_w = image_size
    per_level = []
    for (h, w), stride, base in zip(level_extents, strides, base_sizes):
        if h * stride != img_h or w * stride != img_w:
            raise ValueError(
                f"level extent {h}x{w} at stride {stride} does not tile a {img_h}x{img_w} image"
            )
        shapes = anchor_shapes(base, ratios)  # (R, 2)
        cy = (np.arange(h) + 0.5) * stride
        cx = (np.arange(w) + 0.5) * stride
        cyy, cxx = np.meshgrid(cy, cx, indexing="ij")
        centers = np.stack([cxx, cyy], axis=-1).reshape(-1, 1, 2)
        half = shapes[None] / 2
        anchors = np.concatenate([centers - half, centers + half], axis=-1)
        per_level.append(anchors.reshape(-1, 4))
    return AnchorSet(per_level, tuple(strides), tuple(base_sizes), tuple(ratios), list(level_extents))


# ---------------------------------------------------------------------------
# delta coding
# ---------------------------------------------------------------------------

def _center_form(b: np.ndarray):
    w = b[:, 2] - b[:, 0]
    h = b[:, 3] - b[:, 1]
    return b[:, 0] + 0.5 * w, b[:, 1] + 0.5 * h, w, h


def encode_boxes(anchors, gts) -> np.ndarray:
    anchors, gts = as_boxes(anchors), as_boxes(gts)
    ax, ay, aw, ah = _center_form(anchors)
    gx, gy, gw, gh = _center_form(gts)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("encode: anchors must have positive width and height")
    if np.any(gw <= 0) or np.any(gh <= 0):
        raise ValueError("encode: ground-truth boxes must have positive width and height")
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode_boxes(anchors, deltas) -> np.ndarray:
    anchors = as_boxes(anchors)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    # corner offsets rather than centre form, so zero deltas reproduce the input bit-exactly
    sx = deltas[:, 0] * aw
    sy = deltas[:, 1] * ah
    gx = 0.5 * aw * np.expm1(np.minimum(deltas[:, 2], DELTA_CLAMP))
    gy = 0.5 * ah * np.expm1(np.minimum(deltas[:, 3], DELTA_CLAMP))
    return np.stack([anchors[:, 0] + sx - gx, anchors[:, 1] + sy - gy,
                     anchors[:, 2] + sx + gx, anchors[:, 3] + sy + gy], axis=1)


def encode_box(anchor: Box, gt: Box) -> tuple[float, float, float, float]:
    return tuple(float(v) for v in encode_boxes(anchor, gt)[0])


def decode_box(anchor: Box, deltas) -> Box:
    return Box.from_array(decode_boxes(anchor, deltas)[0])


# ---------------------------------------------------------------------------
# clipping and suppression
# ---------------------------------------------------------------------------

def clip_boxes(boxes, width: float, height: float) -> np.ndarray:
    b = as_boxes(boxes).copy()
    b[:, 0::2] = np.clip(b[:, 0::2], 0, width)
    b[:, 1::2] = np.clip(b[:, 1::2], 0, height)
    return b


def clip_box(b: Box, width: float, height: float) -> Box:
    return Box.from_array(clip_boxes(b, width, height)[0])


def nms_indices(boxes, scores, classes, iou_threshold: float, max_keep: int) -> np.ndarray:
    """Greedy class-wise suppression; returns kept indices in (score desc, index asc) order."""
    boxes = as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    classes = np.asarray(classes)
    n = len(scores)
    if n == 0 or max_keep <= 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(n), -scores))
    areas = box_areas(boxes)
    keep = []
    for cls in np.unique(classes):
        idx = order[classes[order] == cls]
        b = boxes[idx]
        a = areas[idx]
        alive = np.ones(len(idx), dtype=bool)
        for i in range(len(idx)):
            if not alive[i]:
                continue
            keep.append(idx[i])
            rest = np.flatnonzero(alive[i + 1:]) + i + 1
            if rest.size == 0:
                break
            iw = np.minimum(b[i, 2], b[rest, 2]) - np.maximum(b[i, 0], b[rest, 0])
            ih = np.minimum(b[i, 3], b[rest, 3]) - np.maximum(b[i, 1], b[rest, 1])
            inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
            union = a[i] + a[rest] - inter
            ov = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
            alive[rest[ov > iou_threshold]] = False
    keep = np.asarray(keep, dtype=np.int64)
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    keep = keep[np.argsort(rank[keep], kind="stable")]
    return keep[:max_keep]


def nms(dets: Sequence[Detection], iou_threshold: float, max_keep: int) -> list[Detection]:
    if not dets:
        return []
    keep = nms_indices(
        [d.box for d in dets], [d.score for d in dets], [d.class_id for d in dets],
        iou_threshold, max_keep,
    )
    return [dets[i] for i in keep]
