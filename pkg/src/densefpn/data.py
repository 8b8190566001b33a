"""Dataset ingestion: VisDrone-style annotation files, PPM images, synthetic scenes
and the two input transforms (short-side resize, horizontal flip)."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .evaluator import GroundTruthBox
from .geometry import NUM_CLASSES
from .params import make_rng
from .tensor import Tensor

IGNORE_CATEGORIES = (0, 11)


class DataError(ValueError):
    """Malformed or unsupported input data."""


@dataclass(frozen=True)
class AnnotationObject:
    bbox_left: int
    bbox_top: int
    bbox_width: int
    bbox_height: int
    score: int
    category: int
    truncation: int
    occlusion: int

    def to_line(self) -> str:
        return ",".join(str(v) for v in (
            self.bbox_left, self.bbox_top, self.bbox_width, self.bbox_height,
            self.score, self.category, self.truncation, self.occlusion,
        ))

    def ground_truth(self) -> GroundTruthBox:
        box = np.array([self.bbox_left, self.bbox_top,
                        self.bbox_left + self.bbox_width, self.bbox_top + self.bbox_height],
                       dtype=np.float64)
        if self.category in IGNORE_CATEGORIES:
            return GroundTruthBox(box, None, ignore=True)
        return GroundTruthBox(box, self.category - 1)


def parse_annotation_line(line: str, lineno: int = 0) -> AnnotationObject:
    parts = [p.strip() for p in line.strip().rstrip(",").split(",")]
    if len(parts) != 8:
        raise DataError(f"line {lineno}: expected 8 comma-separated fields, got {len(parts)}")
    try:
        values = [int(p) for p in parts]
    except ValueError:
        raise DataError(f"line {lineno}: non-integer field in {line.strip()!r}") from None
    obj = AnnotationObject(*values)
    if obj.bbox_width < 0 or obj.bbox_height < 0:
        raise DataError(f"line {lineno}: negative box size")
    if not 0 <= obj.category <= 11:
        raise DataError(f"line {lineno}: unknown category {obj.category}")
    return obj


def load_annotations(path) -> tuple[list[GroundTruthBox], list[AnnotationObject]]:
    """Parse one per-image annotation file (one object per line)."""
    objects = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            objects.append(parse_annotation_line(line, lineno))
    return [o.ground_truth() for o in objects], objects


def write_annotations(path, objects) -> None:
    Path(path).write_text("".join(o.to_line() + "\n" for o in objects))


def load_annotation_dir(directory) -> dict[str, list[GroundTruthBox]]:
    """``image_id -> ground truth`` for every ``*.txt`` in ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"annotation directory not found: {directory}")
    out = {}
    for f in sorted(directory.glob("*.txt")):
        try:
            out[f.stem] = load_annotations(f)[0]
        except DataError as e:
            raise DataError(f"{f}: {e}") from None
    return out


def objects_from_boxes(boxes: np.ndarray, classes: np.ndarray) -> list[AnnotationObject]:
    """Integer-valued corner boxes with class ids 0..9 as annotation records."""
    out = []
    for (x1, y1, x2, y2), c in zip(np.asarray(boxes).reshape(-1, 4), classes):
        out.append(AnnotationObject(int(round(x1)), int(round(y1)), int(round(x2 - x1)),
                                    int(round(y2 - y1)), 1, int(c) + 1, 0, 0))
    return out


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

_PPM_FIELD = re.compile(rb"(?:\s|#[^\n]*\n)*(\d+)")


def load_image(path) -> Tensor:
    """Binary 8-bit PPM ("P6") as a (1, 3, H, W) float32 tensor in [0, 1]."""
    raw = Path(path).read_bytes()
    if raw[:2] != b"P6":
        raise DataError(f"{path}: unsupported image format (magic {raw[:2]!r}, need P6)")
    pos = 2
    fields = []
    while len(fields) < 3:
        m = _PPM_FIELD.match(raw, pos)
        if not m:
            raise DataError(f"{path}: malformed PPM header")
        fields.append(int(m.group(1)))
        pos = m.end()
    w, h, maxval = fields
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PPM supported (maxval {maxval})")
    pos += 1  # single whitespace byte before the raster
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    img = data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)
    return Tensor(img[None])


def save_image(path, image) -> None:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    arr = arr.reshape(3, arr.shape[-2], arr.shape[-1])
    h, w = arr.shape[1:]
    pix = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + pix.tobytes())


# distinct solid colours, one per class
CLASS_COLORS = np.array([
    [0.90, 0.10, 0.10], [0.10, 0.75, 0.10], [0.10, 0.20, 0.90], [0.95, 0.90, 0.10],
    [0.90, 0.10, 0.90], [0.10, 0.90, 0.90], [1.00, 0.55, 0.00], [0.55, 0.00, 0.80],
    [1.00, 1.00, 1.00], [0.05, 0.05, 0.05],
], dtype=np.float32)
BACKGROUND_COLOR = np.array([0.5, 0.5, 0.5], dtype=np.float32)


@dataclass
class Scene:
    image: Tensor
    boxes: np.ndarray  # (G, 4)
    classes: np.ndarray  # (G,)

    def ground_truth(self) -> list[GroundTruthBox]:
        return [GroundTruthBox(b.copy(), int(c)) for b, c in zip(self.boxes, self.classes)]


def synth_scene(seed: int, size: int, n_objects: int, min_side: int = 12,
                max_side: Optional[int] = None) -> Scene:
    """Uniform grey canvas with non-overlapping solid rectangles in per-class colours."""
    rng = make_rng(seed)
    max_side = max_side or max(min_side, size // 3)
    img = np.broadcast_to(BACKGROUND_COLOR[:, None, None], (3, size, size)).copy()
    boxes, classes = [], []
    attempts = 0
    while len(boxes) < n_objects:
        attempts += 1
        if attempts > 1000:
            raise DataError(f"could not place {n_objects} objects in a {size}px scene")
        w, h = rng.integers(min_side, max_side + 1, size=2)
        x1 = int(rng.integers(0, size - w + 1))
        y1 = int(rng.integers(0, size - h + 1))
        cand = np.array([x1, y1, x1 + w, y1 + h], dtype=np.float64)
        if any(cand[0] < b[2] + 2 and b[0] < cand[2] + 2 and cand[1] < b[3] + 2 and b[1] < cand[3] + 2
               for b in boxes):
            continue
        c = int(rng.integers(0, NUM_CLASSES))
        img[:, y1:y1 + h, x1:x1 + w] = CLASS_COLORS[c][:, None, None]
        boxes.append(cand)
        classes.append(c)
    return Scene(Tensor(img[None]), np.array(boxes, dtype=np.float64).reshape(-1, 4),
                 np.array(classes, dtype=np.int64))


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------

def _resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel-center linear resampling weights (n_out, n_in)."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), i0] += 1 - frac
    m[np.arange(n_out), i1] += frac
    return m


def resize_short_side(image: Tensor, boxes: np.ndarray, target: int, multiple: int = 32):
    """Scale so the short side equals ``target``, then zero-pad bottom/right to ``multiple``.

    Returns ``(image, boxes, scale)``.
    """
    arr = image.data
    _, c, h, w = arr.shape
    scale = target / min(h, w)
    nh, nw = int(round(h * scale)), int(round(w * scale))
    if (nh, nw) != (h, w):
        mh = _resample_matrix(h, nh).astype(arr.dtype)
        mw = _resample_matrix(w, nw).astype(arr.dtype)
        arr = np.matmul(np.matmul(mh, arr), mw.T)
    ph = -(-nh // multiple) * multiple
    pw = -(-nw // multiple) * multiple
    if (ph, pw) != (nh, nw):
        arr = np.pad(arr, ((0, 0), (0, 0), (0, ph - nh), (0, pw - nw)))
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4) * scale
    return Tensor(np.ascontiguousarray(arr)), boxes, scale


def hflip(image: Tensor, boxes: np.ndarray):
    w = image.shape[3]
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    flipped = np.stack([w - b[:, 2], b[:, 1], w - b[:, 0], b[:, 3]], axis=1)
    return Tensor(np.ascontiguousarray(image.data[..., ::-1])), flipped


def random_hflip(image: Tensor, boxes: np.ndarray, seed: int, probability: float = 0.5):
    """Mirror horizontally with the given probability; returns (image, boxes, flipped)."""
    if make_rng(seed).random() < probability:
        img, b = hflip(image, boxes)
        return img, b, True
    return image, np.asarray(boxes, dtype=np.float64).reshape(-1, 4), False
