"""Differentiable operations on :class:`~densefpn.tensor.Tensor`.

Each op computes its forward result with numpy and records a closure that
maps the upstream gradient to gradients for its inputs.  Ops keep the dtype
of their (first) input, so float64 graphs stay float64 end to end.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Parameter, ShapeError, Tensor, make_result


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise / structural
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")
    return make_result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with a same-shape tensor, or scaling by a python number."""
    if not isinstance(b, Tensor):
        c = float(b)
        return make_result(a.data * a.data.dtype.type(c), "scale", (a,), lambda g: (g * c,))
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return make_result(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return make_result(
        np.asarray(x.data.sum(), dtype=x.dtype), "sum", (x,),
        lambda g: (np.broadcast_to(g, shape).copy(),),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), "relu", (x,), lambda g: (g * mask,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return make_result(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result(
        np.ascontiguousarray(x.data.transpose(axes)), "permute", (x,),
        lambda g: (np.ascontiguousarray(g.transpose(inverse)),),
    )


def take_rows(x: Tensor, index) -> Tensor:
    """Gather ``x[index]`` along axis 0 (indices may repeat)."""
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]

    def back(g):
        out = np.zeros((n,) + g.shape[1:], dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return make_result(x.data[index], "take_rows", (x,), back)


def concat(inputs: Sequence[Tensor], axis: int) -> Tensor:
    if not inputs:
        raise ShapeError("concat: empty input list")
    ref = inputs[0].shape
    for t in inputs[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[d] != ref[d] for d in range(len(ref)) if d != axis
        ):
            raise ShapeError(f"concat along axis {axis}: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[axis] for t in inputs]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis))
            for i in range(len(inputs))
        )

    return make_result(np.concatenate([t.data for t in inputs], axis=axis), "concat", inputs, back)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Stack NCHW maps along channels in argument order."""
    for t in inputs:
        if t.data.ndim != 4:
            raise ShapeError(f"concat_channels expects NCHW tensors, got shape {t.shape}")
    return concat(inputs, axis=1)


# ---------------------------------------------------------------------------
# convolution, resampling, pooling
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 same-padded convolution with a square 1x1 or 3x3 kernel."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be NCHW, got shape {x.shape}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be (Cout, Cin, k, k), got shape {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"conv2d: kernel must be 1x1 or 3x3, got {kh}x{kw}")
    if wcin != cin:
        raise ShapeError(f"conv2d: input channels {cin} do not match weight in-channels {wcin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match out-channels {cout}")
    k = kh
    pad = k // 2
    xd = x.data
    if pad:
        xd = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # (n, h, w, cin, k, k) -> rows of receptive fields
    cols = sliding_window_view(xd, (k, k), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)
    cols = cols.reshape(n * h * w, cin * k * k)
    wmat = weight.data.reshape(cout, cin * k * k)
    out = cols @ wmat.T
    out += bias.data
    out = np.ascontiguousarray(out.reshape(n, h, w, cout).transpose(0, 3, 1, 2))

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * h * w, cout)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, h, w, cin, k, k)
            if k == 1:
                gx = np.ascontiguousarray(gcols[..., 0, 0].transpose(0, 3, 1, 2))
            else:
                gp = np.zeros((n, cin, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
                for di in range(k):
                    for dj in range(k):
                        gp[:, :, di:di + h, dj:dj + w] += gcols[..., di, dj].transpose(0, 3, 1, 2)
                gx = gp[:, :, pad:pad + h, pad:pad + w].copy()
        return gx, gw, gb

    return make_result(out, "conv2d", (x, weight, bias), back)


def _interp_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    """Row o holds the half-pixel-center bilinear weights of output sample o."""
    n_out = n_in * factor
    src = (np.arange(n_out, dtype=np.float64) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    m[rows, i0] += 1.0 - frac
    m[rows, i1] += frac
    return m.astype(dtype)


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Integer-factor bilinear upsampling with align-corners=false sampling."""
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError(f"bilinear_upsample: factor must be a positive integer, got {factor!r}")
    if x.data.ndim != 4:
        raise ShapeError(f"bilinear_upsample expects NCHW, got shape {x.shape}")
    if factor == 1:
        return make_result(x.data.copy(), "upsample", (x,), lambda g: (g,))
    _, _, h, w = x.shape
    uh = _interp_matrix(h, factor, x.dtype)
    uw = _interp_matrix(w, factor, x.dtype)
    out = np.matmul(np.matmul(uh, x.data), uw.T)
    return make_result(out, "upsample", (x,), lambda g: (np.matmul(np.matmul(uh.T, g), uw),))


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2.  Ties send the gradient to the first maximum."""
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2 expects NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even spatial extents, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gw = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return make_result(out, "max_pool2", (x,), back)


# ---------------------------------------------------------------------------
# dense layers and losses
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (M, K) and weight (out, K)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: cannot apply weight {weight.shape} to input {x.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match out-features {weight.shape[0]}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data

    def back(g):
        return (
            g @ wd if x.requires_grad else None,
            g.T @ xd if weight.requires_grad else None,
            g.sum(axis=0) if bias.requires_grad else None,
        )

    return make_result(out, "linear", (x, weight, bias), back)


def _check_one_hot(target: np.ndarray) -> None:
    if not np.all((target == 0) | (target == 1)) or not np.all(target.sum(axis=1) == 1):
        bad = np.flatnonzero(target.sum(axis=1) != 1)
        row = int(bad[0]) if bad.size else -1
        raise ValueError(f"softmax_cross_entropy: target row {row} is not one-hot")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean over rows of -log softmax(logits)[true class]; ``target`` is one-hot (M, K)."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if logits.data.ndim != 2 or t.shape != logits.shape:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs target {t.shape}")
    _check_one_hot(t)
    m = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    per_row = lse - (z * t).sum(axis=1)
    loss = np.asarray(per_row.mean(), dtype=logits.dtype)
    probs = softmax(logits.data)
    t_cast = t.astype(logits.dtype)
    return make_result(loss, "softmax_ce", (logits,), lambda g: ((probs - t_cast) * (g / m),))


def smooth_l1(pred: Tensor, target) -> Tensor:
    """Per-row sum of smooth-L1 over coordinates, averaged over rows."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != t.shape or pred.data.ndim != 2:
        raise ShapeError(f"smooth_l1: prediction {pred.shape} vs target {t.shape}")
    m = pred.shape[0]
    diff = pred.data - t
    ad = np.abs(diff)
    vals = np.where(ad <= 1.0, 0.5 * diff * diff, ad - 0.5)
    loss = np.asarray(vals.sum() / m, dtype=pred.dtype)
    slope = np.clip(diff, -1.0, 1.0)
    inputs = (pred, target) if isinstance(target, Tensor) else (pred,)

    def back(g):
        gp = slope * (g / m)
        return (gp, -gp) if len(inputs) == 2 else (gp,)

    return make_result(loss, "smooth_l1", inputs, back)


# ---------------------------------------------------------------------------
# region feature sampling
# ---------------------------------------------------------------------------

def roi_align(
    features: Sequence[Tensor],
    strides: Sequence[int],
    boxes: np.ndarray,
    levels: np.ndarray,
    output_size: int = 7,
    batch_index: int = 0,
) -> Tensor:
    """Bilinear-sample an ``output_size`` grid per box from its assigned map.

    ``levels[r]`` indexes into ``features``/``strides``.  Each bin takes one
    sample at its center; sample positions are clamped to the map.  Returns
    shape (R, C, output_size, output_size).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    levels = np.asarray(levels, dtype=np.int64).reshape(-1)
    r = boxes.shape[0]
    chans = {f.shape[1] for f in features}
    if len(chans) != 1:
        raise ShapeError(f"roi_align: feature maps disagree on channels: {sorted(chans)}")
    c = chans.pop()
    s = output_size
    dtype = features[0].dtype
    out = np.zeros((r, c, s, s), dtype=dtype)
    plans = []
    grid = (np.arange(s, dtype=np.float64) + 0.5) / s
    for lvl in np.unique(levels):
        rows = np.flatnonzero(levels == lvl)
        fmap = features[lvl].data[batch_index]
        _, h, w = fmap.shape
        b = boxes[rows]
        stride = float(strides[lvl])
        xs = (b[:, 0:1] + grid[None, :] * (b[:, 2:3] - b[:, 0:1])) / stride - 0.5
        ys = (b[:, 1:2] + grid[None, :] * (b[:, 3:4] - b[:, 1:2])) / stride - 0.5
        xs = np.clip(xs, 0.0, w - 1)
        ys = np.clip(ys, 0.0, h - 1)
        x0 = np.floor(xs).astype(np.int64)
        y0 = np.floor(ys).astype(np.int64)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        lx = (xs - x0).astype(dtype)
        ly = (ys - y0).astype(dtype)
        hx, hy = 1 - lx, 1 - ly
        # (R, s, s) index grids and weights for the four corners
        corners = (
            (y0[:, :, None], x0[:, None, :], hy[:, :, None] * hx[:, None, :]),
            (y0[:, :, None], x1[:, None, :], hy[:, :, None] * lx[:, None, :]),
            (y1[:, :, None], x0[:, None, :], ly[:, :, None] * hx[:, None, :]),
            (y1[:, :, None], x1[:, None, :], ly[:, :, None] * lx[:, None, :]),
        )
        acc = np.zeros((c, len(rows), s, s), dtype=dtype)
        for yy, xx, wt in corners:
            acc += fmap[:, yy, xx] * wt[None]
        out[rows] = acc.transpose(1, 0, 2, 3)
        plans.append((int(lvl), rows, corners, h, w))

    def back(g):
        grads = [None] * len(features)
        for lvl, rows, corners, h, w in plans:
            f = features[lvl]
            if not f.requires_grad:
                continue
            gl = grads[lvl]
            if gl is None:
                gl = np.zeros(f.shape, dtype=g.dtype)
                grads[lvl] = gl
            gr = g[rows].transpose(1, 0, 2, 3)  # (C, R, s, s)
            flat = gl[batch_index].reshape(c, h * w)
            for yy, xx, wt in corners:
                idx = np.broadcast_to(yy * w + xx, wt.shape).reshape(-1)
                vals = (gr * wt[None]).reshape(c, -1)
                np.add.at(flat, (slice(None), idx), vals)
            gl[batch_index] = flat.reshape(c, h, w)
        return tuple(grads)

    return make_result(out, "roi_align", tuple(features), back)


__all__ = [
    "Parameter",
    "add",
    "bilinear_upsample",
    "concat",
    "concat_channels",
    "conv2d",
    "linear",
    "max_pool2",
    "mul",
    "permute",
    "relu",
    "reshape",
    "roi_align",
    "smooth_l1",
    "softmax",
    "softmax_cross_entropy",
    "sum_all",
    "take_rows",
]
