"""FPN top-down pyramid and the dense multiscale fusion into P2/P3.

The baseline pyramid is the usual lateral 1x1 + upsample-and-add top-down
path, each merged map smoothed by a 3x3 conv.  Dense fusion then rebuilds P3
and/or P2: every higher backbone map C_j gets its own 1x1 reduction, is
upsampled to the target level, and is combined with P_i (channel concat or
elementwise sum) before a final 3x3 conv back to ``out_channels``.  P4 and P5
are never touched by the dense path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from . import ops
from .backbone import BackboneFeatures
from .params import ParamSet, add_conv, make_rng
from .tensor import ShapeError, Tensor

FusionMode = Literal["concat", "add"]


@dataclass(frozen=True)
class FusionConfig:
    dense_to_p2: bool = True
    dense_to_p3: bool = True
    fusion_mode: FusionMode = "concat"
    out_channels: int = 256
    add_p6: bool = True

    def __post_init__(self):
        if self.out_channels < 1:
            raise ValueError(f"out_channels must be >= 1, got {self.out_channels}")
        if self.fusion_mode not in ("concat", "add"):
            raise ValueError(f"fusion_mode must be 'concat' or 'add', got {self.fusion_mode!r}")

    def dense_levels(self) -> list[int]:
        levels = []
        if self.dense_to_p3:
            levels.append(3)
        if self.dense_to_p2:
            levels.append(2)
        return levels


# The four ablation rows: P3 only, P2 only, both (concat), both (add).
ABLATION_CONFIGS = {
    "concat_p3": dict(dense_to_p2=False, dense_to_p3=True, fusion_mode="concat"),
    "concat_p2": dict(dense_to_p2=True, dense_to_p3=False, fusion_mode="concat"),
    "concat_p2_p3": dict(dense_to_p2=True, dense_to_p3=True, fusion_mode="concat"),
    "add_p2_p3": dict(dense_to_p2=True, dense_to_p3=True, fusion_mode="add"),
}


@dataclass
class PyramidFeatures:
    p2: Tensor
    p3: Tensor
    p4: Tensor
    p5: Tensor
    p6: Optional[Tensor] = None

    def levels(self) -> list[Tensor]:
        out = [self.p2, self.p3, self.p4, self.p5]
        if self.p6 is not None:
            out.append(self.p6)
        return out

    @property
    def strides(self) -> list[int]:
        return [4, 8, 16, 32, 64][: len(self.levels())]


def fusion_input_channels(level: int, config: FusionConfig) -> int:
    """Input width of the 3x3 fusion conv for P2 or P3 (laterals from C_{i+1}..C5 plus P_i)."""
    n_terms = (5 - level) + 1
    return n_terms * config.out_channels if config.fusion_mode == "concat" else config.out_channels


def build_fpn_params(backbone_channels, config: FusionConfig, seed: int, dtype=np.float32) -> ParamSet:
    """Lateral/output convs of the baseline pyramid plus the dense fusion convs enabled by ``config``."""
    rng = make_rng(seed)
    params = ParamSet()
    out = config.out_channels
    chans = dict(zip((2, 3, 4, 5), backbone_channels))
    for k in (5, 4, 3, 2):
        add_conv(params, rng, f"fpn.lateral.c{k}", out, chans[k], 1, dtype, gain=1.0)
        add_conv(params, rng, f"fpn.output.p{k}", out, out, 3, dtype, gain=1.0)
    for i in (3, 2):
        if i not in config.dense_levels():
            continue
        for j in range(i + 1, 6):
            add_conv(params, rng, f"dense.p{i}.from_c{j}", out, chans[j], 1, dtype, gain=1.0)
        add_conv(params, rng, f"dense.p{i}.fuse", out, fusion_input_channels(i, config), 3, dtype,
                 gain=1.0)
    return params


def fpn_param_count(backbone_channels, config: FusionConfig) -> int:
    """Closed-form parameter count of :func:`build_fpn_params`."""
    out = config.out_channels
    chans = dict(zip((2, 3, 4, 5), backbone_channels))
    total = sum(chans[k] * out + out + 9 * out * out + out for k in (2, 3, 4, 5))
    for i in config.dense_levels():
        total += sum(chans[j] * out + out for j in range(i + 1, 6))
        total += 9 * fusion_input_channels(i, config) * out + out
    return total


def _conv(x: Tensor, params: ParamSet, name: str) -> Tensor:
    w = params[f"{name}.weight"]
    if w.shape[1] != x.shape[1]:
        raise ShapeError(
            f"{name}: weight expects {w.shape[1]} input channels but feature has {x.shape[1]}"
        )
    return ops.conv2d(x, w, params[f"{name}.bias"])


def _top_down(feats: BackboneFeatures, params: ParamSet) -> dict[int, Tensor]:
    """P2..P5 of the baseline pyramid (3x3-smoothed)."""
    c = dict(zip((2, 3, 4, 5), feats.levels()))
    merged = _conv(c[5], params, "fpn.lateral.c5")
    out = {5: _conv(merged, params, "fpn.output.p5")}
    for k in (4, 3, 2):
        lateral = _conv(c[k], params, f"fpn.lateral.c{k}")
        merged = ops.add(lateral, ops.bilinear_upsample(merged, 2))
        out[k] = _conv(merged, params, f"fpn.output.p{k}")
    return out


def make_p6(p5_star: Tensor) -> Tensor:
    """Extra coarsest level: stride-2 max pool of P5*."""
    return ops.max_pool2(p5_star)


def fpn_baseline(feats: BackboneFeatures, params: ParamSet, add_p6: bool = False) -> PyramidFeatures:
    p = _top_down(feats, params)
    return PyramidFeatures(p[2], p[3], p[4], p[5], make_p6(p[5]) if add_p6 else None)


def dmffpn_forward(feats: BackboneFeatures, config: FusionConfig, params: ParamSet) -> PyramidFeatures:
    p = _top_down(feats, params)
    c = dict(zip((2, 3, 4, 5), feats.levels()))
    fused = dict(p)
    for i in config.dense_levels():
        fuse_w = params.get(f"dense.p{i}.fuse.weight")
        if fuse_w is None:
            raise KeyError(f"parameter set has no dense fusion conv for P{i}")
        expected = fusion_input_channels(i, config)
        if fuse_w.shape[1] != expected:
            raise ShapeError(
                f"dense.p{i}.fuse takes {fuse_w.shape[1]} input channels but "
                f"{config.fusion_mode} fusion produces {expected}"
            )
        terms = [
            ops.bilinear_upsample(_conv(c[j], params, f"dense.p{i}.from_c{j}"), 2 ** (j - i))
            for j in range(i + 1, 6)
        ]
        terms.append(p[i])
        if config.fusion_mode == "concat":
            merged = ops.concat_channels(terms)
        else:
            merged = terms[0]
            for t in terms[1:]:
                merged = ops.add(merged, t)
        fused[i] = _conv(merged, params, f"dense.p{i}.fuse")
    p6 = make_p6(fused[5]) if config.add_p6 else None
    return PyramidFeatures(fused[2], fused[3], fused[4], fused[5], p6)
