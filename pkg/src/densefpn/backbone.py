"""Toy residual feature extractor producing C2..C5 at strides 4, 8, 16 and 32."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .params import ParamSet, add_conv, make_rng
from .tensor import ShapeError, Tensor

STRIDES = (4, 8, 16, 32)


@dataclass(frozen=True)
class BackboneConfig:
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    blocks_per_stage: tuple[int, int, int, int] = (1, 1, 1, 1)
    input_channels: int = 3

    def __post_init__(self):
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ValueError("backbone needs exactly four stages")
        if min(self.stage_channels) < 1 or min(self.blocks_per_stage) < 1 or self.input_channels < 1:
            raise ValueError(f"backbone config entries must be >= 1: {self}")
        if any(a > b for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ValueError(f"stage_channels must be nondecreasing: {self.stage_channels}")


@dataclass
class BackboneFeatures:
    c2: Tensor
    c3: Tensor
    c4: Tensor
    c5: Tensor

    def levels(self) -> list[Tensor]:
        return [self.c2, self.c3, self.c4, self.c5]


def build_backbone(config: BackboneConfig, seed: int, dtype=np.float32) -> ParamSet:
    rng = make_rng(seed)
    params = ParamSet()
    add_conv(params, rng, "backbone.stem", config.stage_channels[0], config.input_channels, 3, dtype)
    cin = config.stage_channels[0]
    for s, (cout, nblocks) in enumerate(zip(config.stage_channels, config.blocks_per_stage)):
        for b in range(nblocks):
            prefix = f"backbone.c{s + 2}.block{b}"
            add_conv(params, rng, f"{prefix}.conv1", cout, cin, 3, dtype)
            add_conv(params, rng, f"{prefix}.conv2", cout, cout, 3, dtype)
            if cin != cout:
                add_conv(params, rng, f"{prefix}.proj", cout, cin, 1, dtype)
            cin = cout
    return params


def _conv(x: Tensor, params: ParamSet, name: str) -> Tensor:
    return ops.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"])


def _residual_block(x: Tensor, params: ParamSet, prefix: str) -> Tensor:
    y = ops.relu(_conv(x, params, f"{prefix}.conv1"))
    y = _conv(y, params, f"{prefix}.conv2")
    shortcut = _conv(x, params, f"{prefix}.proj") if f"{prefix}.proj.weight" in params else x
    return ops.relu(ops.add(y, shortcut))


def backbone_forward(image: Tensor, params: ParamSet, config: BackboneConfig) -> BackboneFeatures:
    if image.data.ndim != 4 or image.shape[1] != config.input_channels:
        raise ShapeError(
            f"image must be (N, {config.input_channels}, H, W), got shape {image.shape}"
        )
    _, _, h, w = image.shape
    for axis, extent in (("height", h), ("width", w)):
        if extent < 32 or extent % 32:
            raise ShapeError(f"image {axis} {extent} must be a positive multiple of 32")
    x = ops.max_pool2(image)
    x = ops.relu(_conv(x, params, "backbone.stem"))
    x = ops.max_pool2(x)
    outs = []
    for s, nblocks in enumerate(config.blocks_per_stage):
        if s > 0:
            x = ops.max_pool2(x)
        for b in range(nblocks):
            x = _residual_block(x, params, f"backbone.c{s + 2}.block{b}")
        outs.append(x)
    return BackboneFeatures(*outs)
