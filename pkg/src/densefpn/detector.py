"""End-to-end detector: backbone, fused pyramid, RPN and cascade head."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import geometry as geo
from . import ops
from .backbone import BackboneConfig, backbone_forward, build_backbone
from .heads import (
    CascadeConfig,
    RCNNConfig,
    RPNConfig,
    RPNOutput,
    SampledBatch,
    StageOutput,
    assign_and_sample_rcnn,
    assign_and_sample_rpn,
    build_head_params,
    generate_proposals,
    loss_terms,
    rpn_forward,
    run_stage,
    stage_head,
)
from .params import ParamSet
from .pyramid import FusionConfig, build_fpn_params, dmffpn_forward
from .tensor import ShapeError, Tensor, no_grad


@dataclass(frozen=True)
class AnchorConfig:
    base_sizes: tuple[float, ...] = geo.DEFAULT_BASE_SIZES
    ratios: tuple[float, ...] = geo.DEFAULT_RATIOS


@dataclass(frozen=True)
class InferenceConfig:
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    max_dets: int = 500


@dataclass(frozen=True)
class DetectorConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    rpn: RPNConfig = field(default_factory=RPNConfig)
    rcnn: RCNNConfig = field(default_factory=RCNNConfig)
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    test: InferenceConfig = field(default_factory=InferenceConfig)

    def __post_init__(self):
        levels = 5 if self.fusion.add_p6 else 4
        if len(self.anchors.base_sizes) != levels:
            raise ValueError(
                f"{len(self.anchors.base_sizes)} anchor base sizes for {levels} pyramid levels "
                f"(add_p6={self.fusion.add_p6})"
            )

    @property
    def strides(self) -> tuple[int, ...]:
        return geo.DEFAULT_STRIDES[: len(self.anchors.base_sizes)]


def build_detector(config: DetectorConfig, seed: int, dtype=np.float32) -> ParamSet:
    s_bb, s_fpn, s_head = np.random.SeedSequence(seed).generate_state(3)
    params = build_backbone(config.backbone, int(s_bb), dtype)
    params.merge(build_fpn_params(config.backbone.stage_channels, config.fusion, int(s_fpn), dtype))
    params.merge(build_head_params(config.fusion.out_channels, len(config.anchors.ratios),
                                   config.cascade, int(s_head), dtype))
    return params


def pyramid_levels(image: Tensor, params: ParamSet, config: DetectorConfig) -> list[Tensor]:
    feats = backbone_forward(image, params, config.backbone)
    return dmffpn_forward(feats, config.fusion, params).levels()


def anchors_for(levels, image_size, config: DetectorConfig) -> np.ndarray:
    extents = [(t.shape[2], t.shape[3]) for t in levels]
    return geo.generate_anchors(extents, image_size, config.strides, config.anchors.base_sizes,
                                config.anchors.ratios).all


@dataclass
class TrainPlan:
    """Every non-differentiable decision of one training forward pass.

    Replaying a plan makes the loss a smooth function of the parameters, which
    is what finite-difference checks need.
    """

    rpn_batch: SampledBatch
    proposals: np.ndarray
    stage_boxes: list[np.ndarray]
    stage_batches: list[SampledBatch]


@dataclass
class TrainOutput:
    loss: Tensor
    cls: Tensor
    reg: Tensor
    plan: TrainPlan


def train_forward(image: Tensor, gt_boxes: np.ndarray, gt_classes: np.ndarray, params: ParamSet,
                  config: DetectorConfig, seed: int, plan: Optional[TrainPlan] = None) -> TrainOutput:
    """Loss of one image.  Sampled boxes feed the head; ground truth joins each stage's candidates."""
    if image.shape[0] != 1:
        raise ShapeError(f"train_forward takes one image, got batch {image.shape[0]}")
    image_size = (image.shape[2], image.shape[3])
    gt_boxes = geo.as_boxes(gt_boxes)
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    seeds = np.random.SeedSequence(seed).generate_state(1 + config.cascade.num_stages)

    levels = pyramid_levels(image, params, config)
    rpn_out = rpn_forward(levels, params, len(config.anchors.ratios), len(config.strides))
    if plan is None:
        anchors = anchors_for(levels, image_size, config)
        rpn_batch = assign_and_sample_rpn(anchors, gt_boxes, int(seeds[0]), config.rpn)
        proposals, _ = generate_proposals(
            rpn_out.objectness.data, rpn_out.deltas.data, anchors, image_size,
            config.rpn.pre_nms_train, config.rpn.post_nms_train, config.rpn.nms_iou,
            config.rpn.min_size,
        )
        plan = TrainPlan(rpn_batch, proposals, [], [])
        replay = False
    else:
        replay = True

    outputs: list[StageOutput] = []
    local_batches: list[SampledBatch] = []
    candidates = plan.proposals
    for t in range(config.cascade.num_stages):
        if replay:
            boxes, batch = plan.stage_boxes[t], plan.stage_batches[t]
        else:
            pool = np.concatenate([candidates, gt_boxes], axis=0)
            batch = assign_and_sample_rcnn(pool, gt_boxes, gt_classes,
                                           config.cascade.stage_iou_thresholds[t],
                                           int(seeds[1 + t]), config.rcnn)
            boxes = pool[batch.indices]
            plan.stage_boxes.append(boxes)
            plan.stage_batches.append(batch)
        out = run_stage(levels, boxes, params, t, config.cascade, image_size)
        outputs.append(out)
        local_batches.append(batch.localized())
        candidates = out.refined
    cls, reg = loss_terms(local_batches, outputs, plan.rpn_batch, rpn_out)
    loss = ops.add(cls, ops.mul(reg, config.cascade.lam))
    return TrainOutput(loss, cls, reg, plan)


def detect(image: Tensor, params: ParamSet, config: DetectorConfig) -> list[geo.Detection]:
    """Detections for one (1, 3, H, W) image, score-sorted, at most ``test.max_dets``."""
    if image.data.ndim != 4 or image.shape[0] != 1:
        raise ShapeError(f"detect takes a (1, C, H, W) image, got shape {image.shape}")
    image_size = (image.shape[2], image.shape[3])
    with no_grad():
        levels = pyramid_levels(image, params, config)
        rpn_out: RPNOutput = rpn_forward(levels, params, len(config.anchors.ratios),
                                         len(config.strides))
        anchors = anchors_for(levels, image_size, config)
        proposals, _ = generate_proposals(
            rpn_out.objectness.data, rpn_out.deltas.data, anchors, image_size,
            config.rpn.pre_nms_test, config.rpn.post_nms_test, config.rpn.nms_iou,
            config.rpn.min_size,
        )
        if len(proposals) == 0:
            return []
        boxes = proposals
        for t in range(config.cascade.num_stages):
            boxes = run_stage(levels, boxes, params, t, config.cascade, image_size).refined
        probs = np.zeros((len(boxes), config.cascade.num_classes))
        for t in range(config.cascade.num_stages):
            logits, _ = stage_head(levels, boxes, params, t, config.cascade)
            probs += ops.softmax(logits.data.astype(np.float64))
        probs /= config.cascade.num_stages
    fg = probs[:, : geo.NUM_CLASSES]
    rows, classes = np.nonzero(fg > config.test.score_threshold)
    if len(rows) == 0:
        return []
    scores = np.clip(fg[rows, classes], 0.0, 1.0)
    keep = geo.nms_indices(boxes[rows], scores, classes, config.test.nms_iou, config.test.max_dets)
    return [
        geo.Detection(geo.Box.from_array(boxes[rows[i]]), float(scores[i]), int(classes[i]))
        for i in keep
    ]
