"""A miniature two-stage (Faster R-CNN shaped) detector.

Backbone: four stages of (conv3x3-BN-ReLU) x 2, each entered with stride 2,
channels (16, 32, 64, 128). The stage-1 output can be rewritten by a
``perturb_hook`` before stage 2 consumes it. Proposals come from a
single-scale anchor head on the stage-4 map (stride 16); the box head pools
7x7 RoIAlign features from the stage-3 map (stride 8).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import batched_nms, box_iou, nms as tv_nms

from .core import BoundingBox, Detection, LabeledSample
from .roi import roi_align_batch

PerturbHook = Callable[[torch.Tensor], torch.Tensor]

PIXEL_MEAN = 0.45
PIXEL_STD = 0.25


@dataclass(frozen=True)
class DetectorConfig:
    num_classes: int = 2
    channels: tuple[int, ...] = (16, 32, 64, 128)
    anchor_sizes: tuple[float, ...] = (16.0, 32.0, 56.0)
    roi_stage: int = 3
    roi_size: int = 7
    sampling_ratio: int = 2
    fc_dim: int = 256
    # proposal head
    rpn_pre_nms: int = 300
    rpn_post_nms_train: int = 64
    rpn_post_nms_test: int = 48
    rpn_nms: float = 0.7
    rpn_batch: int = 128
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    min_proposal_size: float = 2.0
    # box head sampling
    roi_batch: int = 32
    roi_pos_fraction: float = 0.5
    roi_pos_iou: float = 0.5
    roi_neg_iou: float = 0.4
    # inference
    score_thresh: float = 0.05
    nms_thresh: float = 0.5
    max_detections: int = 100

    @property
    def stride(self) -> int:
        return 2 ** len(self.channels)

    @property
    def roi_stride(self) -> int:
        return 2 ** self.roi_stage


# ---------------------------------------------------------------------------
# box coding


def encode_boxes(ref: torch.Tensor, gt: torch.Tensor, weights=(1.0, 1.0, 1.0, 1.0)) -> torch.Tensor:
    wx, wy, ww, wh = weights
    rw = ref[:, 2] - ref[:, 0]
    rh = ref[:, 3] - ref[:, 1]
    rx = ref[:, 0] + 0.5 * rw
    ry = ref[:, 1] + 0.5 * rh
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    gx = gt[:, 0] + 0.5 * gw
    gy = gt[:, 1] + 0.5 * gh
    return torch.stack(
        (wx * (gx - rx) / rw, wy * (gy - ry) / rh, ww * torch.log(gw / rw), wh * torch.log(gh / rh)), dim=1
    )


_DW_CLAMP = math.log(1000.0 / 16)


def decode_boxes(ref: torch.Tensor, deltas: torch.Tensor, weights=(1.0, 1.0, 1.0, 1.0)) -> torch.Tensor:
    wx, wy, ww, wh = weights
    rw = ref[:, 2] - ref[:, 0]
    rh = ref[:, 3] - ref[:, 1]
    rx = ref[:, 0] + 0.5 * rw
    ry = ref[:, 1] + 0.5 * rh
    dx = deltas[:, 0] / wx
    dy = deltas[:, 1] / wy
    dw = (deltas[:, 2] / ww).clamp(max=_DW_CLAMP)
    dh = (deltas[:, 3] / wh).clamp(max=_DW_CLAMP)
    cx = dx * rw + rx
    cy = dy * rh + ry
    w = torch.exp(dw) * rw
    h = torch.exp(dh) * rh
    return torch.stack((cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h), dim=1)


def clip_boxes(boxes: torch.Tensor, height: int, width: int) -> torch.Tensor:
    x = boxes[:, 0::2].clamp(0, width)
    y = boxes[:, 1::2].clamp(0, height)
    return torch.stack((x[:, 0], y[:, 0], x[:, 1], y[:, 1]), dim=1)


ROI_WEIGHTS = (10.0, 10.0, 5.0, 5.0)


def make_anchors(fm_h: int, fm_w: int, stride: int, sizes: Sequence[float], dtype=torch.float32) -> torch.Tensor:
    """(fm_h * fm_w * len(sizes), 4) square anchors, location-major."""
    cy = (torch.arange(fm_h, dtype=dtype) + 0.5) * stride
    cx = (torch.arange(fm_w, dtype=dtype) + 0.5) * stride
    yy, xx = torch.meshgrid(cy, cx, indexing="ij")
    centres = torch.stack((xx, yy), dim=-1).reshape(-1, 1, 2)
    half = torch.tensor(sizes, dtype=dtype).reshape(1, -1, 1) / 2
    boxes = torch.cat((centres - half, centres + half), dim=-1)
    return boxes.reshape(-1, 4)


# ---------------------------------------------------------------------------
# network


def _conv_bn_relu(cin: int, cout: int, stride: int) -> list[nn.Module]:
    return [nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]


class Backbone(nn.Module):
    def __init__(self, channels=(16, 32, 64, 128)):
        super().__init__()
        stages = []
        cin = 3
        for cout in channels:
            stages.append(nn.Sequential(*_conv_bn_relu(cin, cout, 2), *_conv_bn_relu(cout, cout, 1)))
            cin = cout
        self.stages = nn.ModuleList(stages)
        self.channels = tuple(channels)

    def forward(self, images: torch.Tensor, perturb_hook: Optional[PerturbHook] = None) -> list[torch.Tensor]:
        """Return the per-stage maps; index 0 is the stage-1 map *before* the hook."""
        x = (images - PIXEL_MEAN) / PIXEL_STD
        outputs = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            outputs.append(x)
            if i == 0 and perturb_hook is not None:
                x = perturb_hook(x)
                if x.shape != outputs[0].shape:
                    raise ValueError(f"perturb hook changed stage-1 shape {tuple(outputs[0].shape)} -> {tuple(x.shape)}")
        return outputs


class ProposalHead(nn.Module):
    def __init__(self, in_ch: int, num_anchors: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, in_ch, 3, padding=1)
        self.objectness = nn.Conv2d(in_ch, num_anchors, 1)
        self.deltas = nn.Conv2d(in_ch, num_anchors * 4, 1)
        for layer in (self.conv, self.objectness, self.deltas):
            nn.init.normal_(layer.weight, std=0.01)
            nn.init.zeros_(layer.bias)

    def forward(self, fm: torch.Tensor):
        n = fm.shape[0]
        h = F.relu(self.conv(fm))
        logits = self.objectness(h).permute(0, 2, 3, 1).reshape(n, -1)
        deltas = self.deltas(h).permute(0, 2, 3, 1).reshape(n, -1, 4)
        return logits, deltas


class BoxHead(nn.Module):
    def __init__(self, in_ch: int, roi_size: int, fc_dim: int, num_classes: int):
        super().__init__()
        self.fc1 = nn.Linear(in_ch * roi_size * roi_size, fc_dim)
        self.fc2 = nn.Linear(fc_dim, fc_dim)
        self.cls = nn.Linear(fc_dim, num_classes + 1)
        self.reg = nn.Linear(fc_dim, 4)
        nn.init.normal_(self.cls.weight, std=0.01)
        nn.init.normal_(self.reg.weight, std=0.001)
        nn.init.zeros_(self.cls.bias)
        nn.init.zeros_(self.reg.bias)

    def forward(self, pooled: torch.Tensor):
        x = F.relu(self.fc1(pooled.flatten(1)))
        x = F.relu(self.fc2(x))
        return self.cls(x), self.reg(x)


@dataclass
class DetectorOutput:
    proposals: list[torch.Tensor]
    objectness: list[torch.Tensor]
    detections: list[list[Detection]] = field(default_factory=list)
    roi_features: Optional[torch.Tensor] = None
    features: Optional[list[torch.Tensor]] = None


def targets_from_samples(samples: Sequence[LabeledSample], dtype=torch.float32):
    out = []
    for s in samples:
        boxes = torch.as_tensor(s.box_array(), dtype=dtype).reshape(-1, 4)
        labels = torch.as_tensor(list(s.classes), dtype=torch.long)
        out.append((boxes, labels))
    return out


def images_to_tensor(images: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.stack(images), dtype=dtype)


class Detector(nn.Module):
    def __init__(self, cfg: DetectorConfig = DetectorConfig()):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg.channels)
        self.rpn = ProposalHead(cfg.channels[-1], len(cfg.anchor_sizes))
        self.box_head = BoxHead(cfg.channels[cfg.roi_stage - 1], cfg.roi_size, cfg.fc_dim, cfg.num_classes)

    # -- helpers -------------------------------------------------------------

    def fingerprint(self) -> str:
        return architecture_fingerprint(self)

    def roi_features(self, features: list[torch.Tensor], rois: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        return roi_align_batch(features[cfg.roi_stage - 1], rois, (cfg.roi_size, cfg.roi_size),
                               1.0 / cfg.roi_stride, cfg.sampling_ratio)

    def _proposals(self, logits, deltas, anchors, image_size, training: bool):
        cfg = self.cfg
        h, w = image_size
        post = cfg.rpn_post_nms_train if training else cfg.rpn_post_nms_test
        proposals, scores = [], []
        for i in range(logits.shape[0]):
            lg = logits[i].detach()
            boxes = clip_boxes(decode_boxes(anchors, deltas[i].detach()), h, w)
            keep = ((boxes[:, 2] - boxes[:, 0]) >= cfg.min_proposal_size) & (
                (boxes[:, 3] - boxes[:, 1]) >= cfg.min_proposal_size)
            boxes, lg = boxes[keep], lg[keep]
            k = min(cfg.rpn_pre_nms, lg.numel())
            lg, idx = lg.topk(k)
            boxes = boxes[idx]
            keep = tv_nms(boxes, lg, cfg.rpn_nms)[:post]
            proposals.append(boxes[keep])
            scores.append(torch.sigmoid(lg[keep]))
        return proposals, scores

    def forward(self, images: torch.Tensor, perturb_hook: Optional[PerturbHook] = None):
        """Backbone + proposal head. Returns (features, logits, deltas, anchors, proposals, scores)."""
        features = self.backbone(images, perturb_hook)
        top = features[-1]
        logits, deltas = self.rpn(top)
        anchors = make_anchors(top.shape[2], top.shape[3], self.cfg.stride, self.cfg.anchor_sizes, dtype=top.dtype)
        proposals, scores = self._proposals(logits, deltas, anchors, images.shape[-2:], self.training)
        return features, logits, deltas, anchors, proposals, scores

    # -- training ------------------------------------------------------------

    def compute_losses(self, images: torch.Tensor, targets, perturb_hook: Optional[PerturbHook] = None,
                       generator: Optional[torch.Generator] = None, return_features: bool = False):
        """Detection loss summed over the images of the batch.

        ``targets`` is a list of ``(boxes (k, 4), labels (k,))`` per image.
        Returns ``(loss_cls, loss_reg)`` and, if requested, the backbone maps.
        ``loss_cls`` adds proposal objectness BCE to box-head cross entropy;
        ``loss_reg`` adds the two smooth-L1 regression terms.
        """
        cfg = self.cfg
        features, logits, deltas, anchors, proposals, _ = self.forward(images, perturb_hook)
        loss_cls = images.new_zeros(())
        loss_reg = images.new_zeros(())
        all_rois, all_labels, all_reg_targets = [], [], []
        for i, (gt_boxes, gt_labels) in enumerate(targets):
            gt_boxes = gt_boxes.to(images.dtype)
            # proposal head
            obj_labels, obj_targets = assign_anchors(anchors, gt_boxes, cfg, generator)
            lc, lr = proposal_losses(logits[i], deltas[i], obj_labels, obj_targets)
            loss_cls = loss_cls + lc
            loss_reg = loss_reg + lr
            # box head sampling
            rois = proposals[i]
            if gt_boxes.numel():
                rois = torch.cat((rois, gt_boxes), dim=0)
            labels, reg_t, keep = sample_rois(rois, gt_boxes, gt_labels, cfg, generator)
            rois = rois[keep]
            all_rois.append(torch.cat((rois.new_full((rois.shape[0], 1), i), rois), dim=1))
            all_labels.append(labels)
            all_reg_targets.append(reg_t)
        rois = torch.cat(all_rois)
        pooled = self.roi_features(features, rois)
        cls_logits, reg_out = self.box_head(pooled)
        start = 0
        for labels, reg_t in zip(all_labels, all_reg_targets):
            n = labels.numel()
            if n == 0:
                continue
            lc, lr = box_head_losses(cls_logits[start:start + n], reg_out[start:start + n], labels, reg_t)
            loss_cls = loss_cls + lc
            loss_reg = loss_reg + lr
            start += n
        if return_features:
            return loss_cls, loss_reg, features
        return loss_cls, loss_reg

    # -- inference -----------------------------------------------------------

    @torch.no_grad()
    def detect(self, images: torch.Tensor, score_thresh: Optional[float] = None,
               nms_thresh: Optional[float] = None, return_features: bool = False) -> DetectorOutput:
        cfg = self.cfg
        score_thresh = cfg.score_thresh if score_thresh is None else score_thresh
        nms_thresh = cfg.nms_thresh if nms_thresh is None else nms_thresh
        was_training = self.training
        self.eval()
        try:
            features, _, _, _, proposals, obj_scores = self.forward(images)
            rois = torch.cat([torch.cat((p.new_full((p.shape[0], 1), i), p), dim=1) for i, p in enumerate(proposals)])
            pooled = self.roi_features(features, rois)
            cls_logits, reg_out = self.box_head(pooled)
        finally:
            self.train(was_training)
        probs = F.softmax(cls_logits, dim=1)
        h, w = images.shape[-2:]
        detections = []
        start = 0
        for i, props in enumerate(proposals):
            n = props.shape[0]
            p = probs[start:start + n]
            boxes = clip_boxes(decode_boxes(props, reg_out[start:start + n], ROI_WEIGHTS), h, w) if n else props
            start += n
            detections.append(postprocess(boxes, p, score_thresh, nms_thresh, cfg.max_detections))
        return DetectorOutput(proposals=proposals, objectness=obj_scores, detections=detections,
                              roi_features=pooled, features=features if return_features else None)


def postprocess(boxes: torch.Tensor, probs: torch.Tensor, score_thresh: float, nms_thresh: float,
                max_dets: int) -> list[Detection]:
    """Per-class thresholding (strictly above ``score_thresh``) and NMS."""
    if boxes.shape[0] == 0:
        return []
    num_cls = probs.shape[1] - 1
    scores = probs[:, 1:].reshape(-1)
    labels = torch.arange(1, num_cls + 1).repeat(boxes.shape[0])
    cand = boxes[:, None, :].expand(-1, num_cls, 4).reshape(-1, 4)
    keep = scores > score_thresh
    keep &= (cand[:, 2] - cand[:, 0] > 1e-3) & (cand[:, 3] - cand[:, 1] > 1e-3)
    cand, scores, labels = cand[keep], scores[keep], labels[keep]
    if scores.numel() == 0:
        return []
    keep = batched_nms(cand.float(), scores.float(), labels, nms_thresh)[:max_dets]
    out = []
    for k in keep.tolist():
        x1, y1, x2, y2 = (float(v) for v in cand[k])
        out.append(Detection(BoundingBox(x1, y1, x2, y2), int(labels[k]), min(max(float(scores[k]), 0.0), 1.0)))
    out.sort(key=lambda d: -d.score)
    return out


def _subsample(mask: torch.Tensor, count: int, generator) -> torch.Tensor:
    idx = torch.nonzero(mask).flatten()
    if idx.numel() > count:
        perm = torch.randperm(idx.numel(), generator=generator)[:count]
        idx = idx[perm]
    return idx


def assign_anchors(anchors: torch.Tensor, gt_boxes: torch.Tensor, cfg: DetectorConfig, generator=None):
    """Label anchors 1 / 0 / -1 (ignored) and compute their regression targets."""
    labels = torch.full((anchors.shape[0],), -1, dtype=torch.long)
    targets = torch.zeros_like(anchors)
    if gt_boxes.numel() == 0:
        cand = torch.ones(anchors.shape[0], dtype=torch.bool)
        neg = _subsample(cand, cfg.rpn_batch, generator)
        labels[neg] = 0
        return labels, targets
    ious = box_iou(anchors, gt_boxes)
    best, best_gt = ious.max(dim=1)
    pos_mask = best >= cfg.rpn_pos_iou
    # every gt gets its best anchor(s)
    gt_best = ious.max(dim=0).values
    pos_mask |= ((ious == gt_best[None, :]) & (gt_best[None, :] > 0)).any(dim=1)
    neg_mask = (best < cfg.rpn_neg_iou) & ~pos_mask
    n_pos = int(cfg.rpn_batch * 0.5)
    pos = _subsample(pos_mask, n_pos, generator)
    neg = _subsample(neg_mask, cfg.rpn_batch - pos.numel(), generator)
    labels[pos] = 1
    labels[neg] = 0
    targets[pos] = encode_boxes(anchors[pos], gt_boxes[best_gt[pos]])
    return labels, targets


def sample_rois(rois: torch.Tensor, gt_boxes: torch.Tensor, gt_labels: torch.Tensor, cfg: DetectorConfig,
                generator=None):
    """Pick up to ``roi_batch`` ROIs; returns (labels, regression targets, kept indices)."""
    if gt_boxes.numel() == 0:
        keep = _subsample(torch.ones(rois.shape[0], dtype=torch.bool), cfg.roi_batch, generator)
        return torch.zeros(keep.numel(), dtype=torch.long), rois.new_zeros((keep.numel(), 4)), keep
    ious = box_iou(rois, gt_boxes)
    best, best_gt = ious.max(dim=1)
    pos_mask = best >= cfg.roi_pos_iou
    neg_mask = best < cfg.roi_neg_iou
    pos = _subsample(pos_mask, int(cfg.roi_batch * cfg.roi_pos_fraction), generator)
    neg = _subsample(neg_mask, cfg.roi_batch - pos.numel(), generator)
    keep = torch.cat((pos, neg))
    labels = torch.cat((gt_labels[best_gt[pos]], torch.zeros(neg.numel(), dtype=torch.long)))
    reg_t = rois.new_zeros((keep.numel(), 4))
    if pos.numel():
        reg_t[: pos.numel()] = encode_boxes(rois[pos], gt_boxes[best_gt[pos]], ROI_WEIGHTS)
    return labels, reg_t, keep


def proposal_losses(logits: torch.Tensor, deltas: torch.Tensor, labels: torch.Tensor, targets: torch.Tensor):
    """Objectness BCE over sampled anchors (label >= 0) and smooth-L1 (beta 1/9) over positives."""
    sampled = labels >= 0
    if not sampled.any():
        return logits.new_zeros(()), logits.new_zeros(())
    loss_cls = F.binary_cross_entropy_with_logits(logits[sampled], labels[sampled].to(logits.dtype))
    pos = labels == 1
    if not pos.any():
        return loss_cls, logits.new_zeros(())
    loss_reg = F.smooth_l1_loss(deltas[pos], targets[pos], beta=1.0 / 9, reduction="sum") / sampled.sum()
    return loss_cls, loss_reg


def box_head_losses(cls_logits: torch.Tensor, reg_out: torch.Tensor, labels: torch.Tensor,
                    reg_targets: torch.Tensor):
    """Cross entropy over all sampled ROIs and smooth-L1 over the positive ones."""
    loss_cls = F.cross_entropy(cls_logits, labels)
    pos = labels > 0
    if not pos.any():
        return loss_cls, cls_logits.new_zeros(())
    loss_reg = F.smooth_l1_loss(reg_out[pos], reg_targets[pos], beta=1.0, reduction="sum") / labels.numel()
    return loss_cls, loss_reg


def detection_loss(model: Detector, samples: Sequence[LabeledSample], perturb_hook=None, generator=None):
    dtype = next(model.parameters()).dtype
    images = images_to_tensor([s.image for s in samples], dtype)
    return model.compute_losses(images, targets_from_samples(samples, dtype), perturb_hook, generator)


def predict(model: Detector, images, score_thresh: Optional[float] = None,
            nms_thresh: Optional[float] = None) -> list[list[Detection]]:
    """Post-NMS detections per image, scores descending. ``images`` is a tensor or a list of arrays."""
    if not isinstance(images, torch.Tensor):
        images = images_to_tensor(list(images), next(model.parameters()).dtype)
    return model.detect(images, score_thresh, nms_thresh).detections


def freeze_batchnorm(model: nn.Module) -> nn.Module:
    """Keep normalization layers on their stored statistics while the rest trains."""
    for m in model.modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm):
            m.eval()
    return model


def architecture_fingerprint(model: nn.Module) -> str:
    spec = [(name, list(t.shape)) for name, t in model.state_dict().items() if t.is_floating_point()]
    return hashlib.sha256(json.dumps(spec).encode()).hexdigest()[:16]
