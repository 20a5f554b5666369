"""Image-level perturbation: weak/strong views and mixed-sample perturbation."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .core import BoundingBox, Detection, LabeledSample, flip_horizontal
from .detector import detection_loss

STRONG_OPS = ("autocontrast", "brightness", "color", "contrast", "grayscale", "gaussblur")
FACTOR_RANGE = (0.6, 1.4)
BLUR_RANGE = (0.1, 1.0)
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class AugmentedPair:
    weak: LabeledSample
    strong: LabeledSample
    record: dict = field(default_factory=dict)


def weak_augment(sample: LabeledSample, rng: np.random.Generator, p: float = 0.5):
    """Random horizontal flip. Returns ``(sample, flipped)``; one draw from ``rng`` per call."""
    flipped = bool(rng.random() < p)
    return (flip_horizontal(sample) if flipped else sample), flipped


def _luma(img: np.ndarray) -> np.ndarray:
    return np.tensordot(_LUMA, img, axes=1)


def apply_op(img: np.ndarray, op: str, value: float | None = None) -> np.ndarray:
    if op == "autocontrast":
        lo = img.min(axis=(1, 2), keepdims=True)
        hi = img.max(axis=(1, 2), keepdims=True)
        span = hi - lo
        out = np.where(span > 1e-6, (img - lo) / np.where(span > 1e-6, span, 1.0), img)
    elif op == "brightness":
        out = img * value
    elif op == "color":
        grey = _luma(img)[None]
        out = grey + value * (img - grey)
    elif op == "contrast":
        mean = _luma(img).mean()
        out = mean + value * (img - mean)
    elif op == "grayscale":
        out = np.repeat(_luma(img)[None], 3, axis=0)
    elif op == "gaussblur":
        out = ndimage.gaussian_filter(img, sigma=(0, value, value))
    else:
        raise ValueError(f"unknown augmentation {op!r}")
    return np.clip(out, 0.0, 1.0)


def strong_augment(sample: LabeledSample, rng: np.random.Generator, ops: Sequence[str] = STRONG_OPS,
                   p: float = 0.5):
    """Photometric-only augmentation; each op in ``ops`` fires independently with probability ``p``.

    Returns ``(sample, record)`` where ``record`` lists ``[op, parameter]``.
    Boxes are untouched.
    """
    img = sample.image
    record = []
    for op in STRONG_OPS:
        # draws are made for every op so the stream does not depend on ``ops``
        fire = rng.random() < p
        if op in ("brightness", "color", "contrast"):
            value = float(rng.uniform(*FACTOR_RANGE))
        elif op == "gaussblur":
            value = float(rng.uniform(*BLUR_RANGE))
        else:
            value = None
        if fire and op in ops:
            img = apply_op(img, op, value)
            record.append([op, value])
    return sample.with_image(img), record


def make_pair(sample: LabeledSample, rng: np.random.Generator, flip_p: float = 0.5,
              strong_ops: Sequence[str] = STRONG_OPS) -> AugmentedPair:
    """Weak view (flip) and a strong view derived from it, so both share geometry."""
    weak, flipped = weak_augment(sample, rng, flip_p)
    strong, ops = strong_augment(weak, rng, strong_ops)
    return AugmentedPair(weak, strong, {"flip": flipped, "strong": ops})


def _mix_weights(lam: float) -> tuple[float, float]:
    # derive the smaller weight from the larger by an exact subtraction so that
    # mix(a, b, lam) and mix(b, a, 1 - lam) use bit-identical weights
    if lam >= 0.5:
        return lam, 1.0 - lam
    wb = 1.0 - lam
    return 1.0 - wb, wb


def mix_images(x_i: np.ndarray, x_j: np.ndarray, lam: float = 0.5) -> np.ndarray:
    if x_i.shape != x_j.shape:
        raise ValueError(f"cannot mix images of shapes {x_i.shape} and {x_j.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("mixing coefficient must lie in [0, 1]")
    wa, wb = _mix_weights(lam)
    return wa * x_i + wb * x_j


def mix_labels(pl_i: Sequence[Detection], pl_j: Sequence[Detection]):
    """Union of two pseudo-label sets as hard labels: ``(boxes, classes)``, no deduplication."""
    dets = list(pl_i) + list(pl_j)
    return tuple(d.box for d in dets), tuple(d.class_id for d in dets)


def _rescale(sample: LabeledSample, height: int, width: int) -> LabeledSample:
    if (sample.height, sample.width) == (height, width):
        return sample
    t = torch.from_numpy(np.ascontiguousarray(sample.image))[None]
    img = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False)[0].numpy()
    sx, sy = width / sample.width, height / sample.height
    boxes = tuple(BoundingBox(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy) for b in sample.boxes)
    return replace(sample, image=np.clip(img, 0, 1), boxes=boxes)


def mix_samples(s_i: LabeledSample, s_j: LabeledSample, lam: float = 0.5) -> LabeledSample:
    """Mix two (pseudo-)labeled samples; ``s_j`` is resized to ``s_i``'s shape first."""
    s_j = _rescale(s_j, s_i.height, s_i.width)
    image = mix_images(s_i.image, s_j.image, lam)
    boxes = s_i.boxes + s_j.boxes
    classes = s_i.classes + s_j.classes
    return LabeledSample(image=image, boxes=boxes, classes=classes, weight=1.0 if boxes else 0.0)


def msp_loss(student, mixed: Sequence[LabeledSample], generator=None):
    """Detection loss of the student on mixed samples; samples without labels contribute 0."""
    labeled = [s for s in mixed if s.boxes]
    if not labeled:
        return torch.zeros(())
    loss_cls, loss_reg = detection_loss(student, labeled, generator=generator)
    return loss_cls + loss_reg

