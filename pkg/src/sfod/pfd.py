"""Prototype-based feature distillation.

Class prototypes are the mean RoIAlign feature vector of the boxes of each
class. Global prototypes are an exponential moving average of the local
ones; the student's are pulled towards the teacher's with a per-class L2
distance. Only the current iteration's local prototype carries gradient:
the stored history is detached.
"""

from __future__ import annotations

import logging
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .roi import roi_align_batch

log = logging.getLogger(__name__)


class TransformLayer(nn.Conv2d):
    """3x3 convolution on the student's pooled feature map, initialised to identity."""

    def __init__(self, channels: int):
        super().__init__(channels, channels, 3, padding=1)
        nn.init.dirac_(self.weight)
        nn.init.zeros_(self.bias)


def class_features(fm: torch.Tensor, boxes: Sequence[torch.Tensor], classes: Sequence[torch.Tensor],
                   stride: float, tf: Optional[nn.Module] = None, out_size=(7, 7),
                   sampling_ratio: int = 2) -> dict[int, torch.Tensor]:
    """Spatially averaged RoIAlign vectors grouped by class.

    ``boxes[i]`` / ``classes[i]`` belong to image ``i`` of ``fm``. Returns
    ``{class_id: (n_c, d)}``. Degenerate boxes are skipped.
    """
    if tf is not None:
        fm = tf(fm)
    rois, labels = [], []
    for i, (b, c) in enumerate(zip(boxes, classes)):
        if b.numel() == 0:
            continue
        b = b.to(fm.dtype)
        ok = (b[:, 2] > b[:, 0]) & (b[:, 3] > b[:, 1]) & torch.isfinite(b).all(dim=1)
        if not ok.all():
            log.debug("skipping %d degenerate prototype boxes", int((~ok).sum()))
        b, c = b[ok], c[ok]
        rois.append(torch.cat((b.new_full((b.shape[0], 1), i), b), dim=1))
        labels.append(c)
    if not rois:
        return {}
    rois = torch.cat(rois)
    labels = torch.cat(labels)
    pooled = roi_align_batch(fm, rois, out_size, 1.0 / stride, sampling_ratio).mean(dim=(2, 3))
    return {int(c): pooled[labels == c] for c in torch.unique(labels).tolist()}


def local_prototype(vectors: torch.Tensor) -> torch.Tensor:
    if vectors.shape[0] == 0:
        raise ValueError("local prototype of an empty set")
    return vectors.mean(dim=0)


class PrototypeBank:
    """Per-class global prototypes.

    ``recurrence="global"`` folds each local prototype into the previous
    *global* prototype; ``"local"`` blends with the previous *local* one.
    ``current`` holds this iteration's (gradient-carrying) values until
    :meth:`detach` is called.
    """

    def __init__(self, beta: float = 0.7, recurrence: str = "global"):
        if not 0.0 < beta <= 1.0:
            raise ValueError("beta must lie in (0, 1]")
        if recurrence not in ("global", "local"):
            raise ValueError("recurrence must be 'global' or 'local'")
        self.beta = beta
        self.recurrence = recurrence
        self.prototypes: dict[int, torch.Tensor] = {}
        self.last_local: dict[int, torch.Tensor] = {}
        self.current: dict[int, torch.Tensor] = {}

    def initialized(self, class_id: int) -> bool:
        return class_id in self.prototypes

    def update(self, class_id: int, lp: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(lp).all():
            raise ValueError("local prototype is not finite")
        prev = self.prototypes.get(class_id) if self.recurrence == "global" else self.last_local.get(class_id)
        if prev is None:
            gp = lp
        else:
            gp = self.beta * lp + (1 - self.beta) * prev
            # rounding can step just outside the segment [lp, prev]; pin it back
            lo = torch.minimum(lp.detach(), prev)
            hi = torch.maximum(lp.detach(), prev)
            gp = torch.clamp(gp, lo, hi)
        self.current[class_id] = gp
        self.prototypes[class_id] = gp.detach()
        self.last_local[class_id] = lp.detach()
        return gp

    def get(self, class_id: int) -> torch.Tensor:
        return self.current.get(class_id, self.prototypes[class_id])

    def detach(self):
        self.current = {}

    def classes(self) -> list[int]:
        return sorted(self.prototypes)

    def state(self) -> dict[str, torch.Tensor]:
        out = {f"global/{c}": v for c, v in self.prototypes.items()}
        out.update({f"local/{c}": v for c, v in self.last_local.items()})
        return out

    def load_state(self, state: dict[str, torch.Tensor]):
        self.prototypes = {int(k.split("/")[1]): v for k, v in state.items() if k.startswith("global/")}
        self.last_local = {int(k.split("/")[1]): v for k, v in state.items() if k.startswith("local/")}
        self.current = {}

    def copy(self) -> "PrototypeBank":
        other = PrototypeBank(self.beta, self.recurrence)
        other.prototypes = dict(self.prototypes)
        other.last_local = dict(self.last_local)
        return other


def update_global(bank: PrototypeBank, class_id: int, lp: torch.Tensor) -> PrototypeBank:
    bank.update(class_id, lp)
    return bank


def pfd_loss(bank_teacher: PrototypeBank, bank_student: PrototypeBank) -> torch.Tensor:
    """Sum over classes known to both banks of ||GP_teacher - GP_student||_2."""
    shared = [c for c in bank_student.classes() if bank_teacher.initialized(c)]
    if not shared:
        log.debug("no shared prototype class; distillation loss is 0")
        return torch.zeros(())
    terms = [torch.linalg.vector_norm(bank_teacher.get(c).detach() - bank_student.get(c)) for c in shared]
    return torch.stack(terms).sum()


def prototype_distances(bank_teacher: PrototypeBank, bank_student: PrototypeBank) -> dict[str, float]:
    return {
        str(c): float(torch.linalg.vector_norm(bank_teacher.prototypes[c] - bank_student.prototypes[c]))
        for c in bank_student.classes() if bank_teacher.initialized(c)
    }
