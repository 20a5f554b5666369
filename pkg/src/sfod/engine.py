"""Source pretraining and source-free teacher-student adaptation.

One adaptation iteration:

1. weak (flip) and strong (photometric) views of N target images;
2. teacher pseudo-labels on the weak views, kept at score >= tau;
3. mixed-sample loss: the two batch halves are pixel-mixed and supervised
   with the union of their pseudo-labels;
4. style-perturbation loss: the student sees the strong views with the AFSP
   hook after stage 1 and is supervised by the same pseudo-labels;
5. prototype distillation between teacher and student class prototypes;
6. one SGD step on ``L_mixup + L_afsp + gamma * L_pro``; the AFSP predictor
   receives the reversed gradient in the same backward pass.

The teacher follows the student by EMA once per ``ema_period`` iterations and
is the model that gets returned.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .afsp import AFSP
from .checkpoint import (CheckpointMismatch, load_checkpoint, module_tensors, restore_module,
                         save_checkpoint)
from .core import Detection, LabeledSample, flip_horizontal
from .detector import (Detector, DetectorConfig, architecture_fingerprint, freeze_batchnorm,
                       images_to_tensor, targets_from_samples)
from .evaluation import evaluate
from .msp import make_pair, mix_samples
from .pfd import PrototypeBank, TransformLayer, class_features, local_prototype, pfd_loss, prototype_distances

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: Optional[dict] = None):
        super().__init__(message)
        self.last_good = last_good


def _from_section(cls, section: dict, seed: int):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in section.items() if k in names}, seed=seed)


@dataclass
class PretrainConfig:
    epochs: int = 7
    batch_size: int = 2
    lr: float = 1e-3
    lr_after: float = 1e-4
    decay_epoch: int = 5
    momentum: float = 0.9
    weight_decay: float = 5e-4
    flip: bool = True
    seed: int = 0

    @classmethod
    def from_run_config(cls, rc) -> "PretrainConfig":
        return _from_section(cls, rc.section("pretrain"), rc["seed"])

    def lr_at(self, epoch: int) -> float:
        return self.lr if epoch < self.decay_epoch else self.lr_after


@dataclass
class AdaptConfig:
    tau: float = 0.7
    eta: float = 0.9
    ema_period: int = 0
    gamma: float = 0.5
    lam: float = 0.5
    alpha: float = 0.5
    alpha_warmup: float = 0.1
    beta: float = 0.7
    batch_size: int = 2
    epochs: int = 7
    max_iter: int = -1
    lr: float = 1e-3
    lr_after: float = 1e-4
    decay_epoch: int = 5
    momentum: float = 0.9
    weight_decay: float = 5e-4
    pfd_recurrence: str = "global"
    msp: bool = True
    afsp: bool = True
    pfd: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("tau", "eta", "gamma", "lam", "beta"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be even (the batch is split into two halves)")

    @classmethod
    def from_run_config(cls, rc) -> "AdaptConfig":
        return _from_section(cls, rc.section("engine"), rc["seed"])

    def lr_at(self, epoch: int) -> float:
        return self.lr if epoch < self.decay_epoch else self.lr_after


def _sgd(params, lr, momentum, weight_decay):
    return torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)


def _set_lr(optimizer, lr: float):
    for group in optimizer.param_groups:
        group["lr"] = lr


def _finite(x: torch.Tensor) -> bool:
    return bool(torch.isfinite(x).all())


def _write_lines(path, lines):
    if path is None:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for line in lines:
            fh.write(json.dumps(line) + "\n")


# ---------------------------------------------------------------------------
# checkpoints


def save_detector(path, model: Detector, metadata: Optional[dict] = None, extra: Optional[dict] = None):
    tensors = module_tensors(model, "detector")
    tensors.update(extra or {})
    meta = {"detector_config": asdict(model.cfg), **(metadata or {})}
    return save_checkpoint(path, tensors, model.fingerprint(), meta)


def load_detector(path, expected_fingerprint: Optional[str] = None) -> tuple[Detector, dict]:
    tensors, fingerprint, meta = load_checkpoint(path)
    dcfg = meta.get("detector_config", {})
    dcfg = {k: tuple(v) if isinstance(v, list) else v for k, v in dcfg.items()}
    try:
        model = Detector(DetectorConfig(**dcfg))
    except TypeError as exc:
        raise CheckpointMismatch(f"{path}: unknown detector configuration ({exc})") from exc
    if fingerprint != model.fingerprint():
        raise CheckpointMismatch(f"{path}: fingerprint {fingerprint} does not match architecture {model.fingerprint()}")
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise CheckpointMismatch(f"{path}: fingerprint {fingerprint} != expected {expected_fingerprint}")
    restore_module(model, tensors, "detector")
    return model, meta


# ---------------------------------------------------------------------------
# pretraining


def pretrain(samples: Sequence[LabeledSample], cfg: PretrainConfig = PretrainConfig(),
             detector_cfg: DetectorConfig = DetectorConfig(), metrics_path=None,
             model: Optional[Detector] = None):
    """Supervised source training. Returns ``(model, metrics_lines)``.

    Raises :class:`TrainingDiverged` (carrying the last finite state dict) on a
    non-finite loss.
    """
    if not samples:
        raise ValueError("pretraining needs at least one labeled sample")
    torch.manual_seed(cfg.seed)
    if model is None:
        model = Detector(detector_cfg)
    model.train()
    rng = np.random.default_rng([cfg.seed, 1])
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = _sgd(model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    metrics = []
    it = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        _set_lr(opt, lr)
        order = rng.permutation(len(samples))
        for start in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[start:start + cfg.batch_size]]
            if cfg.flip:
                batch = [flip_horizontal(s) if rng.random() < 0.5 else s for s in batch]
            images = images_to_tensor([s.image for s in batch])
            last_good = copy.deepcopy(model.state_dict())
            loss_cls, loss_reg = model.compute_losses(images, targets_from_samples(batch), generator=gen)
            total = loss_cls + loss_reg
            if not _finite(total):
                _write_lines(metrics_path, metrics)
                raise TrainingDiverged(f"non-finite pretraining loss at iteration {it}", last_good)
            opt.zero_grad()
            total.backward()
            opt.step()
            metrics.append({"iter": it, "epoch": epoch, "lr": lr, "loss_cls": loss_cls.item(),
                            "loss_reg": loss_reg.item(), "loss_total": total.item()})
            it += 1
    _write_lines(metrics_path, metrics)
    return model, metrics


# ---------------------------------------------------------------------------
# adaptation primitives


def threshold_detections(dets: Sequence[Detection], tau: float):
    """Hard pseudo-labels: detections with score >= tau, and the sample weight."""
    kept = [d for d in dets if d.score >= tau]
    return kept, (1 if kept else 0)


def pseudo_label(teacher: Detector, images_weak: torch.Tensor, tau: float, return_features: bool = False):
    """Teacher predictions on weak views gated by ``tau``; returns ``[(dets, omega)]`` per image."""
    out = teacher.detect(images_weak, return_features=return_features)
    labels = [threshold_detections(d, tau) for d in out.detections]
    if return_features:
        return labels, out.features
    return labels


@torch.no_grad()
def ema_update(teacher: torch.nn.Module, student: torch.nn.Module, eta: float):
    """teacher = eta * teacher + (1 - eta) * student, elementwise, kept inside the segment."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    if architecture_fingerprint(teacher) != architecture_fingerprint(student):
        raise CheckpointMismatch("teacher and student architectures differ")
    s_state = student.state_dict()
    for name, t in teacher.state_dict().items():
        if not t.is_floating_point():
            continue
        s = s_state[name]
        blended = t * eta + s * (1.0 - eta)
        t.copy_(torch.minimum(torch.maximum(blended, torch.minimum(t, s)), torch.maximum(t, s)))
    return teacher


def _boxes_classes(dets: Sequence[Detection], dtype=torch.float32):
    if not dets:
        return torch.zeros((0, 4), dtype=dtype), torch.zeros((0,), dtype=torch.long)
    return (torch.tensor([d.box.as_list() for d in dets], dtype=dtype),
            torch.tensor([d.class_id for d in dets], dtype=torch.long))


class Adapter:
    """Mutable training state: student (+AFSP, transform layer), teacher, prototype banks, optimizer."""

    def __init__(self, source: Detector, cfg: AdaptConfig = AdaptConfig(), total_iters: Optional[int] = None):
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.student = copy.deepcopy(source)
        self.teacher = copy.deepcopy(source)
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        dcfg = source.cfg
        self.afsp = AFSP(dcfg.channels[0], alpha=0.0 if cfg.alpha_warmup > 0 else cfg.alpha)
        self.transform = TransformLayer(dcfg.channels[dcfg.roi_stage - 1])
        self.bank_teacher = PrototypeBank(cfg.beta, cfg.pfd_recurrence)
        self.bank_student = PrototypeBank(cfg.beta, cfg.pfd_recurrence)
        params = list(self.student.parameters()) + list(self.transform.parameters())
        params += list(self.afsp.parameters())
        self.optimizer = _sgd(params, cfg.lr, cfg.momentum, cfg.weight_decay)
        self.iteration = 0
        self.total_iters = total_iters
        self.rng = np.random.default_rng([cfg.seed, 2])
        self.generator = torch.Generator().manual_seed(cfg.seed + 1)
        self.skipped = 0
        self.last_records: list = []

    # -- helpers -------------------------------------------------------------

    def trainable_modules(self) -> dict[str, torch.nn.Module]:
        return {"student": self.student, "afsp": self.afsp, "transform": self.transform}

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for prefix, module in self.trainable_modules().items():
            for name, t in module.state_dict().items():
                h.update(f"{prefix}.{name}".encode())
                h.update(t.detach().cpu().numpy().tobytes())
        for name, t in self.teacher.state_dict().items():
            h.update(f"teacher.{name}".encode())
            h.update(t.cpu().numpy().tobytes())
        for group in self.optimizer.state.values():
            for v in group.values():
                if isinstance(v, torch.Tensor):
                    h.update(v.cpu().numpy().tobytes())
        for bank in (self.bank_teacher, self.bank_student):
            for k, v in sorted(bank.state().items()):
                h.update(k.encode())
                h.update(v.cpu().numpy().tobytes())
        return h.hexdigest()

    def current_alpha(self) -> float:
        cfg = self.cfg
        if cfg.alpha_warmup <= 0 or not self.total_iters:
            return cfg.alpha
        ramp = cfg.alpha_warmup * self.total_iters
        return cfg.alpha * min(1.0, self.iteration / ramp) if ramp > 0 else cfg.alpha

    def _train_mode(self):
        self.student.train()
        freeze_batchnorm(self.student)
        self.afsp.train()
        self.transform.train()
        self.teacher.eval()

    # -- one iteration -------------------------------------------------------

    def step(self, images: Sequence[np.ndarray]) -> dict:
        """Run one adaptation iteration on ``len(images)`` (even) target images."""
        cfg = self.cfg
        n = len(images)
        if n < 2 or n % 2:
            raise ValueError("adaptation batches must hold an even number of images")
        self._train_mode()
        self.afsp.alpha = self.current_alpha()
        pairs = [make_pair(LabeledSample(image=img), self.rng) for img in images]
        self.last_records = [p.record for p in pairs]
        weak = images_to_tensor([p.weak.image for p in pairs])
        labels, tea_feats = pseudo_label(self.teacher, weak, cfg.tau, return_features=True)
        report: dict = {}
        if not any(omega for _, omega in labels):
            self.iteration += 1
            self.skipped += 1
            report["skipped"] = True
            return report

        total = torch.zeros(())
        if cfg.msp:
            half = n // 2
            mixed = []
            for i in range(half):
                a, b = i, i + half
                s_a = LabeledSample(pairs[a].strong.image, tuple(d.box for d in labels[a][0]),
                                    tuple(d.class_id for d in labels[a][0]))
                s_b = LabeledSample(pairs[b].strong.image, tuple(d.box for d in labels[b][0]),
                                    tuple(d.class_id for d in labels[b][0]))
                m = mix_samples(s_a, s_b, cfg.lam)
                if m.boxes:
                    mixed.append(m)
            if mixed:
                lc, lr = self.student.compute_losses(images_to_tensor([m.image for m in mixed]),
                                                     targets_from_samples(mixed), generator=self.generator)
                loss_mixup = lc + lr
            else:
                loss_mixup = torch.zeros(())
            report["loss_mixup"] = loss_mixup
            total = total + loss_mixup

        active = [i for i, (_, omega) in enumerate(labels) if omega]
        strong = images_to_tensor([pairs[i].strong.image for i in active])
        targets = [_boxes_classes(labels[i][0]) for i in active]
        hook = self.afsp if cfg.afsp else None
        lc, lr, stu_feats = self.student.compute_losses(strong, targets, perturb_hook=hook,
                                                        generator=self.generator, return_features=True)
        key = "loss_afsp" if cfg.afsp else "loss_pl"
        report[key] = lc + lr
        total = total + report[key]

        if cfg.pfd:
            stage = self.student.cfg.roi_stage - 1
            stride = self.student.cfg.roi_stride
            boxes = [t[0] for t in targets]
            classes = [t[1] for t in targets]
            feats_t = class_features(tea_feats[stage][active], boxes, classes, stride)
            feats_s = class_features(stu_feats[stage], boxes, classes, stride, tf=self.transform)
            for c in sorted(feats_t):
                self.bank_teacher.update(c, local_prototype(feats_t[c]))
                self.bank_student.update(c, local_prototype(feats_s[c]))
            loss_pro = pfd_loss(self.bank_teacher, self.bank_student)
            report["loss_pro"] = loss_pro
            total = total + cfg.gamma * loss_pro

        if not _finite(total):
            raise TrainingDiverged(f"non-finite adaptation loss at iteration {self.iteration}")
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        self.bank_teacher.detach()
        self.bank_student.detach()
        report["loss_total"] = total
        self.iteration += 1
        report["skipped"] = False
        return {k: (float(v.detach()) if isinstance(v, torch.Tensor) else v) for k, v in report.items()}

    def update_teacher(self):
        ema_update(self.teacher, self.student, self.cfg.eta)

    # -- persistence ---------------------------------------------------------

    def checkpoint_tensors(self) -> dict[str, torch.Tensor]:
        tensors = module_tensors(self.student, "student")
        tensors.update(module_tensors(self.afsp, "afsp"))
        tensors.update(module_tensors(self.transform, "transform"))
        for name, bank in (("proto_teacher", self.bank_teacher), ("proto_student", self.bank_student)):
            tensors.update({f"{name}/{k}": v for k, v in bank.state().items()})
        return tensors


def adapt_step(state: Adapter, images: Sequence[np.ndarray]) -> dict:
    return state.step(images)


@dataclass
class AdaptResult:
    teacher: Detector
    adapter: Adapter
    metrics: list


def adapt(target_images: Sequence[np.ndarray], source: Detector, cfg: AdaptConfig = AdaptConfig(),
          monitor: Optional[Sequence[LabeledSample]] = None, metrics_path=None,
          afsp_recorder: Optional[list] = None) -> AdaptResult:
    """Source-free adaptation of ``source`` on unlabeled ``target_images``.

    ``monitor`` (labeled target samples) is only evaluated at epoch ends for
    the metrics log; it never feeds training. Returns the teacher as the
    adapted model.
    """
    n = len(target_images)
    per_epoch = n // cfg.batch_size
    if per_epoch == 0:
        raise ValueError(f"need at least {cfg.batch_size} target images, got {n}")
    total = per_epoch * cfg.epochs if cfg.max_iter < 0 else min(cfg.max_iter, per_epoch * cfg.epochs)
    state = Adapter(source, cfg, total_iters=total)
    state.afsp.recorder = afsp_recorder
    period = cfg.ema_period if cfg.ema_period > 0 else per_epoch
    metrics = []
    done = False
    for epoch in range(cfg.epochs):
        if state.iteration >= total:
            break
        lr = cfg.lr_at(epoch)
        _set_lr(state.optimizer, lr)
        order = state.rng.permutation(n)
        for b in range(per_epoch):
            if state.iteration >= total:
                done = True
                break
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            it = state.iteration
            report = state.step([target_images[i] for i in idx])
            line = {"iter": it, "epoch": epoch, "lr": lr, "alpha": state.afsp.alpha,
                    "loss_mixup": report.get("loss_mixup"), "loss_afsp": report.get("loss_afsp"),
                    "loss_pl": report.get("loss_pl"), "loss_pro": report.get("loss_pro"),
                    "loss_total": report.get("loss_total"), "skipped": report["skipped"],
                    "augment": state.last_records, "ema_update": False,
                    "map_monitor": None, "prototype_distances": None}
            if state.iteration % period == 0:
                state.update_teacher()
                line["ema_update"] = True
            if b == per_epoch - 1 or state.iteration >= total:
                line["prototype_distances"] = prototype_distances(state.bank_teacher, state.bank_student)
                if monitor:
                    line["map_monitor"] = evaluate(state.teacher, monitor).map
            metrics.append(line)
            log.debug("iter %d %s", it, report)
        if done:
            break
    _write_lines(metrics_path, metrics)
    return AdaptResult(teacher=state.teacher, adapter=state, metrics=metrics)


def save_adapted(path, result: AdaptResult, metadata: Optional[dict] = None):
    meta = {"kind": "adapted", "iteration": result.adapter.iteration, **(metadata or {})}
    return save_detector(path, result.teacher, meta, extra=result.adapter.checkpoint_tensors())
