"""VOC-style detection evaluation: greedy matching, all-point AP, PR curve artifacts."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .core import BoundingBox, Detection, LabeledSample, iou


@dataclass
class EvalResult:
    ap: dict[int, float]
    pr: dict[int, list[tuple[float, float]]]
    counts: dict[int, dict[str, int]]
    iou_thresh: float = 0.5
    map: float = field(init=False)

    def __post_init__(self):
        self.map = float(np.mean(list(self.ap.values()))) if self.ap else 0.0

    def to_dict(self) -> dict:
        return {
            "map": self.map,
            "per_class": {str(c): v for c, v in sorted(self.ap.items())},
            "counts": {str(c): v for c, v in sorted(self.counts.items())},
            "iou_thresh": self.iou_thresh,
        }


def match_detections(dets: Sequence[Detection], gts: Sequence[tuple[BoundingBox, int]],
                     iou_thresh: float = 0.5) -> list[bool]:
    """Flag each detection TP/FP. ``dets`` must already be in descending score order.

    A detection takes the highest-IoU still-unmatched ground truth of its class
    when that IoU reaches ``iou_thresh``.
    """
    matched = [False] * len(gts)
    flags = []
    for d in dets:
        best, best_j = -1.0, -1
        for j, (g, c) in enumerate(gts):
            if matched[j] or c != d.class_id:
                continue
            o = iou(d.box, g)
            if o > best:
                best, best_j = o, j
        if best_j >= 0 and best >= iou_thresh:
            matched[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def pr_points(flags: Sequence[bool], scores: Sequence[float], num_gt: int) -> list[tuple[float, float]]:
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    tp = np.cumsum(np.asarray(flags, dtype=np.float64)[order]) if len(order) else np.zeros(0)
    fp = np.cumsum(1.0 - np.asarray(flags, dtype=np.float64)[order]) if len(order) else np.zeros(0)
    recall = tp / num_gt if num_gt > 0 else np.zeros_like(tp)
    precision = tp / np.maximum(tp + fp, 1e-12)
    return list(zip(recall.tolist(), precision.tolist()))


def average_precision(flags: Sequence[bool], scores: Sequence[float], num_gt: int) -> Optional[float]:
    """All-point interpolated AP; ``None`` when there is neither ground truth nor detection."""
    if num_gt == 0:
        return None if len(flags) == 0 else 0.0
    points = pr_points(flags, scores, num_gt)
    if not points:
        return 0.0
    rec = np.concatenate(([0.0], [r for r, _ in points], [1.0]))
    prec = np.concatenate(([0.0], [p for _, p in points], [0.0]))
    prec = np.maximum.accumulate(prec[::-1])[::-1]
    steps = np.nonzero(rec[1:] != rec[:-1])[0]
    return float(np.sum((rec[steps + 1] - rec[steps]) * prec[steps + 1]))


def _envelope(points: list[tuple[float, float]]) -> list[tuple[float, float]]:
    if not points:
        return []
    prec = np.maximum.accumulate(np.array([p for _, p in points])[::-1])[::-1]
    return [(r, float(p)) for (r, _), p in zip(points, prec)]


def evaluate_detections(all_dets: Sequence[Sequence[Detection]], samples: Sequence[LabeledSample],
                        iou_thresh: float = 0.5, num_classes: Optional[int] = None) -> EvalResult:
    if len(samples) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if len(all_dets) != len(samples):
        raise ValueError("one detection list per sample is required")
    classes = set()
    for s in samples:
        classes.update(s.classes)
    for dets in all_dets:
        classes.update(d.class_id for d in dets)
    if num_classes is not None:
        classes.update(range(1, num_classes + 1))
    records: dict[int, list] = {c: [] for c in classes}
    num_gt = {c: 0 for c in classes}
    for dets, s in zip(all_dets, samples):
        gts = list(zip(s.boxes, s.classes))
        for c in s.classes:
            num_gt[c] += 1
        ordered = sorted(dets, key=lambda d: (-d.score, d.box.x1, d.box.y1, d.box.x2, d.box.y2, d.class_id))
        for d, tp in zip(ordered, match_detections(ordered, gts, iou_thresh)):
            records[d.class_id].append((d.score, tp, d.box.as_list()))
    ap, pr, counts = {}, {}, {}
    for c in sorted(classes):
        # content-based tie-break keeps the result independent of dataset order
        recs = sorted(records[c], key=lambda r: (-r[0], not r[1], r[2]))
        flags = [r[1] for r in recs]
        scores = [r[0] for r in recs]
        value = average_precision(flags, scores, num_gt[c])
        counts[c] = {"tp": int(sum(flags)), "fp": int(len(flags) - sum(flags)), "num_gt": num_gt[c]}
        if value is None:
            continue
        ap[c] = value
        pr[c] = pr_points(flags, scores, num_gt[c])
    return EvalResult(ap=ap, pr=pr, counts=counts, iou_thresh=iou_thresh)


def evaluate(model, samples: Sequence[LabeledSample], iou_thresh: float = 0.5, batch_size: int = 8,
             num_classes: Optional[int] = None, score_thresh: float = 0.0) -> EvalResult:
    """Run ``model`` over ``samples`` and score it.

    ``model`` is a :class:`~sfod.detector.Detector` or any callable mapping a
    list of (3, H, W) images to per-image detection lists. AP ranks every
    detection, so a Detector is run with ``score_thresh`` (default 0: keep all,
    up to the per-image cap) rather than its deployment threshold.
    """
    if len(samples) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    predict_fn: Callable
    if hasattr(model, "detect"):
        from .detector import predict

        predict_fn = lambda imgs: predict(model, imgs, score_thresh=score_thresh)  # noqa: E731
        num_classes = num_classes or model.cfg.num_classes
    else:
        predict_fn = model
    all_dets = []
    for i in range(0, len(samples), batch_size):
        all_dets.extend(predict_fn([s.image for s in samples[i:i + batch_size]]))
    return evaluate_detections(all_dets, samples, iou_thresh, num_classes)


def _svg(points: list[tuple[float, float]], title: str, width: int = 640, height: int = 480) -> str:
    left, right, top, bottom = 60, 20, 40, 50
    pw, ph = width - left - right, height - top - bottom

    def xy(r, p):
        return left + r * pw, top + (1 - p) * ph

    parts = [
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for k in range(6):
        v = k / 5
        x, _ = xy(v, 0)
        _, y = xy(0, v)
        parts.append(f'<text x="{x:.1f}" y="{top + ph + 18}" text-anchor="middle" font-family="sans-serif" font-size="11">{v:.1f}</text>')
        parts.append(f'<text x="{left - 8}" y="{y + 4:.1f}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.1f}</text>')
    parts.append(f'<text x="{left + pw / 2}" y="{height - 10}" text-anchor="middle" font-family="sans-serif" font-size="13">recall</text>')
    parts.append(f'<text x="16" y="{top + ph / 2}" text-anchor="middle" font-family="sans-serif" font-size="13" '
                 f'transform="rotate(-90 16 {top + ph / 2})">precision</text>')
    if points:
        coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in (xy(r, p) for r, p in points))
        parts.append(f'<polyline points="{coords}" fill="none" stroke="#1f77b4" stroke-width="2"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_pr_curve(result: EvalResult, out_dir, class_names: Optional[dict] = None) -> list[Path]:
    """Write ``pr_class<c>.csv`` and ``pr_class<c>.svg`` for every scored class."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    written = []
    for c, points in sorted(result.pr.items()):
        csv_path = out / f"pr_class{c}.csv"
        svg_path = out / f"pr_class{c}.svg"
        try:
            with open(csv_path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["recall", "precision"])
                for r, p in points:
                    writer.writerow([repr(float(r)), repr(float(p))])
            name = (class_names or {}).get(c, f"class {c}")
            svg_path.write_text(_svg(_envelope(points), f"{name}: AP@{result.iou_thresh:g} = {result.ap[c]:.3f}"))
        except OSError as exc:
            raise OSError(f"cannot write PR curve to {csv_path.parent}: {exc}") from exc
        written += [csv_path, svg_path]
    return written


def read_pr_csv(path) -> list[tuple[float, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["recall", "precision"]:
        raise ValueError(f"{path}: unexpected header {rows[0]}")
    return [(float(r), float(p)) for r, p in rows[1:]]
