import itertools
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from sfod.core import BoundingBox, Detection, LabeledSample
from sfod.evaluation import (average_precision, emit_pr_curve, evaluate, evaluate_detections, match_detections,
                             read_pr_csv)


def B(*c):
    return BoundingBox(*map(float, c))


def _img():
    return np.zeros((3, 8, 8))


def test_hand_example_perfect():
    s = LabeledSample(_img(), (B(0, 0, 10, 10), B(20, 20, 30, 30)), (1, 1))
    dets = [[Detection(B(0, 0, 10, 10), 1, 0.9), Detection(B(20, 20, 30, 30), 1, 0.8)]]
    assert evaluate_detections(dets, [s]).ap[1] == 1.0


def test_hand_example_half():
    s = LabeledSample(_img(), (B(0, 0, 10, 10),), (1,))
    dets = [[Detection(B(50, 50, 60, 60), 1, 0.9), Detection(B(0, 0, 10, 10), 1, 0.8)]]
    assert evaluate_detections(dets, [s]).ap[1] == 0.5


def test_average_precision_edge_cases():
    assert average_precision([], [], 0) is None
    assert average_precision([False], [0.3], 0) == 0.0
    assert average_precision([], [], 3) == 0.0


def test_duplicate_detection_is_false_positive():
    gts = [(B(0, 0, 10, 10), 1)]
    dets = [Detection(B(0, 0, 10, 10), 1, 0.9), Detection(B(0, 0, 10, 9), 1, 0.8)]
    assert match_detections(dets, gts) == [True, False]


def test_matching_prefers_highest_iou_unmatched():
    gts = [(B(0, 0, 10, 10), 1), (B(2, 0, 12, 10), 1)]
    dets = [Detection(B(2, 0, 12, 10), 1, 0.9), Detection(B(1, 0, 11, 10), 1, 0.8)]
    # first det takes gt 1 (IoU 1); second falls back to gt 0
    assert match_detections(dets, gts) == [True, True]
    assert match_detections([Detection(B(0, 0, 10, 10), 2, 0.9)], gts) == [False]


def _matching_oracle(dets, gts, thr):
    """Direct restatement: walk detections by score, each takes the best free gt of its class."""
    taken = set()
    out = []
    for d in dets:
        cands = [(float(np.float64(_iou(d.box, g))), j) for j, (g, c) in enumerate(gts)
                 if c == d.class_id and j not in taken]
        if cands:
            best = max(cands, key=lambda t: (t[0], -t[1]))
            if best[0] >= thr:
                taken.add(best[1])
                out.append(True)
                continue
        out.append(False)
    return out


def _iou(a, b):
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def _random_instance(rng, max_dets=8, max_gts=5):
    n_gt = int(rng.integers(0, max_gts + 1))
    n_det = int(rng.integers(0, max_dets + 1))
    gts = []
    for _ in range(n_gt):
        x, y = rng.uniform(0, 30, 2)
        w, h = rng.uniform(4, 12, 2)
        gts.append((B(x, y, x + w, y + h), int(rng.integers(1, 3))))
    dets = []
    scores = rng.permutation(rng.uniform(0.05, 1.0, n_det))  # distinct with probability one
    for k in range(n_det):
        if gts and rng.random() < 0.6:
            g, c = gts[int(rng.integers(len(gts)))]
            jitter = rng.normal(0, 1.5, 4)
            x1, y1 = g.x1 + jitter[0], g.y1 + jitter[1]
            box = B(x1, y1, max(x1 + 1, g.x2 + jitter[2]), max(y1 + 1, g.y2 + jitter[3]))
            cls = c if rng.random() < 0.85 else 3 - c
        else:
            x, y = rng.uniform(0, 30, 2)
            box = B(x, y, x + rng.uniform(3, 12), y + rng.uniform(3, 12))
            cls = int(rng.integers(1, 3))
        dets.append(Detection(box, cls, float(scores[k])))
    return dets, gts


@pytest.mark.parametrize("seed", range(10))
def test_matching_matches_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    dets, gts = _random_instance(rng)
    dets = sorted(dets, key=lambda d: -d.score)
    assert match_detections(dets, gts) == _matching_oracle(dets, gts, 0.5)


def brute_force_ap(flags, scores, num_gt):
    """Enumerate every score threshold, then integrate the max-precision-to-the-right envelope."""
    if num_gt == 0:
        return 0.0
    points = []
    for t in sorted(set(scores), reverse=True):
        kept = [f for f, s in zip(flags, scores) if s >= t]
        tp = sum(kept)
        points.append((tp / num_gt, tp / len(kept)))
    area = 0.0
    recalls = sorted({0.0} | {r for r, _ in points})
    for lo, hi in zip(recalls[:-1], recalls[1:]):
        # precision available at any recall in (lo, hi] is the best achieved at recall >= hi
        area += (hi - lo) * max(p for r, p in points if r >= hi)
    return area


def test_average_precision_matches_brute_force_oracle():
    """A7: 50 random small instances, AP within 1e-9 of the enumeration oracle."""
    rng = np.random.default_rng(7)
    checked = 0
    for _ in range(50):
        dets, gts = _random_instance(rng)
        sample = LabeledSample(_img(), tuple(g for g, _ in gts), tuple(c for _, c in gts))
        result = evaluate_detections([dets], [sample], num_classes=2)
        ordered = sorted(dets, key=lambda d: -d.score)
        flags = _matching_oracle(ordered, gts, 0.5)
        for c in (1, 2):
            fl = [f for f, d in zip(flags, ordered) if d.class_id == c]
            sc = [d.score for d in ordered if d.class_id == c]
            n = sum(1 for _, gc in gts if gc == c)
            if n == 0 and not fl:
                assert c not in result.ap
                continue
            assert abs(result.ap[c] - brute_force_ap(fl, sc, n)) <= 1e-9
            checked += 1
    assert checked > 50


def test_dataset_order_invariance():
    rng = np.random.default_rng(3)
    samples, all_dets = [], []
    for _ in range(12):
        dets, gts = _random_instance(rng)
        samples.append(LabeledSample(_img(), tuple(g for g, _ in gts), tuple(c for _, c in gts)))
        all_dets.append(dets)
    base = evaluate_detections(all_dets, samples, num_classes=2)
    for k in range(5):
        perm = np.random.default_rng(k).permutation(len(samples))
        other = evaluate_detections([all_dets[i] for i in perm], [samples[i] for i in perm], num_classes=2)
        assert other.ap == base.ap
    shuffled = [list(reversed(d)) for d in all_dets]
    assert evaluate_detections(shuffled, samples, num_classes=2).ap == base.ap


def test_evaluate_with_callable_and_errors():
    s = LabeledSample(_img(), (B(0, 0, 5, 5),), (1,))
    res = evaluate(lambda imgs: [[Detection(B(0, 0, 5, 5), 1, 0.7)] for _ in imgs], [s, s])
    assert res.map == 1.0
    d = res.to_dict()
    assert set(d) >= {"map", "per_class"} and d["per_class"] == {"1": 1.0}
    with pytest.raises(ValueError):
        evaluate(lambda imgs: [], [])
    with pytest.raises(ValueError):
        evaluate_detections([[]], [s, s])


def test_pr_curve_round_trip(tmp_path):
    s = LabeledSample(_img(), (B(0, 0, 10, 10), B(20, 20, 30, 30)), (1, 2))
    dets = [[Detection(B(0, 0, 10, 10), 1, 0.9), Detection(B(40, 40, 50, 50), 1, 0.6),
             Detection(B(20, 20, 30, 30), 2, 0.5)]]
    res = evaluate_detections(dets, [s])
    files = emit_pr_curve(res, tmp_path / "pr", {1: "vehicle", 2: "airplane"})
    assert sorted(f.name for f in files) == ["pr_class1.csv", "pr_class1.svg", "pr_class2.csv", "pr_class2.svg"]
    for c in (1, 2):
        assert read_pr_csv(tmp_path / "pr" / f"pr_class{c}.csv") == res.pr[c]
        root = ET.parse(tmp_path / "pr" / f"pr_class{c}.svg").getroot()
        assert root.tag.endswith("svg") and root.get("width") == "640"
    with pytest.raises(ValueError):
        bad = tmp_path / "bad.csv"
        bad.write_text("a,b\n1,2\n")
        read_pr_csv(bad)
