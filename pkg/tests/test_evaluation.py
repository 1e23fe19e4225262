import numpy as np
import pytest

from dnp.detector import iou
from dnp.evaluation import GroundTruth, ScoredBox, average_precision, match_detections, mean_average_precision


def gt(image_id, boxes, difficult=None, labels=None):
    return GroundTruth(image_id, 100, 100, list(boxes), labels or [], difficult or [])


def test_perfect_and_empty():
    g = [gt("a", [(0, 0, 10, 10)]), gt("b", [(20, 20, 40, 40)])]
    dets = [ScoredBox("a", (0, 0, 10, 10), 0.9), ScoredBox("b", (20, 20, 40, 40), 0.8)]
    assert average_precision(dets, g) == 1.0
    assert average_precision([], g) == 0.0
    assert average_precision(dets, [gt("a", [])]) == 0.0


def test_hand_example():
    g = [gt("a", [(0, 0, 10, 10), (50, 50, 60, 60)])]
    dets = [
        ScoredBox("a", (0, 0, 10, 10), 0.9),  # TP
        ScoredBox("a", (0, 0, 10, 10), 0.8),  # duplicate -> FP
        ScoredBox("a", (50, 50, 60, 60), 0.7),  # TP
    ]
    # precision 1 at recall 0.5, envelope 2/3 at recall 1
    assert average_precision(dets, g) == pytest.approx(0.5 + 0.5 * 2 / 3)
    # 11-point: six levels at 1, five at 2/3
    assert average_precision(dets, g, mode="11pt") == pytest.approx((6 + 5 * 2 / 3) / 11)
    with pytest.raises(ValueError):
        average_precision(dets, g, mode="bogus")


def test_difficult_boxes_are_ignored():
    g = [gt("a", [(0, 0, 10, 10), (50, 50, 60, 60)], difficult=[False, True])]
    dets = [ScoredBox("a", (50, 50, 60, 60), 0.9), ScoredBox("a", (0, 0, 10, 10), 0.5)]
    tp, fp, npos = match_detections(dets, {"a": g[0]})
    assert npos == 1 and tp.tolist() == [0, 1] and fp.tolist() == [0, 0]
    assert average_precision(dets, g) == 1.0


def test_iou_threshold_and_labels():
    g = [gt("a", [(0, 0, 10, 10), (50, 50, 60, 60)], labels=["cat", "dog"])]
    dets = [ScoredBox("a", (0, 0, 10, 12), 0.9, "cat"), ScoredBox("a", (50, 50, 60, 60), 0.8, "cat")]
    assert average_precision(dets, g, 0.5, label="cat") == 1.0
    assert average_precision(dets, g, 0.9, label="cat") == 0.0
    assert average_precision(dets, g, label="dog") == 0.0
    res = mean_average_precision(dets, g)
    assert res == {"cat": 1.0, "dog": 0.0, "mAP": 0.5}


def test_gt_box_validation():
    with pytest.raises(ValueError):
        GroundTruth("a", 10, 10, [(0, 0, 11, 5)])
    rec = gt("a", [(1, 2, 3, 4)], difficult=[True]).to_json()
    back = GroundTruth.from_json(rec)
    assert back.boxes == [(1, 2, 3, 4)] and back.difficult == [True]


def reference_ap(dets, gts, thr):
    """Plain-loop greedy matching and the all-point envelope integral."""
    ranked = sorted(dets, key=lambda d: -d.score)
    claimed = {k: [False] * len(g.boxes) for k, g in gts.items()}
    npos = sum(not d for g in gts.values() for d in g.difficult)
    flags = []
    for d in ranked:
        g = gts[d.image_id]
        best, j = 0.0, -1
        for k, b in enumerate(g.boxes):
            o = iou(d.box, b)
            if o > best:
                best, j = o, k
        if j >= 0 and best >= thr:
            if g.difficult[j]:
                continue
            if not claimed[d.image_id][j]:
                claimed[d.image_id][j] = True
                flags.append(1)
            else:
                flags.append(0)
        else:
            flags.append(0)
    if npos == 0:
        return 0.0
    points = []
    tp = 0
    for n, f in enumerate(flags, start=1):
        tp += f
        points.append((tp / npos, tp / n))
    ap, prev = 0.0, 0.0
    for r, _ in points:
        if r > prev:
            ap += (r - prev) * max(p for rr, p in points if rr >= r)
            prev = r
    return ap


def test_ap_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        gts = {}
        for i in range(int(rng.integers(1, 4))):
            n = int(rng.integers(0, 4))
            xy = rng.integers(0, 60, size=(n, 2))
            wh = rng.integers(5, 30, size=(n, 2))
            boxes = [tuple(map(float, np.r_[p, p + s])) for p, s in zip(xy, wh)]
            gts[f"i{i}"] = gt(f"i{i}", boxes, difficult=[bool(rng.random() < 0.2) for _ in boxes])
        dets = []
        for _ in range(int(rng.integers(0, 12))):
            key = f"i{int(rng.integers(len(gts)))}"
            g = gts[key]
            if g.boxes and rng.random() < 0.6:
                b = np.array(g.boxes[int(rng.integers(len(g.boxes)))]) + rng.integers(-4, 5, size=4)
            else:
                p = rng.integers(0, 60, size=2)
                b = np.r_[p, p + rng.integers(5, 30, size=2)]
            l, t, r, bb = (float(v) for v in b)
            if r <= l or bb <= t:
                continue
            # distinct scores keep the ranking unambiguous
            dets.append(ScoredBox(key, (l, t, r, bb), float(rng.random())))
        thr = float(rng.choice([0.3, 0.5, 0.7]))
        assert average_precision(dets, gts, thr) == pytest.approx(reference_ap(dets, gts, thr), abs=1e-9)


def test_correct_detection_ranked_second():
    g = [gt("a", [(0, 0, 10, 10)])]
    dets = [ScoredBox("a", (50, 50, 60, 60), 0.9), ScoredBox("a", (0, 0, 10, 10), 0.5)]
    assert average_precision(dets, g) == pytest.approx(0.5)
