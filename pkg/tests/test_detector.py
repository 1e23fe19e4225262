import itertools
import math

import numpy as np
import pytest

from dnp.dense import FeatureGrid
from dnp.detector import (
    Cascade,
    CascadeStage,
    Detection,
    SplitTable,
    TrainingImage,
    TrainParams,
    WeakClassifier,
    detect,
    fit_stump,
    iou,
    iou_matrix,
    load_cascade,
    nms,
    nms_indices,
    propose_grid,
    save_cascade,
    score_rows,
    score_window,
    score_windows,
    train_cascade,
)
from dnp.regionlets import Rect, RegionletConfig, RegionletEvaluator, region_feature, sample_configurations


def test_iou_examples():
    assert iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1
    assert iou((0, 0, 10, 10), (10, 0, 20, 10)) == 0
    assert iou((0, 0, 10, 10), (5, 0, 15, 10)) == pytest.approx(1 / 3)
    m = iou_matrix([[0, 0, 10, 10]], [[0, 0, 10, 10], [5, 0, 15, 10], [20, 20, 30, 30]])
    np.testing.assert_allclose(m, [[1, 1 / 3, 0]])


def reference_nms(boxes, scores, thr):
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        if all(iou(boxes[i], boxes[k]) <= thr for k in keep):
            keep.append(i)
    return keep


def test_nms_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(500):
        n = int(rng.integers(0, 9))
        xy = rng.integers(0, 30, size=(n, 2))
        wh = rng.integers(1, 20, size=(n, 2))
        boxes = np.concatenate([xy, xy + wh], axis=1).astype(float)
        # few distinct scores so ties occur
        scores = rng.integers(0, 4, size=n).astype(float)
        thr = float(rng.choice([0.0, 0.3, 0.5, 0.7]))
        assert nms_indices(boxes, scores, thr) == reference_nms(boxes.tolist(), scores.tolist(), thr)


def test_nms_examples():
    a = Detection((0, 0, 10, 10), 0.9)
    b = Detection((1, 0, 11, 10), 0.8)
    c = Detection((50, 50, 60, 60), 0.7)
    assert nms([b, c, a], 0.5) == [a, c]
    assert nms([], 0.5) == []
    assert nms([a, b], 0.9) == [a, b]


def test_propose_grid_counts():
    boxes = propose_grid(100, 80, [40], [1.0], stride=20)
    assert len(boxes) == 4 * 3
    assert boxes[:, 2].max() <= 100 and boxes[:, 3].max() <= 80
    assert propose_grid(100, 80, [400]).tolist() == [[0, 0, 100, 80]]
    two = propose_grid(64, 64, [32], [0.5, 2.0], stride=8)
    w = two[:, 2] - two[:, 0]
    assert set(w.tolist()) == {round(32 * math.sqrt(0.5)), round(32 * math.sqrt(2))}
    assert propose_grid(10, 10, []).shape == (0, 4)


def _flat_grid(rows=6, cols=6, dim=2, seed=0):
    data = np.random.default_rng(seed).random((rows, cols, dim)).astype(np.float32)
    return FeatureGrid(0, 0, 10, data)


def test_hand_two_weak_cascade():
    grid = FeatureGrid(0, 0, 10, np.zeros((4, 4, 1), np.float32))
    grid.data[:2, :2, 0] = 3.0  # top-left block
    full = Rect(0, 0, 1, 1)
    pool = [
        RegionletConfig("f", 0, full, (Rect(0, 0, 0.5, 0.5),)),
        RegionletConfig("f", 0, full, (Rect(0.5, 0.5, 1, 1),)),
    ]
    cascade = Cascade(
        pool, [CascadeStage([WeakClassifier(0, 0.5, -1.0, 2.0), WeakClassifier(1, 0.5, 0.25, -3.0)])]
    )
    # window covers the 4x4 grid; config 0 sees ones (L0 of a 1-dim vector), config 1 sees zeros
    assert score_window(cascade, {"f": grid}, (0, 0, 40, 40)).score == pytest.approx(2.25)
    assert score_window(cascade, {"f": grid}, (20, 20, 60, 60)).score == pytest.approx(-0.75)
    with pytest.raises(KeyError):
        score_window(cascade, {"g": grid}, (0, 0, 40, 40))


def _random_cascade(rng, pool, n_stages=3, weaks=4):
    stages = []
    for _ in range(n_stages):
        ws = [
            WeakClassifier(int(rng.integers(len(pool))), float(rng.random() * 0.3), *rng.normal(size=2))
            for _ in range(weaks)
        ]
        stages.append(CascadeStage(ws, float(rng.normal(-0.5, 0.5))))
    return Cascade(pool, stages)


def test_early_exit_equals_full_scoring():
    rng = np.random.default_rng(1)
    grids = {"f": _flat_grid(dim=4)}
    pool = sample_configurations(0, 30, {"f": 4})
    windows = propose_grid(60, 60, [20, 30], stride=5).astype(float)
    x = RegionletEvaluator(grids).evaluate(windows, pool)
    for _ in range(20):
        cascade = _random_cascade(rng, pool)
        scores, rejected = score_windows(cascade, grids, windows)
        for i in range(len(windows)):
            partial = 0.0
            stop = -1
            for s, stage in enumerate(cascade.stages):
                partial += sum(w(x[i, w.config]) for w in stage.weaks)
                if partial < stage.reject_threshold:
                    stop = s
                    break
            assert rejected[i] == stop
            assert scores[i] == pytest.approx(partial, abs=1e-9)
        done = rejected < 0
        np.testing.assert_allclose(scores[done], score_rows(cascade, x)[done], atol=1e-9)


def test_reject_thresholds_are_monotone_filters():
    """Lowering any stage threshold never rejects more windows."""
    rng = np.random.default_rng(2)
    grids = {"f": _flat_grid(dim=4)}
    pool = sample_configurations(1, 20, {"f": 4})
    windows = propose_grid(60, 60, [20], stride=5).astype(float)
    cascade = _random_cascade(rng, pool)
    _, before = score_windows(cascade, grids, windows)
    cascade.stages[1].reject_threshold -= 1.0
    _, after = score_windows(cascade, grids, windows)
    assert np.all((before < 0) <= (after < 0))


def test_detect_filters_and_sorts():
    grid = FeatureGrid(0, 0, 10, np.zeros((6, 6, 1), np.float32))
    grid.data[1:3, 1:3, 0] = 1.0
    pool = [RegionletConfig("f", 0, Rect(0, 0, 1, 1), (Rect(0, 0, 1, 1),))]
    cascade = Cascade(pool, [CascadeStage([WeakClassifier(0, 0.5, -1.0, 1.0)], 0.0)])
    proposals = propose_grid(60, 60, [20], stride=10)
    dets = detect({"f": grid}, proposals, cascade, nms_iou=0.3)
    assert dets and all(d.score >= 0 for d in dets)
    assert [d.score for d in dets] == sorted((d.score for d in dets), reverse=True)
    for a, b in itertools.combinations(dets, 2):
        assert iou(a.box, b.box) <= 0.3
    assert detect({"f": grid}, np.zeros((0, 4)), cascade) == []


def brute_stump(x, y, w):
    best = None
    for c in range(x.shape[1]):
        vals = np.unique(x[:, c])
        for t in (vals[1:] + vals[:-1]) / 2:
            left = x[:, c] < t
            a = (w[left] * y[left]).sum() / w[left].sum()
            b = (w[~left] * y[~left]).sum() / w[~left].sum()
            err = (w * (y - np.where(left, a, b)) ** 2).sum()
            if best is None or err < best[0] - 1e-12:
                best = (err, c, t, a, b)
    return best


def test_fit_stump_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n, m = int(rng.integers(2, 30)), int(rng.integers(1, 5))
        x = rng.integers(0, 6, size=(n, m)).astype(float)
        y = rng.choice([-1.0, 1.0], size=n)
        w = rng.random(n) + 0.01
        s = fit_stump(x, y, w)
        ref = brute_stump(x, y, w)
        if ref is None:
            assert s is None
            continue
        assert s.error == pytest.approx(ref[0], abs=1e-9)
        assert (s.feature, s.threshold) == (ref[1], ref[2])
        assert (s.left, s.right) == (pytest.approx(ref[3]), pytest.approx(ref[4]))


def test_constant_columns_cannot_split():
    assert fit_stump(np.ones((5, 2)), np.array([1, -1, 1, -1, 1.0]), np.ones(5)) is None


def test_binned_table_equals_exact_when_bins_suffice():
    rng = np.random.default_rng(4)
    x = rng.integers(0, 10, size=(200, 6)).astype(float)
    y = rng.choice([-1.0, 1.0], size=200)
    w = rng.random(200)
    exact = fit_stump(x, y, w, SplitTable(x))
    binned = fit_stump(x, y, w, SplitTable(x, max_bins=16))
    assert exact == binned
    coarse = SplitTable(x, max_bins=4)
    assert coarse.thresholds.shape == (6, 3)
    exact_t = SplitTable(x).thresholds
    for c in range(6):
        assert set(coarse.thresholds[c][np.isfinite(coarse.thresholds[c])]) <= set(exact_t[c])
    with pytest.raises(ValueError):
        SplitTable(x, max_bins=1)


def _toy_images(n, seed, size=96):
    """Grids with a bright square object on a noisy background."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        cells = size // 8
        data = (rng.random((cells, cells, 2)) * 0.3).astype(np.float32)
        side = int(rng.integers(4, 7))
        u, v = (int(t) for t in rng.integers(0, cells - side, size=2))
        data[v : v + side, u : u + side, 0] += 1.0
        grid = FeatureGrid(4, 4, 8, data)
        gt = np.array([[u * 8, v * 8, (u + side) * 8, (v + side) * 8]], float)
        props = propose_grid(size, size, [32, 40, 48, 56], stride=4)
        out.append(TrainingImage(f"im{i}", {"f": grid}, gt, props))
    return out


def test_training_separates_toy_objects():
    train = _toy_images(20, 0)
    pool = sample_configurations(0, 150, {"f": 2})
    params = TrainParams(n_stages=2, weaks_per_stage=8, neg_per_image=20, neg_candidates_per_image=100)
    cascade, history = train_cascade(train, pool, params)
    assert len(cascade.stages) == 2 and len(cascade.weaks) == 16
    for img in _toy_images(10, 1):
        scores, rejected = score_windows(cascade, img.grids, img.proposals)
        scores = np.where(rejected < 0, scores, -np.inf)
        overlap = iou_matrix(img.proposals, img.gt_boxes)[:, 0]
        # windows labelled negative in training rank below the best positive window
        assert scores[overlap >= 0.6].max() > scores[overlap < 0.3].max()
        dets = detect(img.grids, img.proposals, cascade)
        assert iou(dets[0].box, img.gt_boxes[0]) >= 0.3
    for stage in range(2):
        rec = [r for r in history if r.stage == stage]
        losses = [r.exp_loss for r in rec]
        assert all(b < a for a, b in zip(losses, losses[1:]))
        assert all(r.stump_error < r.constant_error for r in rec)


def test_training_is_deterministic():
    imgs = _toy_images(6, 2)
    pool = sample_configurations(0, 40, {"f": 2})
    params = TrainParams(n_stages=2, weaks_per_stage=3, neg_per_image=10, neg_candidates_per_image=40)
    a, _ = train_cascade(imgs, pool, params)
    b, _ = train_cascade(imgs, pool, params)
    assert a.stages == b.stages


def test_training_errors():
    imgs = _toy_images(2, 3)
    with pytest.raises(ValueError):
        train_cascade(imgs, [])
    no_gt = [TrainingImage("a", imgs[0].grids, np.zeros((0, 4)), imgs[0].proposals)]
    with pytest.raises(ValueError):
        train_cascade(no_gt, sample_configurations(0, 5, {"f": 2}))


def test_cascade_file_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    pool = sample_configurations(3, 25, {"f": 4, "g": 2})
    cascade = _random_cascade(rng, pool)
    cascade.normalizer = "l1"
    cascade.metadata["seed"] = "3"
    p = tmp_path / "c.cascade"
    save_cascade(cascade, p)
    back = load_cascade(p)
    assert back.pool == pool and back.stages == cascade.stages
    assert back.normalizer == "l1" and back.metadata == {"seed": "3"}
    grids = {"f": _flat_grid(dim=4), "g": _flat_grid(dim=2, seed=1)}
    w = (3.0, 7.5, 41.0, 50.0)
    assert score_window(back, grids, w) == score_window(cascade, grids, w)


def test_cascade_file_errors(tmp_path):
    p = tmp_path / "c.cascade"
    p.write_text("XXXX 1\n")
    with pytest.raises(ValueError):
        load_cascade(p)
    pool = sample_configurations(3, 2, {"f": 1})
    save_cascade(Cascade(pool, [CascadeStage([WeakClassifier(1, 0, 0, 0)])]), p)
    p.write_text(p.read_text().replace("weak 1", "weak 7"))
    with pytest.raises(ValueError, match="missing configuration"):
        load_cascade(p)
    p.write_text(p.read_text() + "bogus 1\n")
    with pytest.raises(ValueError):
        load_cascade(p)


def test_region_feature_agrees_with_cascade_scoring():
    grids = {"f": _flat_grid(dim=3)}
    pool = sample_configurations(7, 10, {"f": 3})
    cascade = Cascade(pool, [CascadeStage([WeakClassifier(j, 0.3, -1.0, 1.0) for j in range(10)])])
    w = (5.0, 5.0, 45.0, 40.0)
    expect = sum(1.0 if region_feature(grids, w, c) >= 0.3 else -1.0 for c in pool)
    assert score_window(cascade, grids, w).score == pytest.approx(expect)


def test_spec_scoring_examples():
    grids = {"f": _flat_grid(dim=2)}
    assert score_window(Cascade([]), grids, (0, 0, 30, 30)) == score_window(Cascade([]), {}, (0, 0, 30, 30))
    assert score_window(Cascade([]), grids, (0, 0, 30, 30)).accepted
    pool = sample_configurations(0, 5, {"f": 2})
    harsh = Cascade(pool, [CascadeStage([WeakClassifier(0, 0.5, -100.0, -100.0)], -math.inf)])
    windows = propose_grid(60, 60, [20], stride=10)
    assert (score_windows(harsh, grids, windows)[1] < 0).all()


def test_spec_detect_examples():
    grids = {"f": _flat_grid(dim=2)}
    pool = sample_configurations(0, 5, {"f": 2})
    always = Cascade(pool, [CascadeStage([WeakClassifier(0, 0.5, 1.0, 1.0)])])
    assert [d.box for d in detect(grids, np.array([[5, 5, 30, 30]]), always)] == [(5, 5, 30, 30)]
    assert len(detect(grids, np.array([[5, 5, 30, 30]] * 3), always)) == 1


def test_spec_nms_examples():
    disjoint = [Detection((i * 20, 0, i * 20 + 10, 10), 1.0 - i / 10) for i in range(5)]
    assert nms(disjoint, 0.5) == disjoint
    hi, lo = Detection((0, 0, 10, 10), 0.9), Detection((0, 0, 10, 10), 0.1)
    assert nms([lo, hi], 0.5) == [hi]
    # 10-wide boxes shifted by 10/3 overlap their neighbour at IoU 0.5
    chain = [Detection((i * 10 / 3, 0, i * 10 / 3 + 10, 10), 1.0 - i / 100) for i in range(6)]
    assert iou(chain[0].box, chain[1].box) == pytest.approx(0.5)
    assert nms(chain, 0.4) == chain[::2]


def test_spec_propose_grid_examples():
    assert propose_grid(640, 480, [640], stride=16).tolist() == [[0, 0, 640, 480]]
    assert len(propose_grid(50, 40, [20, 30], stride=100)) == 2
    scales, ratios = [64, 128], [0.5, 2.0]
    expect = 0
    for s in scales:
        for a in ratios:
            w, h = round(s * math.sqrt(a)), round(s / math.sqrt(a))
            expect += ((640 - w) // 32 + 1) * ((480 - h) // 32 + 1)
    assert len(propose_grid(640, 480, scales, ratios, stride=32)) == expect


def test_separable_one_dimension_one_weak():
    from dnp.detector import _boost_stage

    x = np.array([[0.1], [0.2], [0.4], [0.6], [0.9]])
    y = np.array([-1.0, -1, -1, 1, 1])
    stage, records, f = _boost_stage(x, y, np.zeros(5), 1, 0)
    assert len(stage.weaks) == 1 and records[0].train_error == 0
    assert np.array_equal(np.sign(f), y)
    assert stage.weaks[0].threshold == pytest.approx(0.5)


def test_identical_labels_rejected():
    imgs = _toy_images(2, 4)
    # every proposal overlaps the ground truth, so no negatives exist
    only_pos = [TrainingImage("a", imgs[0].grids, imgs[0].gt_boxes, imgs[0].gt_boxes.copy())]
    with pytest.raises(ValueError, match="negative"):
        train_cascade(only_pos, sample_configurations(0, 5, {"f": 2}))
