"""Boosted cascade over regionlet features, proposals and non-maximum suppression."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numba
import numpy as np

from .dense import FeatureGrid
from .regionlets import RegionletConfig, RegionletEvaluator, load_configs, save_configs

log = logging.getLogger(__name__)

CASCADE_MAGIC = "DNPC"
CASCADE_VERSION = 1


@dataclass(frozen=True)
class WeakClassifier:
    config: int  # index into the cascade's configuration pool
    threshold: float
    left: float
    right: float

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.where(x < self.threshold, self.left, self.right)


@dataclass
class CascadeStage:
    weaks: list[WeakClassifier]
    reject_threshold: float = -math.inf


@dataclass
class Cascade:
    pool: list[RegionletConfig]
    stages: list[CascadeStage] = field(default_factory=list)
    normalizer: str = "l0"
    metadata: dict[str, str] = field(default_factory=dict)

    @property
    def weaks(self) -> list[WeakClassifier]:
        return [w for s in self.stages for w in s.weaks]

    @property
    def families(self) -> set[str]:
        return {self.pool[w.config].family for w in self.weaks}


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    score: float
    label: str = "object"


# --------------------------------------------------------------------------- #
# boxes


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1), 0.0)


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy suppression; returns kept indices by descending score (stable on ties)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = list(np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable"))
    keep = []
    overlaps = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= overlaps[i] > iou_threshold
    return keep


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    if not dets:
        return []
    keep = nms_indices([d.box for d in dets], [d.score for d in dets], iou_threshold)
    return [dets[i] for i in keep]


def propose_grid(
    width: int,
    height: int,
    scales: Sequence[float],
    ratios: Sequence[float] = (1.0,),
    stride: int = 16,
) -> np.ndarray:
    """Sliding windows of side ``scale*sqrt(ratio)`` by ``scale/sqrt(ratio)``.

    Windows larger than the image are clipped to it; positions step by
    ``stride`` from the top-left corner. Returns ``(n, 4)`` integer boxes.
    """
    out = []
    for s in scales:
        for a in ratios:
            w = min(width, max(1, int(round(s * math.sqrt(a)))))
            h = min(height, max(1, int(round(s / math.sqrt(a)))))
            xs = np.arange(0, width - w + 1, stride)
            ys = np.arange(0, height - h + 1, stride)
            gx, gy = np.meshgrid(xs, ys)
            gx, gy = gx.ravel(), gy.ravel()
            out.append(np.stack([gx, gy, gx + w, gy + h], axis=1))
    if not out:
        return np.zeros((0, 4), dtype=np.int64)
    return np.concatenate(out).astype(np.int64)


# --------------------------------------------------------------------------- #
# scoring


@dataclass(frozen=True)
class WindowScore:
    score: float
    rejected_at: int | None = None  # stage index that rejected the window

    @property
    def accepted(self) -> bool:
        return self.rejected_at is None


def _evaluator(cascade: Cascade, grids) -> RegionletEvaluator:
    if isinstance(grids, RegionletEvaluator):
        return grids
    missing = cascade.families - set(grids)
    if missing:
        raise KeyError(f"missing feature grids for {sorted(missing)}")
    return RegionletEvaluator({f: grids[f] for f in cascade.families}, cascade.normalizer)


def score_windows(
    cascade: Cascade, grids: Mapping[str, FeatureGrid] | RegionletEvaluator, windows: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Cascade scores with early exit.

    Returns ``(scores, rejected_at)``; ``rejected_at`` is -1 for windows that
    pass every stage, otherwise the rejecting stage. Rejected windows carry
    their cumulative score at rejection.
    """
    windows = np.asarray(windows, dtype=np.float64).reshape(-1, 4)
    scores = np.zeros(len(windows))
    rejected = np.full(len(windows), -1, dtype=np.int64)
    if not cascade.stages or not len(windows):
        return scores, rejected
    ev = _evaluator(cascade, grids)
    alive = np.arange(len(windows))
    for s, stage in enumerate(cascade.stages):
        if not len(alive):
            break
        feats = ev.evaluate(windows[alive], [cascade.pool[w.config] for w in stage.weaks])
        for j, weak in enumerate(stage.weaks):
            scores[alive] += weak(feats[:, j])
        out = scores[alive] < stage.reject_threshold
        rejected[alive[out]] = s
        alive = alive[~out]
    return scores, rejected


def score_window(cascade: Cascade, grids, window: Sequence[float]) -> WindowScore:
    scores, rejected = score_windows(cascade, grids, np.asarray([window], dtype=np.float64))
    stage = int(rejected[0])
    return WindowScore(float(scores[0]), None if stage < 0 else stage)


def detect(
    grids: Mapping[str, FeatureGrid],
    proposals: np.ndarray,
    cascade: Cascade,
    nms_iou: float = 0.5,
    label: str = "object",
) -> list[Detection]:
    """Score proposals on precomputed grids, drop rejected ones, suppress, sort."""
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    if not len(proposals):
        return []
    scores, rejected = score_windows(cascade, grids, proposals)
    ok = np.flatnonzero(rejected < 0)
    keep = nms_indices(proposals[ok], scores[ok], nms_iou)
    return [Detection(tuple(float(v) for v in proposals[ok[k]]), float(scores[ok[k]]), label) for k in keep]


# --------------------------------------------------------------------------- #
# boosting


@dataclass(frozen=True)
class Stump:
    feature: int
    threshold: float
    left: float
    right: float
    error: float


@numba.njit(cache=True)
def _bin_sums(codes, v, bins):
    m, n = codes.shape
    out = np.zeros((v.shape[1], m, bins))
    for c in range(m):
        for i in range(n):
            k = codes[c, i]
            for j in range(v.shape[1]):
                out[j, c, k] += v[i, j]
    return out


class SplitTable:
    """Candidate thresholds per column and every sample's bin code.

    Thresholds are midpoints between consecutive distinct values. With
    ``max_bins=None`` every midpoint is kept and the search is exact; otherwise
    a column with more than ``max_bins - 1`` midpoints keeps that many at
    evenly spaced ranks.
    """

    def __init__(self, x: np.ndarray, max_bins: int | None = None) -> None:
        n, m = x.shape
        uniques = [np.unique(x[:, c]) for c in range(m)]
        if max_bins is None:
            max_bins = max(2, max(len(u) for u in uniques))
        if max_bins < 2:
            raise ValueError("max_bins must be at least 2")
        self.n, self.m, self.bins = n, m, max_bins
        self.thresholds = np.full((m, max_bins - 1), np.inf)
        codes = np.empty((m, n), dtype=np.uint8 if max_bins <= 256 else np.int32)
        for c, vals in enumerate(uniques):
            mids = (vals[1:] + vals[:-1]) / 2
            if len(mids) > max_bins - 1:
                pick = np.linspace(0, len(mids) - 1, max_bins - 1).round().astype(int)
                mids = mids[np.unique(pick)]
            self.thresholds[c, : len(mids)] = mids
            # code k: the value lies between thresholds k-1 and k
            codes[c] = np.searchsorted(mids, x[:, c], side="right")
        self.codes = codes

    def histograms(self, *vs: np.ndarray) -> np.ndarray:
        """Per-column cumulative sums of each ``v`` below each threshold, ``(len(vs), m, bins - 1)``."""
        v = np.ascontiguousarray(np.stack(vs, axis=1), dtype=np.float64)
        return np.cumsum(_bin_sums(self.codes, v, self.bins), axis=2)[:, :, :-1]


def fit_stump(
    x: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    table: SplitTable | None = None,
) -> Stump | None:
    """Weighted least-squares regression stump over the columns of ``x``.

    ``y`` is +/-1. Samples with ``x[:, col] < threshold`` go left. Thresholds
    come from ``table`` (built from ``x`` when omitted); ties go to the
    lowest column and then the smallest threshold. Returns ``None`` when no
    column can be split.
    """
    table = table if table is not None else SplitTable(x)
    wy = w * y
    total_w, total_s = float(w.sum()), float(wy.sum())
    cw, cs = table.histograms(w, wy)
    rw, rs = total_w - cw, total_s - cs
    valid = np.isfinite(table.thresholds) & (cw > 0) & (rw > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = np.where(valid, cs * cs / cw + rs * rs / rw, -np.inf)
    # row-major argmax picks the lowest column, then the smallest threshold
    flat = int(np.argmax(gain))
    col, k = divmod(flat, gain.shape[1])
    if not np.isfinite(gain[col, k]):
        return None
    # weighted squared error with sum(w * y^2) == sum(w)
    return Stump(
        col,
        float(table.thresholds[col, k]),
        float(cs[col, k] / cw[col, k]),
        float(rs[col, k] / rw[col, k]),
        float(total_w - gain[col, k]),
    )


@dataclass
class TrainParams:
    n_stages: int = 4
    weaks_per_stage: int = 64
    positive_recall: float = 0.99
    pos_iou: float = 0.6
    neg_iou: float = 0.3
    max_pos_per_object: int = 8
    neg_per_image: int = 48
    neg_candidates_per_image: int = 1000
    max_bins: int | None = 64  # None: exact search over every midpoint
    seed: int = 0


@dataclass
class TrainingImage:
    image_id: str
    grids: dict[str, FeatureGrid]
    gt_boxes: np.ndarray
    proposals: np.ndarray


@dataclass
class RoundRecord:
    stage: int
    round: int
    config: int
    stump_error: float
    constant_error: float
    exp_loss: float
    train_error: float


def _positive_windows(img: TrainingImage, params: TrainParams) -> np.ndarray:
    gt = np.asarray(img.gt_boxes, dtype=np.float64).reshape(-1, 4)
    if not len(gt):
        return np.zeros((0, 4))
    out = [gt]
    if len(img.proposals):
        ov = iou_matrix(img.proposals, gt)
        for g in range(len(gt)):
            cand = np.flatnonzero(ov[:, g] >= params.pos_iou)
            cand = cand[np.argsort(-ov[cand, g], kind="stable")][: params.max_pos_per_object]
            out.append(np.asarray(img.proposals, dtype=np.float64)[cand])
    return np.concatenate(out)


def _negative_candidates(img: TrainingImage, params: TrainParams) -> np.ndarray:
    props = np.asarray(img.proposals, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(img.gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt) and len(props):
        props = props[iou_matrix(props, gt).max(axis=1) < params.neg_iou]
    return props


def train_cascade(
    images: Sequence[TrainingImage],
    pool: Sequence[RegionletConfig],
    params: TrainParams | None = None,
    normalizer: str = "l0",
) -> tuple[Cascade, list[RoundRecord]]:
    """Train a soft cascade with Gentle-style boosting of regression stumps.

    Stage 1 negatives are random low-overlap proposals; later stages take the
    previous cascade's false positives, topped up with random low-overlap
    proposals. Each stage's rejection threshold keeps the requested fraction
    of training positives.
    """
    params = params or TrainParams()
    pool = list(pool)
    if not pool:
        raise ValueError("empty configuration pool")
    rng = np.random.default_rng(params.seed)
    cascade = Cascade(pool, normalizer=normalizer)
    cascade.metadata.update(
        seed=str(params.seed),
        pool_size=str(len(pool)),
        n_images=str(len(images)),
        stages=str(params.n_stages),
        weaks_per_stage=str(params.weaks_per_stage),
    )

    evaluators = [RegionletEvaluator(img.grids, normalizer) for img in images]
    pos_x, neg_cands = [], []
    for img, ev in zip(images, evaluators):
        windows = _positive_windows(img, params)
        if len(windows):
            pos_x.append(ev.evaluate(windows, pool))
        neg_cands.append(_negative_candidates(img, params))
    if not pos_x:
        raise ValueError("no positive windows in the training set")
    if not any(len(c) for c in neg_cands):
        raise ValueError("no negative windows in the training set")
    x_pos = np.concatenate(pos_x)
    f_pos = np.zeros(len(x_pos))
    history: list[RoundRecord] = []

    for s in range(params.n_stages):
        x_neg = _mine_negatives(cascade, evaluators, neg_cands, pool, params, rng)
        if not len(x_neg):
            log.info("stage %d: no negatives left, stopping", s)
            break
        f_neg = score_rows(cascade, x_neg)
        x = np.concatenate([x_pos, x_neg])
        y = np.concatenate([np.ones(len(x_pos)), -np.ones(len(x_neg))])
        f = np.concatenate([f_pos, f_neg])
        stage, records, f = _boost_stage(x, y, f, params.weaks_per_stage, s, params.max_bins)
        history.extend(records)
        f_pos = f[: len(x_pos)]
        keep = int(math.floor((1.0 - params.positive_recall) * len(f_pos)))
        stage.reject_threshold = float(np.sort(f_pos)[keep])
        cascade.stages.append(stage)
        log.info(
            "stage %d: %d pos, %d neg, reject below %.4f",
            s, len(x_pos), len(x_neg), stage.reject_threshold,
        )
        # positives rejected by this stage no longer shape later stages
        alive = f_pos >= stage.reject_threshold
        x_pos, f_pos = x_pos[alive], f_pos[alive]
    return cascade, history


def score_rows(cascade: Cascade, x: np.ndarray) -> np.ndarray:
    """Cumulative score of precomputed pool features (no early exit)."""
    f = np.zeros(len(x))
    for w in cascade.weaks:
        f += w(x[:, w.config])
    return f


def _mine_negatives(cascade, evaluators, neg_cands, pool, params, rng):
    rows = []
    for ev, cands in zip(evaluators, neg_cands):
        if not len(cands):
            continue
        pick = rng.choice(len(cands), size=min(len(cands), params.neg_candidates_per_image), replace=False)
        sample = cands[np.sort(pick)]
        if cascade.stages:
            scores, rejected = score_windows(cascade, ev, sample)
            # hardest false positives first
            alive = np.flatnonzero(rejected < 0)
            hard = sample[alive[np.argsort(-scores[alive], kind="stable")]]
            rest = sample[rejected >= 0]
        else:
            hard, rest = sample[:0], sample
        chosen = hard[: params.neg_per_image]
        short = params.neg_per_image - len(chosen)
        if short > 0 and len(rest):
            extra = rest[rng.choice(len(rest), size=min(short, len(rest)), replace=False)]
            chosen = np.concatenate([chosen, extra])
        if len(chosen):
            rows.append(ev.evaluate(chosen, pool))
    return np.concatenate(rows) if rows else np.zeros((0, len(pool)))


def _boost_stage(x, y, f, n_weaks, stage_index, max_bins=None):
    table = SplitTable(x, max_bins)
    # class-balanced weights, carried over from the cascade score so far
    w = np.exp(-y * f)
    for label in (1, -1):
        sel = y == label
        w[sel] *= 0.5 / w[sel].sum()
    base = w.copy()
    f_start = f.copy()
    stage = CascadeStage([])
    records = []
    for r in range(n_weaks):
        w = w / w.sum()
        stump = fit_stump(x, y, w, table)
        if stump is None:
            break
        h = np.where(x[:, stump.feature] < stump.threshold, stump.left, stump.right)
        constant = float(w.sum() - (w * y).sum() ** 2 / w.sum())
        f = f + h
        w = w * np.exp(-y * h)
        weak = WeakClassifier(stump.feature, stump.threshold, stump.left, stump.right)
        stage.weaks.append(weak)
        records.append(
            RoundRecord(
                stage=stage_index,
                round=r,
                config=stump.feature,
                stump_error=stump.error,
                constant_error=constant,
                exp_loss=float((base * np.exp(-y * (f - f_start))).sum()),
                train_error=float(base[np.sign(f) != y].sum() / base.sum()),
            )
        )
    return stage, records, f


# --------------------------------------------------------------------------- #
# cascade files


def save_cascade(cascade: Cascade, path: str | Path, pool_path: str | Path | None = None) -> None:
    """Write the cascade as text; the configuration pool goes to ``pool_path``.

    Weak lines reference configurations by their line number (0-based) in the
    pool file.
    """
    path = Path(path)
    pool_path = Path(pool_path) if pool_path is not None else path.with_suffix(".pool")
    save_configs(cascade.pool, pool_path)
    try:
        ref = pool_path.resolve().relative_to(path.resolve().parent)
    except ValueError:
        ref = pool_path.resolve()
    lines = [f"{CASCADE_MAGIC} {CASCADE_VERSION}", f"pool {ref}", f"normalizer {cascade.normalizer}"]
    for k, v in sorted(cascade.metadata.items()):
        lines.append(f"meta {k} {v}")
    for stage in cascade.stages:
        lines.append(f"stage {len(stage.weaks)} {float(stage.reject_threshold)!r}")
        for w in stage.weaks:
            lines.append(f"weak {int(w.config)} {float(w.threshold)!r} {float(w.left)!r} {float(w.right)!r}")
    path.write_text("\n".join(lines) + "\n")


def load_cascade(path: str | Path) -> Cascade:
    path = Path(path)
    lines = [l.split() for l in path.read_text().splitlines() if l.strip()]
    if not lines or lines[0] != [CASCADE_MAGIC, str(CASCADE_VERSION)]:
        raise ValueError(f"{path}: not a version {CASCADE_VERSION} cascade file")
    pool: list[RegionletConfig] | None = None
    cascade = Cascade([])
    for parts in lines[1:]:
        key = parts[0]
        if key == "pool":
            ref = Path(" ".join(parts[1:]))
            pool = load_configs(ref if ref.is_absolute() else path.parent / ref)
            cascade.pool = pool
        elif key == "normalizer":
            cascade.normalizer = parts[1]
        elif key == "meta":
            cascade.metadata[parts[1]] = " ".join(parts[2:])
        elif key == "stage":
            cascade.stages.append(CascadeStage([], float(parts[2])))
        elif key == "weak":
            if not cascade.stages:
                raise ValueError(f"{path}: weak classifier before any stage")
            idx = int(parts[1])
            if pool is None or not 0 <= idx < len(pool):
                raise ValueError(f"{path}: weak references missing configuration {idx}")
            cascade.stages[-1].weaks.append(
                WeakClassifier(idx, float(parts[2]), float(parts[3]), float(parts[4]))
            )
        else:
            raise ValueError(f"{path}: unknown record {key!r}")
    return cascade
