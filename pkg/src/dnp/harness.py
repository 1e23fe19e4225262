"""End-to-end plumbing: feature extraction per image, training and evaluation
runs, the model-convolution benchmark, and top-pattern visualization."""

from __future__ import annotations

import csv
import logging
import time
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cnn import WeightSet, forward_to_layer, init_weights
from .dense import FeatureGrid, cut_crop, network_convolution, plan_tiling, prepare_image
from .detector import (
    Cascade,
    Detection,
    TrainingImage,
    TrainParams,
    detect,
    propose_grid,
    train_cascade,
)
from .evaluation import ScoredBox, average_precision
from .geometry import NetSpec, layer_stride, receptive_field_extent
from .hog import hog_extract
from .imageio import write_image
from .regionlets import RegionletConfig, sample_configurations
from .synthetic import DatasetManifest

log = logging.getLogger(__name__)

HOG = "hog"


def dnp_family(layer: int) -> str:
    return f"dnp_layer_{layer}"


def family_layer(family: str) -> int:
    if not family.startswith("dnp_layer_"):
        raise ValueError(f"{family!r} is not a DNP family")
    return int(family.rsplit("_", 1)[1])


@dataclass
class FeatureExtractor:
    """Computes every requested feature grid for an image, once."""

    net: NetSpec
    weights: WeightSet
    layer: int
    families: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        self.layer = self.net.resolve(self.layer)
        if not self.families:
            self.families = (dnp_family(self.layer), HOG)

    def dims(self) -> dict[str, int]:
        out = {}
        for f in self.families:
            out[f] = 36 if f == HOG else self.net.channels(family_layer(f))
        return out

    def grids(self, image: np.ndarray) -> dict[str, FeatureGrid]:
        out = {}
        for f in self.families:
            if f == HOG:
                out[f] = hog_extract(image)
            else:
                out[f] = network_convolution(self.net, self.weights, image, family_layer(f))
        return out


@dataclass
class ProposalSpec:
    scales: tuple[float, ...] = (40, 56, 80, 112)
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    stride: int = 12

    def windows(self, width: int, height: int) -> np.ndarray:
        return propose_grid(width, height, self.scales, self.ratios, self.stride)


def compute_grids(
    manifest: DatasetManifest, extractor: FeatureExtractor, split: str | None = None
) -> dict[str, dict[str, FeatureGrid]]:
    out = {}
    entries = manifest.entries if split is None else manifest.split(split)
    for n, e in enumerate(entries, start=1):
        out[e.image_id] = extractor.grids(manifest.image(e))
        if n % 25 == 0:
            log.info("extracted features for %d/%d images", n, len(entries))
    return out


def restrict(grids: dict[str, dict[str, FeatureGrid]], families: Iterable[str]):
    families = tuple(families)
    return {k: {f: g[f] for f in families} for k, g in grids.items()}


def training_images(
    manifest: DatasetManifest,
    grids: dict[str, dict[str, FeatureGrid]],
    proposals: ProposalSpec,
    split: str = "train",
) -> list[TrainingImage]:
    out = []
    for e in manifest.split(split):
        gt = e.annotation
        out.append(
            TrainingImage(
                e.image_id,
                grids[e.image_id],
                np.asarray(gt.boxes, dtype=np.float64).reshape(-1, 4),
                proposals.windows(gt.width, gt.height),
            )
        )
    return out


def run_detection(
    manifest: DatasetManifest,
    grids: dict[str, dict[str, FeatureGrid]],
    cascade: Cascade,
    proposals: ProposalSpec,
    split: str = "test",
    nms_iou: float = 0.5,
) -> list[ScoredBox]:
    out = []
    for e in manifest.split(split):
        windows = proposals.windows(e.annotation.width, e.annotation.height)
        for d in detect(grids[e.image_id], windows, cascade, nms_iou, label=_label(e)):
            out.append(ScoredBox(e.image_id, d.box, d.score, d.label))
    return out


def _label(entry) -> str:
    labels = set(entry.annotation.labels)
    return labels.pop() if len(labels) == 1 else "object"


def random_baseline(
    manifest: DatasetManifest, proposals: ProposalSpec, seed: int = 0, split: str = "test", nms_iou: float = 0.5
) -> list[ScoredBox]:
    """Uniform random scores on the same proposals, after the same suppression."""
    from .detector import nms_indices

    rng = np.random.default_rng(seed)
    out = []
    for e in manifest.split(split):
        windows = proposals.windows(e.annotation.width, e.annotation.height)
        scores = rng.random(len(windows))
        for k in nms_indices(windows, scores, nms_iou):
            out.append(ScoredBox(e.image_id, tuple(map(float, windows[k])), float(scores[k]), _label(e)))
    return out


def family_pool(
    seed: int, per_family: int, dims: dict[str, int], k_max: int = 3
) -> list[RegionletConfig]:
    """Concatenated per-family pools, each seeded from ``(seed, family)``.

    A family's configurations do not depend on which other families are
    present, so adding a family only appends to the pool.
    """
    pool = []
    for name in sorted(dims):
        state = np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0]
        pool.extend(sample_configurations(int(state), per_family, {name: dims[name]}, k_max))
    return pool


@dataclass
class Experiment:
    """Train on one split, evaluate on another, with a fixed feature set.

    ``pool_size`` configurations are sampled per feature family.
    """

    families: tuple[str, ...]
    pool_size: int = 10_000
    k_max: int = 3
    params: TrainParams = field(default_factory=TrainParams)
    proposals: ProposalSpec = field(default_factory=ProposalSpec)
    normalizer: str = "l0"
    seed: int = 0

    def run(self, manifest: DatasetManifest, grids, dims: dict[str, int]):
        fams = {f: dims[f] for f in self.families}
        pool = family_pool(self.seed, self.pool_size, fams, self.k_max)
        sub = restrict(grids, self.families)
        log.info("training on %s with %d configurations", sorted(fams), len(pool))
        cascade, history = train_cascade(
            training_images(manifest, sub, self.proposals), pool, self.params, self.normalizer
        )
        dets = run_detection(manifest, sub, cascade, self.proposals)
        ap = average_precision(dets, manifest.ground_truth("test"))
        return cascade, history, dets, ap


# --------------------------------------------------------------------------- #
# benchmark


@dataclass
class BenchReport:
    width: int
    height: int
    proposals: int
    dense_convolutions: int
    region_convolutions: int
    dense_seconds: float | None = None
    region_seconds: float | None = None

    @property
    def ratio(self) -> float:
        return self.region_convolutions / self.dense_convolutions

    def row(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "proposals": self.proposals,
            "dense_convolutions": self.dense_convolutions,
            "region_convolutions": self.region_convolutions,
            "ratio": f"{self.ratio:.2f}",
            "dense_seconds": "" if self.dense_seconds is None else f"{self.dense_seconds:.3f}",
            "region_seconds": "" if self.region_seconds is None else f"{self.region_seconds:.3f}",
        }


def bench_convolutions(
    width: int,
    height: int,
    proposals: int,
    net: NetSpec,
    layer: int | str,
    *,
    timing: bool = False,
    mode: str = "cover",
    weights: WeightSet | None = None,
    seed: int = 0,
    timed_regions: int = 4,
) -> BenchReport:
    """Forward passes needed by dense tiling versus one pass per resized proposal.

    With ``timing`` the dense path is run for real and the per-region path is
    timed on ``timed_regions`` crops and extrapolated. Timings depend on the
    machine and are informational only. ``mode`` selects the tiling (see
    :func:`plan_tiling`).
    """
    if proposals < 0:
        raise ValueError("proposal count must be non-negative")
    plan = plan_tiling(width, height, net, layer, mode=mode)
    report = BenchReport(width, height, proposals, plan.n_crops, proposals)
    if timing:
        weights = weights or init_weights(net, seed)
        image = np.random.default_rng(seed).integers(0, 256, size=(height, width, 3), dtype=np.uint8)
        t0 = time.perf_counter()
        network_convolution(net, weights, image, layer, plan=plan)
        report.dense_seconds = time.perf_counter() - t0
        n = min(timed_regions, proposals)
        if n:
            crop = np.zeros((net.input_channels, net.input_size, net.input_size), dtype=np.float32)
            t0 = time.perf_counter()
            for _ in range(n):
                forward_to_layer(net, weights, crop, layer)
            report.region_seconds = (time.perf_counter() - t0) / n * proposals
    return report


def write_bench_csv(reports: Sequence[BenchReport], path: str | Path) -> None:
    rows = [r.row() for r in reports]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def format_bench_table(reports: Sequence[BenchReport]) -> str:
    head = f"{'image':>10} {'proposals':>10} {'dense':>7} {'region':>8} {'ratio':>8}"
    lines = [head]
    for r in reports:
        lines.append(
            f"{f'{r.width}x{r.height}':>10} {r.proposals:>10} {r.dense_convolutions:>7} "
            f"{r.region_convolutions:>8} {r.ratio:>8.2f}"
        )
        if r.dense_seconds is not None:
            lines.append(
                f"{'':>10} wall clock (this machine): dense {r.dense_seconds:.2f}s, "
                f"per-region {r.region_seconds or 0:.2f}s"
            )
    return "\n".join(lines)


# --------------------------------------------------------------------------- #
# visualization


@dataclass
class Patch:
    image_id: str
    center: tuple[float, float]
    size: int
    value: float
    pixels: np.ndarray = field(repr=False)


@dataclass
class PatternReport:
    histogram: dict[tuple[str, int], int]
    top: tuple[str, int] | None
    patches: list[Patch]


def dimension_histogram(cascade: Cascade) -> dict[tuple[str, int], int]:
    """How often each (DNP family, dimension) is picked by a weak classifier."""
    counts: Counter = Counter()
    for w in cascade.weaks:
        cfg = cascade.pool[w.config]
        if cfg.family.startswith("dnp_layer_"):
            counts[(cfg.family, cfg.dim)] += 1
    return dict(counts)


def visualize_top_patterns(
    cascade: Cascade,
    manifest: DatasetManifest,
    k: int,
    net: NetSpec,
    grids: dict[str, dict[str, FeatureGrid]],
    split: str | None = None,
) -> PatternReport:
    """Rank feature points by the most frequently selected DNP dimension.

    Each of the ``k`` strongest points yields a receptive-field sized patch
    centered on the point (zero outside the image).
    """
    hist = dimension_histogram(cascade)
    if not hist:
        raise ValueError("cascade selects no DNP features")
    top = min(hist, key=lambda key: (-hist[key], key))
    if k <= 0:
        return PatternReport(hist, top, [])
    family, dim = top
    layer = family_layer(family)
    size = receptive_field_extent(net, layer)
    scored = []
    entries = manifest.entries if split is None else manifest.split(split)
    for e in entries:
        g = grids[e.image_id][family]
        vals = g.data[:, :, dim]
        for v, u in zip(*np.unravel_index(np.argsort(-vals, axis=None)[:k], vals.shape)):
            scored.append((-float(vals[v, u]), e.image_id, int(u), int(v)))
    scored.sort()
    by_id = {e.image_id: e for e in entries}
    patches = []
    for neg, image_id, u, v in scored[:k]:
        g = grids[image_id][family]
        cx, cy = g.point(u, v)
        img = manifest.image(by_id[image_id])
        patches.append(Patch(image_id, (cx, cy), size, -neg, _patch(img, cx, cy, size)))
    return PatternReport(hist, top, patches)


def _patch(image: np.ndarray, cx: float, cy: float, size: int) -> np.ndarray:
    half = (size - 1) / 2
    x0, y0 = int(round(cx - half)), int(round(cy - half))
    img = image if image.ndim == 3 else image[:, :, None]
    out = np.zeros((size, size, img.shape[2]), dtype=np.uint8)
    h, w = img.shape[:2]
    xl, xh = max(x0, 0), min(x0 + size, w)
    yl, yh = max(y0, 0), min(y0 + size, h)
    if xl < xh and yl < yh:
        out[yl - y0 : yh - y0, xl - x0 : xh - x0] = img[yl:yh, xl:xh]
    return out if image.ndim == 3 else out[:, :, 0]


def save_patterns(report: PatternReport, outdir: str | Path) -> Path:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    index = outdir / "index.csv"
    with open(index, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file", "image_id", "x", "y", "size", "value"])
        for n, p in enumerate(report.patches):
            name = f"patch_{n:03d}.{'ppm' if p.pixels.ndim == 3 else 'pgm'}"
            write_image(outdir / name, p.pixels)
            writer.writerow([name, p.image_id, float(p.center[0]), float(p.center[1]), p.size, repr(float(p.value))])
    with open(outdir / "histogram.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["family", "dim", "count"])
        for (fam, dim), c in sorted(report.histogram.items(), key=lambda kv: (-kv[1], kv[0])):
            writer.writerow([fam, dim, c])
    return index


# --------------------------------------------------------------------------- #
# CSV helpers


def read_proposals(path: str | Path) -> dict[str, np.ndarray]:
    rows: dict[str, list] = {}
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            if not rec or rec[0] == "image_id":
                continue
            rows.setdefault(rec[0], []).append([float(v) for v in rec[1:5]])
    return {k: np.asarray(v, dtype=np.float64) for k, v in rows.items()}


def write_detections(dets: Iterable[ScoredBox], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "left", "top", "right", "bottom", "score"])
        for d in dets:
            writer.writerow([d.image_id, *(float(v) for v in d.box), repr(float(d.score))])


def read_detections(path: str | Path, label: str | None = None) -> list[ScoredBox]:
    out = []
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            if not rec or rec[0] == "image_id":
                continue
            box = tuple(float(v) for v in rec[1:5])
            kwargs = {"label": label} if label else {}
            out.append(ScoredBox(rec[0], box, float(rec[5]), **kwargs))
    return out


def detections_to_scored(image_id: str, dets: Sequence[Detection]) -> list[ScoredBox]:
    return [ScoredBox(image_id, d.box, d.score, d.label) for d in dets]
