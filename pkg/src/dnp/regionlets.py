"""Regionlet pooling of feature grids into 1-D boosting features.

A configuration names a region of the detection window, a few regionlets
inside it, a feature family and one dimension. Its value for a window is the
max over regionlets of the normalized average of the grid points that fall
inside each regionlet.

Rectangles are in window-normalized coordinates; a grid point belongs to a
regionlet when its pixel center lies in the half-open box
``[left, right) x [top, bottom)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dense import FeatureGrid

REGION_LATTICE = 16
REGIONLET_LATTICE = 64


@dataclass(frozen=True)
class Rect:
    left: float
    top: float
    right: float
    bottom: float

    def __post_init__(self) -> None:
        if not (self.left < self.right and self.top < self.bottom):
            raise ValueError(f"degenerate rect {self}")

    def contains(self, other: "Rect") -> bool:
        return (
            self.left <= other.left
            and self.top <= other.top
            and other.right <= self.right
            and other.bottom <= self.bottom
        )


UNIT = Rect(0.0, 0.0, 1.0, 1.0)


@dataclass(frozen=True)
class RegionletConfig:
    family: str
    dim: int
    region: Rect
    regionlets: tuple[Rect, ...]

    def validate(self, dims: Mapping[str, int] | None = None) -> None:
        if not self.regionlets:
            raise ValueError("configuration needs at least one regionlet")
        if not UNIT.contains(self.region):
            raise ValueError("region outside the unit window")
        for r in self.regionlets:
            if not self.region.contains(r):
                raise ValueError(f"regionlet {r} outside region {self.region}")
        if dims is not None:
            if self.family not in dims:
                raise ValueError(f"unknown family {self.family!r}")
            if not 0 <= self.dim < dims[self.family]:
                raise ValueError(f"dimension {self.dim} outside 0..{dims[self.family] - 1}")


def regionlet_pixels(window: Sequence[float], r: Rect) -> tuple[float, float, float, float]:
    l, t, rr, b = (float(v) for v in window)
    w, h = rr - l, b - t
    return l + r.left * w, t + r.top * h, l + r.right * w, t + r.bottom * h


def _span(coords: np.ndarray, lo, hi):
    # first point >= lo and first point >= hi; identical to the half-open test
    return np.searchsorted(coords, lo, "left"), np.searchsorted(coords, hi, "left")


def pool_regionlet(grid: FeatureGrid, window: Sequence[float], r: Rect) -> np.ndarray:
    """Average of the grid vectors whose centers fall in ``r`` mapped onto ``window``.

    Returns the zero vector when no grid point is covered.
    """
    l, t, rr, b = regionlet_pixels(window, r)
    if not (rr > l and b > t):
        raise ValueError(f"regionlet {r} has no pixel area in window {tuple(window)}")
    u0, u1 = _span(grid.xs(), l, rr)
    v0, v1 = _span(grid.ys(), t, b)
    acc = np.zeros(grid.dim, dtype=np.float64)
    count = 0
    for v in range(v0, v1):
        for u in range(u0, u1):
            acc += grid.data[v, u]
            count += 1
    return acc / count if count else acc


def normalize_l0(v: np.ndarray) -> np.ndarray:
    """Divide by the number of nonzero entries (zero vector stays zero)."""
    v = np.asarray(v, dtype=np.float64)
    nnz = np.count_nonzero(v)
    return v / nnz if nnz else v.copy()


def normalize_l1(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    total = np.abs(v).sum()
    return v / total if total else v.copy()


NORMALIZERS = {"l0": normalize_l0, "l1": normalize_l1}


def region_feature(
    grids: Mapping[str, FeatureGrid],
    window: Sequence[float],
    cfg: RegionletConfig,
    normalizer: str = "l0",
) -> float:
    """Max over regionlets of the normalized pooled value in dimension ``cfg.dim``."""
    if cfg.family not in grids:
        raise KeyError(f"no grid for family {cfg.family!r}")
    norm = NORMALIZERS[normalizer]
    grid = grids[cfg.family]
    return max(float(norm(pool_regionlet(grid, window, r))[cfg.dim]) for r in cfg.regionlets)


def _lattice_pair(rng: np.random.Generator, lo: int, hi: int) -> tuple[int, int]:
    a, b = rng.choice(hi - lo + 1, size=2, replace=False) + lo
    return (int(a), int(b)) if a < b else (int(b), int(a))


def sample_configurations(
    seed: int, count: int, families: Mapping[str, int], k_max: int = 3
) -> list[RegionletConfig]:
    """Uniform random configurations.

    Regions snap to a 1/16 lattice of the window and regionlets to a 1/64
    lattice inside their region, so every coordinate round-trips through the
    6-decimal text format exactly.
    """
    if count < 1:
        raise ValueError("count must be positive")
    names = sorted(families)
    rng = np.random.default_rng(seed)
    step = REGIONLET_LATTICE // REGION_LATTICE
    out = []
    for _ in range(count):
        family = names[int(rng.integers(len(names)))]
        dim = int(rng.integers(families[family]))
        x0, x1 = _lattice_pair(rng, 0, REGION_LATTICE)
        y0, y1 = _lattice_pair(rng, 0, REGION_LATTICE)
        region = Rect(x0 / REGION_LATTICE, y0 / REGION_LATTICE, x1 / REGION_LATTICE, y1 / REGION_LATTICE)
        k = int(rng.integers(1, k_max + 1))
        lets = []
        for _ in range(k):
            a, b = _lattice_pair(rng, x0 * step, x1 * step)
            c, d = _lattice_pair(rng, y0 * step, y1 * step)
            lets.append(
                Rect(a / REGIONLET_LATTICE, c / REGIONLET_LATTICE, b / REGIONLET_LATTICE, d / REGIONLET_LATTICE)
            )
        out.append(RegionletConfig(family, dim, region, tuple(lets)))
    return out


def format_configs(configs: Sequence[RegionletConfig]) -> str:
    def rect(r: Rect) -> str:
        return f"{r.left:.6f} {r.top:.6f} {r.right:.6f} {r.bottom:.6f}"

    lines = []
    for c in configs:
        parts = [c.family, str(c.dim), rect(c.region), str(len(c.regionlets))]
        parts += [rect(r) for r in c.regionlets]
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def parse_configs(text: str) -> list[RegionletConfig]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        try:
            family, dim = parts[0], int(parts[1])
            nums = [float(p) for p in parts[2:6]]
            k = int(parts[6])
            rest = [float(p) for p in parts[7:]]
            if len(rest) != 4 * k:
                raise ValueError("regionlet count does not match")
            lets = tuple(Rect(*rest[4 * j : 4 * j + 4]) for j in range(k))
            out.append(RegionletConfig(family, dim, Rect(*nums), lets))
        except (IndexError, ValueError) as exc:
            raise ValueError(f"config line {lineno}: {exc}") from exc
    return out


def save_configs(configs: Sequence[RegionletConfig], path: str | Path) -> None:
    Path(path).write_text(format_configs(configs))


def load_configs(path: str | Path) -> list[RegionletConfig]:
    return parse_configs(Path(path).read_text())


# --------------------------------------------------------------------------- #
# Batched evaluation for training and detection.


class _GridIndex:
    """Integral image plus a 2-D sparse table of nonzero bitmasks for one grid."""

    def __init__(self, grid: FeatureGrid):
        self.grid = grid
        self.xs = grid.xs()
        self.ys = grid.ys()
        data = grid.data.astype(np.float64)
        rows, cols, dim = data.shape
        self.integral = np.zeros((rows + 1, cols + 1, dim))
        self.integral[1:, 1:] = data.cumsum(0).cumsum(1)
        words = -(-dim // 64)
        nz = grid.data != 0
        masks = np.zeros((rows, cols, words), dtype=np.uint64)
        for d in range(dim):
            masks[:, :, d // 64] |= nz[:, :, d].astype(np.uint64) << np.uint64(d % 64)
        # table[a][b][v, u] = OR over rows v..v+2^a-1, cols u..u+2^b-1
        table = []
        level = [masks]
        b = 1
        while (1 << b) <= max(cols, 1):
            prev = level[-1]
            half = 1 << (b - 1)
            level.append(prev[:, :-half] | prev[:, half:])
            b += 1
        table.append(level)
        a = 1
        while (1 << a) <= max(rows, 1):
            half = 1 << (a - 1)
            table.append([t[:-half] | t[half:] for t in table[-1]])
            a += 1
        # all levels in one flat array so each corner is a single gather
        self.words = words
        self.offset = np.zeros((len(table), len(table[0])), dtype=np.int64)
        self.width = np.zeros_like(self.offset)
        parts, pos = [], 0
        for ai, level in enumerate(table):
            for bi, t in enumerate(level):
                self.offset[ai, bi], self.width[ai, bi] = pos, t.shape[1]
                parts.append(t.reshape(-1, words))
                pos += t.shape[0] * t.shape[1]
        self.flat = np.concatenate(parts)

    def lattice_index(self, coord: np.ndarray, axis: int) -> np.ndarray:
        """Index of the first grid point at or after ``coord`` along an axis."""
        g = self.grid
        origin, n = (g.x0, g.cols) if axis == 0 else (g.y0, g.rows)
        return np.clip(np.ceil((coord - origin) / g.stride), 0, n).astype(np.int64)

    def block_or(self, v0, v1, u0, u1) -> np.ndarray:
        """OR of the nonzero masks over each (nonempty) block, ``(k, words)``."""
        a = np.frexp((v1 - v0).astype(np.float64))[1] - 1
        b = np.frexp((u1 - u0).astype(np.float64))[1] - 1
        base = self.offset[a, b]
        width = self.width[a, b]
        vb = v1 - (1 << a)
        ub = u1 - (1 << b)
        f = self.flat
        return f[base + v0 * width + u0] | f[base + v0 * width + ub] | f[base + vb * width + u0] | f[base + vb * width + ub]

    def block_sum(self, table, v0, v1, u0, u1, dims=None):
        if dims is None:
            return table[v1, u1] - table[v0, u1] - table[v1, u0] + table[v0, u0]
        return table[v1, u1, dims] - table[v0, u1, dims] - table[v1, u0, dims] + table[v0, u0, dims]


class RegionletEvaluator:
    """Evaluate many configurations on many windows of one image.

    Agrees with :func:`region_feature` up to floating-point summation order.
    """

    def __init__(self, grids: Mapping[str, FeatureGrid], normalizer: str = "l0"):
        if normalizer not in NORMALIZERS:
            raise ValueError(f"unknown normalizer {normalizer!r}")
        self.normalizer = normalizer
        self.index = {name: _GridIndex(g) for name, g in grids.items()}

    def evaluate(
        self, windows: np.ndarray, configs: Sequence[RegionletConfig], chunk: int = 4096
    ) -> np.ndarray:
        """Feature matrix of shape ``(len(windows), len(configs))``."""
        windows = np.asarray(windows, dtype=np.float64).reshape(-1, 4)
        out = np.zeros((len(windows), len(configs)), dtype=np.float64)
        by_family: dict[str, list[int]] = {}
        for j, c in enumerate(configs):
            by_family.setdefault(c.family, []).append(j)
        for family, idx in by_family.items():
            if family not in self.index:
                raise KeyError(f"no grid for family {family!r}")
            for lo in range(0, len(idx), chunk):
                part = idx[lo : lo + chunk]
                out[:, part] = self._family(self.index[family], windows, [configs[j] for j in part])
        return out

    def _family(self, gi: _GridIndex, windows: np.ndarray, configs) -> np.ndarray:
        rects = np.array([[r.left, r.top, r.right, r.bottom] for c in configs for r in c.regionlets])
        owner = np.repeat(np.arange(len(configs)), [len(c.regionlets) for c in configs])
        dims = np.array([c.dim for c in configs])[owner]
        wl, wt, wr, wb = (windows[:, k : k + 1] for k in range(4))
        ww, wh = wr - wl, wb - wt
        left = wl + rects[None, :, 0] * ww
        right = wl + rects[None, :, 2] * ww
        top = wt + rects[None, :, 1] * wh
        bottom = wt + rects[None, :, 3] * wh
        if np.any(right <= left) or np.any(bottom <= top):
            raise ValueError("regionlet with no pixel area")
        u0, u1 = gi.lattice_index(left, 0), gi.lattice_index(right, 0)
        v0, v1 = gi.lattice_index(top, 1), gi.lattice_index(bottom, 1)
        count = (u1 - u0) * (v1 - v0)
        nonempty = count > 0
        values = np.zeros(left.shape)
        if nonempty.any():
            d = np.broadcast_to(dims[None, :], left.shape)[nonempty]
            a, b, c_, e = v0[nonempty], v1[nonempty], u0[nonempty], u1[nonempty]
            total = gi.block_sum(gi.integral, a, b, c_, e, d)
            mean = total / count[nonempty]
            if self.normalizer == "l0":
                masks = gi.block_or(a, b, c_, e)
                nnz = np.bitwise_count(masks).sum(axis=-1)
                word = masks[np.arange(len(d)), d // 64]
                active = (word >> (d % 64).astype(np.uint64)) & np.uint64(1)
                # a dimension with no nonzero point pools to exactly zero
                val = np.where(active == 1, mean / np.maximum(nnz, 1), 0.0)
            else:
                full = gi.block_sum(gi.integral, a, b, c_, e)
                l1 = np.abs(full).sum(axis=-1) / count[nonempty]
                val = np.where(l1 > 0, mean / np.where(l1 > 0, l1, 1), 0.0)
            values[nonempty] = val
        # max over each configuration's regionlets
        starts = np.concatenate([[0], np.cumsum([len(c.regionlets) for c in configs])[:-1]])
        return np.maximum.reduceat(values, starts, axis=1)
