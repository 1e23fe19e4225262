"""Dense whole-image features by tiling the network over fixed-size crops.

Every crop is run through the network independently and only a central
block of cells is kept from each one. Consecutive crops are shifted by
exactly the width of that block, so the kept blocks abut and form a single
regular grid of feature points over the whole image.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .cnn import WeightSet, forward_to_layer
from .geometry import NetSpec, layer_stride, retained_block, top_left_center

GRID_MAGIC = b"DNPG"
GRID_VERSION = 1
CHANNEL_MEAN = 0.5


class GridFormatError(ValueError):
    pass


@dataclass
class FeatureGrid:
    """Feature vectors on a regular pixel lattice.

    Point ``(u, v)`` (column, row) sits at pixel ``(x0 + u*stride, y0 + v*stride)``
    in 0-based pixel-center coordinates; ``data`` has shape ``(rows, cols, D)``.
    """

    x0: float
    y0: float
    stride: int
    data: np.ndarray

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def xs(self) -> np.ndarray:
        return self.x0 + self.stride * np.arange(self.cols, dtype=np.float64)

    def ys(self) -> np.ndarray:
        return self.y0 + self.stride * np.arange(self.rows, dtype=np.float64)

    def point(self, u: int, v: int) -> tuple[float, float]:
        return self.x0 + u * self.stride, self.y0 + v * self.stride


@dataclass(frozen=True)
class AxisTile:
    origin: int  # crop offset in pixels, may be negative
    first: int  # first kept cell of the crop's map
    count: int  # number of kept cells
    index: int  # grid index of the first kept cell


@dataclass(frozen=True)
class TilingPlan:
    layer: int
    crop: int
    shift: int
    stride: int
    x_tiles: tuple[AxisTile, ...]
    y_tiles: tuple[AxisTile, ...]
    x0: float
    y0: float
    cols: int
    rows: int

    @property
    def n_crops(self) -> int:
        return len(self.x_tiles) * len(self.y_tiles)

    @property
    def crops(self) -> list[tuple[AxisTile, AxisTile]]:
        return [(tx, ty) for ty in self.y_tiles for tx in self.x_tiles]


def _center_offset(net: NetSpec, layer: int) -> Fraction:
    return top_left_center(net, layer, convention="exact", one_based=False)


def _axis_tiles(length, crop, offset, stride, start, span, mode):
    """Lay out crops along one axis; ``offset`` is the crop-relative center of cell 0."""
    shift = span * stride
    first_point = offset + start * stride
    if mode == "cover":
        # grid points centered in consecutive stride-wide cells of the image
        o0 = math.floor(stride // 2 - first_point)
        g0 = o0 + first_point
        n = int((length - 1 - g0) // stride) + 1 if g0 <= length - 1 else 0
        if n < 1:
            raise ValueError("image too small for a single feature point")
        tiles = []
        for j in range(-(-n // span)):
            tiles.append(AxisTile(o0 + j * shift, start, min(span, n - j * span), j * span))
        return tiles, g0, n
    if mode != "valid":
        raise ValueError(f"unknown tiling mode {mode!r}")
    tiles = []
    origin = 0
    while origin + crop <= length:
        tiles.append(AxisTile(origin, start, span, len(tiles) * span))
        origin += shift
    if not tiles:
        # smaller than one crop: zero-pad on the far side, keep in-image points only
        keep = [u for u in range(start, start + span) if first_point + (u - start) * stride <= length - 1]
        keep = [u for u in keep if first_point + (u - start) * stride >= 0]
        if not keep:
            raise ValueError("image too small for a single feature point")
        return [AxisTile(0, keep[0], len(keep), 0)], first_point + (keep[0] - start) * stride, len(keep)
    covered = len(tiles) * span
    last = ((length - crop) // stride) * stride  # clamp to the edge, staying on the lattice
    if last > tiles[-1].origin:
        # grid index of cell c in a crop at origin o is o/stride + c - start
        first_new = covered - last // stride
        tiles.append(AxisTile(last, start + first_new, span - first_new, covered))
        covered += span - first_new
    return tiles, first_point, covered


def plan_tiling(
    width: int, height: int, net: NetSpec, layer: int | str, mode: str = "cover"
) -> TilingPlan:
    """Crop placement for dense extraction of ``layer`` over a ``width x height`` image.

    ``mode="cover"`` lays the grid over the whole image, one point per
    stride-sized cell, letting border crops extend past the image (the
    overhang reads as zero). ``mode="valid"`` keeps crops inside the image,
    clamping the final crop on each axis to the image edge.
    """
    i = net.resolve(layer)
    crop = net.input_size
    if width < 1 or height < 1:
        raise ValueError("empty image")
    stride = layer_stride(net, i)
    start, span = retained_block(net, i)
    offset = _center_offset(net, i)
    xt, x0, cols = _axis_tiles(width, crop, offset, stride, start, span, mode)
    yt, y0, rows = _axis_tiles(height, crop, offset, stride, start, span, mode)
    return TilingPlan(
        layer=i,
        crop=crop,
        shift=span * stride,
        stride=stride,
        x_tiles=tuple(xt),
        y_tiles=tuple(yt),
        x0=_num(x0),
        y0=_num(y0),
        cols=cols,
        rows=rows,
    )


def _num(x) -> float:
    x = Fraction(x)
    return int(x) if x.denominator == 1 else float(x)


def prepare_image(image: np.ndarray, channels: int = 3) -> np.ndarray:
    """Scale to [0, 1], subtract the fixed channel mean, return ``(C, H, W)`` float32."""
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / 255.0
    else:
        img = img.astype(np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[2] != channels:
        if channels == 3 and img.shape[2] == 1:
            img = np.repeat(img, 3, axis=2)
        elif channels == 1:
            img = img.mean(axis=2, keepdims=True, dtype=np.float32)
        else:
            raise ValueError(f"cannot map {img.shape[2]} image channels to {channels}")
    return np.ascontiguousarray(img.transpose(2, 0, 1) - np.float32(CHANNEL_MEAN))


def cut_crop(prepared: np.ndarray, x: int, y: int, size: int) -> np.ndarray:
    """Square crop at ``(x, y)``; pixels outside the image are zero."""
    c, h, w = prepared.shape
    out = np.zeros((c, size, size), dtype=np.float32)
    x_lo, x_hi = max(x, 0), min(x + size, w)
    y_lo, y_hi = max(y, 0), min(y + size, h)
    if x_lo < x_hi and y_lo < y_hi:
        out[:, y_lo - y : y_hi - y, x_lo - x : x_hi - x] = prepared[:, y_lo:y_hi, x_lo:x_hi]
    return out


def extract_crop_features(
    net: NetSpec,
    weights: WeightSet,
    image: np.ndarray,
    crop_origin: tuple[int, int],
    layer: int | str,
    block: tuple[tuple[int, int], tuple[int, int]] | None = None,
    *,
    prepared: bool = False,
) -> FeatureGrid:
    """Features of the kept block of one crop, placed in image coordinates.

    ``block`` is ``((first_col, n_cols), (first_row, n_rows))`` in map cells
    and defaults to the network's retained block for ``layer``.
    """
    i = net.resolve(layer)
    if block is None:
        start, span = retained_block(net, i)
        block = ((start, span), (start, span))
    img = image if prepared else prepare_image(image, net.input_channels)
    x, y = crop_origin
    maps = forward_to_layer(net, weights, cut_crop(img, x, y, net.input_size), i)
    return _block_grid(net, i, maps, (x, y), block)


def _block_grid(net, i, maps, origin, block) -> FeatureGrid:
    (cu, nu), (cv, nv) = block
    stride = layer_stride(net, i)
    offset = _center_offset(net, i)
    data = maps[:, cv : cv + nv, cu : cu + nu].transpose(1, 2, 0)
    return FeatureGrid(
        _num(origin[0] + offset + cu * stride),
        _num(origin[1] + offset + cv * stride),
        stride,
        np.ascontiguousarray(data),
    )


def network_convolution(
    net: NetSpec,
    weights: WeightSet,
    image: np.ndarray,
    layer: int | str,
    *,
    mode: str = "cover",
    batch: int = 64,
    plan: TilingPlan | None = None,
) -> FeatureGrid:
    """Dense feature grid for the whole image from tiled crops."""
    i = net.resolve(layer)
    img = prepare_image(image, net.input_channels)
    h, w = img.shape[1:]
    if plan is None:
        plan = plan_tiling(w, h, net, i, mode)
    dim = net.channels(i)
    data = np.zeros((plan.rows, plan.cols, dim), dtype=np.float32)
    filled = np.zeros((plan.rows, plan.cols), dtype=bool)
    crops = plan.crops
    for lo in range(0, len(crops), batch):
        chunk = crops[lo : lo + batch]
        stack = np.stack([cut_crop(img, tx.origin, ty.origin, plan.crop) for tx, ty in chunk])
        maps = forward_to_layer(net, weights, stack, i)
        for (tx, ty), m in zip(chunk, maps):
            rows = slice(ty.index, ty.index + ty.count)
            cols = slice(tx.index, tx.index + tx.count)
            if filled[rows, cols].any():
                raise AssertionError("tiling wrote a grid point twice")
            data[rows, cols] = m[:, ty.first : ty.first + ty.count, tx.first : tx.first + tx.count].transpose(1, 2, 0)
            filled[rows, cols] = True
    if not filled.all():
        raise AssertionError("tiling left grid points unfilled")
    return FeatureGrid(plan.x0, plan.y0, plan.stride, data)


def feature_vector_at(grid: FeatureGrid, x: float, y: float) -> np.ndarray:
    """The stored vector at pixel ``(x, y)``; the query must hit a grid point."""
    u = (x - grid.x0) / grid.stride
    v = (y - grid.y0) / grid.stride
    if u != int(u) or v != int(v) or not (0 <= u < grid.cols and 0 <= v < grid.rows):
        raise KeyError(f"({x}, {y}) is not a grid point")
    return grid.data[int(v), int(u)]


# --------------------------------------------------------------------------- #
# grid files: "DNPG", u32 version, i32 x0, i32 y0, i32 stride, u32 cols, rows,
# D, then f32 data point by point (row-major over points).


def save_grid(grid: FeatureGrid, path: str | Path) -> None:
    if grid.x0 != int(grid.x0) or grid.y0 != int(grid.y0):
        raise GridFormatError("grid files store integer origins only")
    header = GRID_MAGIC + struct.pack(
        "<I3i3I", GRID_VERSION, int(grid.x0), int(grid.y0), grid.stride, grid.cols, grid.rows, grid.dim
    )
    Path(path).write_bytes(header + np.ascontiguousarray(grid.data, dtype="<f4").tobytes())


def load_grid(path: str | Path) -> FeatureGrid:
    data = Path(path).read_bytes()
    if data[:4] != GRID_MAGIC:
        raise GridFormatError(f"{path}: bad magic")
    if len(data) < 32:
        raise GridFormatError(f"{path}: truncated header")
    version, x0, y0, stride, cols, rows, dim = struct.unpack("<I3i3I", data[4:32])
    if version != GRID_VERSION:
        raise GridFormatError(f"{path}: unsupported version {version}")
    count = rows * cols * dim
    if len(data) != 32 + 4 * count:
        raise GridFormatError(f"{path}: expected {count} values")
    values = np.frombuffer(data, dtype="<f4", offset=32).reshape(rows, cols, dim)
    return FeatureGrid(x0, y0, stride, values.astype(np.float32))
