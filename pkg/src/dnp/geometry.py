"""Receptive-field geometry for stacks of convolution and pooling layers.

Layer indices used throughout the package are 1-based positions among the
geometry-active layers (conv and pool). ReLU and normalization layers are
spatially neutral and never counted, so index 7 of the paper network is conv5
no matter how many rectification layers the stack carries.

Two coordinate conventions are supported:

* ``"paper"`` reproduces the published location table. Its base case places
  the first-layer center at ``(W_1 + 1) / 2`` (1-based) and ignores the
  first layer's padding.
* ``"exact"`` applies padding at every layer, including the first, and is the
  convention used for all pixel bookkeeping in dense extraction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable

ACTIVE_KINDS = ("conv", "pool")
NEUTRAL_KINDS = ("norm", "relu")
KINDS = ACTIVE_KINDS + NEUTRAL_KINDS


class NetSpecError(ValueError):
    """Raised for malformed or inconsistent network descriptions."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    window: int = 1
    stride: int = 1
    padding: int = 0
    in_channels: int = 0
    out_channels: int = 0
    ceil_mode: bool = False

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise NetSpecError(f"unknown layer kind {self.kind!r}")
        if self.window < 1 or self.stride < 1 or self.padding < 0:
            raise NetSpecError(f"bad window/stride/padding in {self}")
        if self.kind in NEUTRAL_KINDS and (self.window, self.stride, self.padding) != (1, 1, 0):
            raise NetSpecError(f"{self.kind} layers must have W=1, s=1, P=0")
        if self.kind == "pool" and self.in_channels != self.out_channels:
            raise NetSpecError("pool layers must keep the channel count")
        if self.ceil_mode and (self.kind != "pool" or self.padding):
            raise NetSpecError("ceil_mode is only defined for unpadded pool layers")

    @property
    def active(self) -> bool:
        return self.kind in ACTIVE_KINDS

    def out_size(self, in_size: int) -> int:
        span = in_size + 2 * self.padding - self.window
        if self.ceil_mode and span >= 0:
            # the last window may hang over the right edge; it is truncated, not padded
            return -(-span // self.stride) + 1
        return span // self.stride + 1


@dataclass(frozen=True)
class NetSpec:
    """An ordered layer stack plus its input geometry.

    ``retain`` optionally overrides the number of cells kept per axis by dense
    extraction at a given active layer (``{layer_index: span}``).
    """

    input_size: int
    input_channels: int
    layers: tuple[LayerSpec, ...]
    retain: dict[int, int] = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise NetSpecError("network has no layers")
        channels = self.input_channels
        size = self.input_size
        for n, layer in enumerate(self.layers, start=1):
            if layer.kind == "conv":
                if layer.in_channels != channels:
                    raise NetSpecError(
                        f"layer {n} expects {layer.in_channels} channels, gets {channels}"
                    )
                channels = layer.out_channels
            elif layer.in_channels not in (0, channels) or layer.out_channels not in (0, channels):
                raise NetSpecError(f"layer {n} ({layer.kind}) must pass {channels} channels through")
            size = layer.out_size(size)
            if size < 1:
                raise NetSpecError(f"layer {n} ({layer.kind}) produces an empty map")
        for i in self.retain:
            self.active_position(i)

    @property
    def active_layers(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.active]

    @property
    def n_active(self) -> int:
        return len(self.active_layers)

    def active_position(self, i: int) -> int:
        """Position in ``layers`` (0-based) of the i-th active layer."""
        if not 1 <= i <= self.n_active:
            raise IndexError(f"layer index {i} outside 1..{self.n_active}")
        seen = 0
        for pos, layer in enumerate(self.layers):
            if layer.active:
                seen += 1
                if seen == i:
                    return pos
        raise AssertionError("unreachable")

    def output_position(self, i: int) -> int:
        """Last position (0-based, inclusive) whose output represents layer i.

        Trailing neutral layers (ReLU, normalization) belong to the active
        layer they follow.
        """
        pos = self.active_position(i)
        while pos + 1 < len(self.layers) and not self.layers[pos + 1].active:
            pos += 1
        return pos

    def layer_names(self) -> list[str]:
        counts = {"conv": 0, "pool": 0}
        names = []
        for layer in self.active_layers:
            counts[layer.kind] += 1
            names.append(f"{layer.kind}{counts[layer.kind]}")
        return names

    def resolve(self, layer: int | str) -> int:
        """Accept a 1-based index or a name like ``"conv5"``."""
        if isinstance(layer, str):
            if layer.isdigit():
                layer = int(layer)
            else:
                names = self.layer_names()
                if layer not in names:
                    raise IndexError(f"no layer named {layer!r}; have {names}")
                return names.index(layer) + 1
        self.active_position(layer)
        return layer

    def map_sizes(self) -> list[int]:
        """Output side length of every active layer."""
        size = self.input_size
        sizes = []
        for layer in self.layers:
            size = layer.out_size(size)
            if layer.active:
                sizes.append(size)
        return sizes

    def channels(self, i: int) -> int:
        channels = self.input_channels
        for layer in self.layers[: self.output_position(i) + 1]:
            if layer.kind == "conv":
                channels = layer.out_channels
        return channels


@dataclass(frozen=True)
class GeometryRow:
    layer_index: int
    name: str
    window: int
    stride: int
    padding: int
    pixel_stride: int
    top_left: Fraction
    receptive_field: int
    out_size: int


def _check_index(net: NetSpec, i: int | str) -> int:
    """Resolve a layer name and check the 1-based index."""
    if isinstance(i, str):
        return net.resolve(i)
    if not 1 <= i <= net.n_active:
        raise IndexError(f"layer index {i} outside 1..{net.n_active}")
    return i


def layer_stride(net: NetSpec, i: int | str) -> int:
    """Pixel distance between adjacent feature centers of layer i."""
    i = _check_index(net, i)
    s = 1
    for layer in net.active_layers[:i]:
        s *= layer.stride
    return s


def top_left_center(
    net: NetSpec, i: int | str, *, convention: str = "paper", one_based: bool = True
) -> Fraction:
    """Pixel coordinate of the center of cell (0, 0) at layer i."""
    i = _check_index(net, i)
    if convention not in ("paper", "exact"):
        raise ValueError(f"unknown convention {convention!r}")
    layers = net.active_layers
    first = layers[0]
    x = Fraction(first.window - 1, 2)
    if convention == "exact":
        x -= first.padding
    s = first.stride
    for layer in layers[1:i]:
        x += (Fraction(layer.window - 1, 2) - layer.padding) * s
        s *= layer.stride
    return x + 1 if one_based else x


def feature_center(
    net: NetSpec,
    i: int | str,
    u: int,
    v: int,
    *,
    convention: str = "paper",
    one_based: bool = True,
) -> tuple[Fraction, Fraction]:
    i = _check_index(net, i)
    size = net.map_sizes()[i - 1]
    if not (0 <= u < size and 0 <= v < size):
        raise IndexError(f"cell ({u}, {v}) outside the {size}x{size} map of layer {i}")
    x0 = top_left_center(net, i, convention=convention, one_based=one_based)
    s = layer_stride(net, i)
    return x0 + u * s, x0 + v * s


def receptive_field_extent(net: NetSpec, i: int | str) -> int:
    """Side length in pixels of the input region seen by one layer-i cell."""
    i = _check_index(net, i)
    rf, s = 1, 1
    for layer in net.active_layers[:i]:
        rf += (layer.window - 1) * s
        s *= layer.stride
    return rf


def geometry_table(net: NetSpec, *, convention: str = "paper") -> list[GeometryRow]:
    names = net.layer_names()
    sizes = net.map_sizes()
    rows = []
    for i, layer in enumerate(net.active_layers, start=1):
        rows.append(
            GeometryRow(
                layer_index=i,
                name=names[i - 1],
                window=layer.window,
                stride=layer.stride,
                padding=layer.padding,
                pixel_stride=layer_stride(net, i),
                top_left=top_left_center(net, i, convention=convention),
                receptive_field=receptive_field_extent(net, i),
                out_size=sizes[i - 1],
            )
        )
    return rows


def clean_ranges(net: NetSpec) -> list[tuple[int, int]]:
    """Per active layer, the inclusive cell range untouched by zero padding.

    A cell is clean when every input cell its window reads is a real (not
    padded) cell of the previous map and is itself clean. Ranges are empty
    when ``lo > hi``.
    """
    lo, hi = 0, net.input_size - 1
    size = net.input_size
    out = []
    for layer in net.layers:
        if not layer.active:
            continue
        n = layer.out_size(size)
        # cell u reads previous cells u*s - P .. u*s - P + W - 1
        new_lo = max(0, -((layer.padding + lo) // -layer.stride))
        new_hi = min(n - 1, (hi + layer.padding - layer.window + 1) // layer.stride)
        lo, hi, size = new_lo, new_hi, n
        out.append((lo, hi))
    return out


def interior_cells(net: NetSpec, i: int | str) -> set[tuple[int, int]]:
    """Cells of layer i whose value involves no zero padding at any layer."""
    i = _check_index(net, i)
    lo, hi = clean_ranges(net)[i - 1]
    return {(u, v) for u in range(lo, hi + 1) for v in range(lo, hi + 1)}


def retained_block(net: NetSpec, i: int | str) -> tuple[int, int]:
    """Start cell and span per axis kept by dense extraction at layer i.

    Uses the network's ``retain`` override when present (centered on the
    map), otherwise the largest block of clean cells centered on the map.
    """
    i = _check_index(net, i)
    n = net.map_sizes()[i - 1]
    if i in net.retain:
        span = net.retain[i]
        if not 1 <= span <= n:
            raise NetSpecError(f"retain span {span} does not fit a map of {n}")
        return (n - span) // 2, span
    lo, hi = clean_ranges(net)[i - 1]
    if lo > hi:
        raise NetSpecError(f"layer {i} has no padding-free cells")
    # centered blocks share the map center; trim to the clean range symmetrically
    left = lo
    right = n - 1 - hi
    margin = max(left, right)
    span = n - 2 * margin
    if span < 1:
        # map center not clean on both sides; fall back to the clean range itself
        return lo, hi - lo + 1
    return margin, span


# --------------------------------------------------------------------------- #
# NetSpec text format


def parse_netspec(text: str) -> NetSpec:
    """Parse the line-oriented ``kind W s P in out`` format.

    A pool line may end with ``ceil`` to select ceiling-mode output sizes.
    Optional directives: ``input <size> [<channels>]`` and
    ``retain <layer> <span>``. ``#`` starts a comment.
    """
    layers: list[LayerSpec] = []
    input_size, input_channels = 224, None
    retain_raw: list[tuple[str, int]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "input":
                input_size = int(parts[1])
                if len(parts) > 2:
                    input_channels = int(parts[2])
            elif parts[0] == "retain":
                retain_raw.append((parts[1], int(parts[2])))
            else:
                kind = parts[0]
                ceil = parts[-1] == "ceil"
                nums = [int(p) for p in parts[1 : len(parts) - ceil]]
                if len(nums) != 5:
                    raise NetSpecError(f"line {lineno}: expected 'kind W s P in out'")
                layers.append(LayerSpec(kind, *nums, ceil_mode=ceil))
        except (IndexError, ValueError) as exc:
            if isinstance(exc, NetSpecError):
                raise
            raise NetSpecError(f"line {lineno}: cannot parse {raw!r}") from exc
    if not layers:
        raise NetSpecError("no layers")
    if input_channels is None:
        input_channels = next((l.in_channels for l in layers if l.kind == "conv"), 3)
    net = NetSpec(input_size, input_channels, tuple(layers))
    if retain_raw:
        retain = {net.resolve(name): span for name, span in retain_raw}
        net = NetSpec(input_size, input_channels, tuple(layers), retain)
    return net


def format_netspec(net: NetSpec) -> str:
    lines = [f"input {net.input_size} {net.input_channels}"]
    for l in net.layers:
        line = f"{l.kind} {l.window} {l.stride} {l.padding} {l.in_channels} {l.out_channels}"
        lines.append(line + " ceil" if l.ceil_mode else line)
    names = net.layer_names()
    for i, span in sorted(net.retain.items()):
        lines.append(f"retain {names[i - 1]} {span}")
    return "\n".join(lines) + "\n"


def load_netspec(path: str | Path) -> NetSpec:
    return parse_netspec(Path(path).read_text())


def _stack(input_size: int, input_channels: int, rows: Iterable[tuple], retain=None) -> NetSpec:
    channels = input_channels
    layers = []
    for row in rows:
        kind = row[0]
        if kind == "conv":
            _, w, s, p, out = row
            layers.append(LayerSpec("conv", w, s, p, channels, out))
            channels = out
        elif kind == "pool":
            _, w, s, *mode = row
            layers.append(LayerSpec("pool", w, s, 0, channels, channels, ceil_mode=bool(mode)))
        else:
            layers.append(LayerSpec(kind, 1, 1, 0, channels, channels))
    return NetSpec(input_size, input_channels, tuple(layers), dict(retain or {}))


def paper_net() -> NetSpec:
    """Five conv layers with max-pooling and contrast normalization, 224 input.

    Pooling uses ceiling-mode sizes so a 224 crop yields 13x13 conv5 maps
    with the published window/stride/padding values. Dense extraction at
    conv5 keeps the central 5x5 block as published, even though only the
    central 3x3 cells are strictly padding-free.
    """
    return _stack(
        224,
        3,
        [
            ("conv", 11, 4, 1, 96), ("relu",), ("norm",), ("pool", 3, 2, "ceil"),
            ("conv", 5, 1, 2, 256), ("relu",), ("norm",), ("pool", 3, 2, "ceil"),
            ("conv", 3, 1, 1, 384), ("relu",),
            ("conv", 3, 1, 1, 384), ("relu",),
            ("conv", 3, 1, 1, 256), ("relu",),
            ("pool", 3, 2, "ceil"),
        ],
        retain={7: 5},
    )


def tiny_net() -> NetSpec:
    """Three conv and two pool layers on 64-pixel crops, 32-dim top layer."""
    return _stack(
        64,
        3,
        [
            ("conv", 5, 2, 0, 16), ("relu",), ("pool", 2, 2),
            ("conv", 3, 1, 1, 32), ("relu",), ("norm",), ("pool", 3, 2),
            ("conv", 3, 1, 1, 32), ("relu",),
        ],
    )


PRESETS = {"paper": paper_net, "tiny": tiny_net}


def get_net(name_or_path: str | Path) -> NetSpec:
    """Load a preset by name or a NetSpec file by path."""
    if str(name_or_path) in PRESETS:
        return PRESETS[str(name_or_path)]()
    return load_netspec(name_or_path)
