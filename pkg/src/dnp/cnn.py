"""Inference-only forward pass for :class:`~dnp.geometry.NetSpec` stacks.

Tensors are plain float32 numpy arrays shaped ``(C, H, W)`` or, for a batch
of crops, ``(N, C, H, W)``. Every operation accumulates in a fixed order that
does not depend on where a value sits in the map, so the same receptive field
produces bitwise-identical activations in any crop and in any batch.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import NetSpec

MAGIC = b"DNPW"
VERSION = 1
LRN_DEFAULTS = (2.0, 5, 1e-4, 0.75)


class WeightFileError(ValueError):
    pass


class BadMagicError(WeightFileError):
    pass


class TruncatedFileError(WeightFileError):
    pass


class ShapeMismatchError(WeightFileError):
    pass


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValueError(f"expected a (C,H,W) or (N,C,H,W) tensor, got shape {x.shape}")
    return x, False


def conv2d(
    x: np.ndarray, kernels: np.ndarray, bias: np.ndarray, stride: int = 1, pad: int = 0
) -> np.ndarray:
    """Cross-correlation with zero padding.

    Each output is ``bias + sum_c sum_a sum_b x[c, u*s+a, v*s+b] * k[o, c, a, b]``
    accumulated term by term in that (c, a, b) order, bias added last.
    """
    x, single = _batched(x)
    kernels = np.asarray(kernels, dtype=np.float32)
    bias = np.asarray(bias, dtype=np.float32)
    n, c, h, w = x.shape
    o, kc, kh, kw = kernels.shape
    if kc != c:
        raise ValueError(f"kernel expects {kc} input channels, tensor has {c}")
    if bias.shape != (o,):
        raise ValueError(f"bias shape {bias.shape} does not match {o} filters")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("convolution output would be empty")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, o, ho, wo), dtype=np.float32)
    term = np.empty_like(out)
    for ci in range(c):
        for a in range(kh):
            for b in range(kw):
                patch = x[:, ci, a : a + stride * (ho - 1) + 1 : stride, b : b + stride * (wo - 1) + 1 : stride]
                np.multiply(kernels[None, :, ci, a, b, None, None], patch[:, None], out=term)
                out += term
    out += bias[None, :, None, None]
    return out[0] if single else out


def maxpool(x: np.ndarray, window: int, stride: int, ceil_mode: bool = False) -> np.ndarray:
    """Max over each ``window x window`` block; truncated edge windows in ceil mode."""
    x, single = _batched(x)
    n, c, h, w = x.shape
    span_h, span_w = h - window, w - window
    if span_h < 0 or span_w < 0:
        raise ValueError("pooling window larger than the map")
    if ceil_mode:
        ho, wo = -(-span_h // stride) + 1, -(-span_w // stride) + 1
        need_h = (ho - 1) * stride + window
        need_w = (wo - 1) * stride + window
        x = np.pad(
            x, ((0, 0), (0, 0), (0, need_h - h), (0, need_w - w)), constant_values=-np.inf
        )
    else:
        ho, wo = span_h // stride + 1, span_w // stride + 1
    out = np.full((n, c, ho, wo), -np.inf, dtype=np.float32)
    for a in range(window):
        for b in range(window):
            np.maximum(
                out,
                x[:, :, a : a + stride * (ho - 1) + 1 : stride, b : b + stride * (wo - 1) + 1 : stride],
                out=out,
            )
    return out[0] if single else out


def lrn(x: np.ndarray, k: float = 2.0, n: int = 5, alpha: float = 1e-4, beta: float = 0.75) -> np.ndarray:
    """Across-channel local response normalization with a clamped window."""
    x, single = _batched(x)
    channels = x.shape[1]
    if n % 2 != 1 or n > channels:
        raise ValueError(f"window n={n} must be odd and at most {channels}")
    sq = x * x
    total = np.zeros_like(x)
    half = n // 2
    for d in range(-half, half + 1):
        lo, hi = max(0, -d), min(channels, channels - d)
        total[:, lo:hi] += sq[:, lo + d : hi + d]
    scale = np.float32(k) + np.float32(alpha) * total
    out = x / np.power(scale, np.float32(beta), dtype=np.float32)
    return out[0] if single else out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, np.float32(0))


@dataclass
class WeightSet:
    kernels: list[np.ndarray]
    biases: list[np.ndarray]
    lrn: tuple[float, int, float, float] = field(default=LRN_DEFAULTS)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, WeightSet):
            return NotImplemented
        return (
            len(self.kernels) == len(other.kernels)
            and all(np.array_equal(a, b) for a, b in zip(self.kernels, other.kernels))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
            and tuple(self.lrn) == tuple(other.lrn)
        )

    def check(self, net: NetSpec) -> None:
        convs = [l for l in net.layers if l.kind == "conv"]
        if len(convs) != len(self.kernels):
            raise ShapeMismatchError(
                f"network has {len(convs)} conv layers, weights have {len(self.kernels)}"
            )
        for n, (layer, k, b) in enumerate(zip(convs, self.kernels, self.biases), start=1):
            want = (layer.out_channels, layer.in_channels, layer.window, layer.window)
            if k.shape != want or b.shape != (layer.out_channels,):
                raise ShapeMismatchError(f"conv layer {n}: expected kernel {want}, got {k.shape}")


def init_weights(net: NetSpec, seed: int, std: float = 0.01) -> WeightSet:
    """Gaussian kernels and zero biases, reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    kernels, biases = [], []
    for layer in net.layers:
        if layer.kind == "conv":
            shape = (layer.out_channels, layer.in_channels, layer.window, layer.window)
            kernels.append(rng.normal(0.0, std, size=shape).astype(np.float32))
            biases.append(np.zeros(layer.out_channels, dtype=np.float32))
    return WeightSet(kernels, biases)


def forward_to_layer(net: NetSpec, weights: WeightSet, crop: np.ndarray, layer: int | str) -> np.ndarray:
    """Run ``crop`` (or a batch of crops) through the stack up to active layer ``layer``.

    The returned tensor is taken after any ReLU/normalization layers that
    directly follow the requested layer.
    """
    i = net.resolve(layer)
    x = np.asarray(crop, dtype=np.float32)
    if x.shape[-3:] != (net.input_channels, net.input_size, net.input_size):
        raise ValueError(
            f"crop shape {x.shape[-3:]} != ({net.input_channels}, {net.input_size}, {net.input_size})"
        )
    conv_idx = 0
    for spec in net.layers[: net.output_position(i) + 1]:
        if spec.kind == "conv":
            x = conv2d(x, weights.kernels[conv_idx], weights.biases[conv_idx], spec.stride, spec.padding)
            conv_idx += 1
        elif spec.kind == "pool":
            x = maxpool(x, spec.window, spec.stride, spec.ceil_mode)
        elif spec.kind == "relu":
            x = relu(x)
        else:
            x = lrn(x, *weights.lrn)
    return x


# --------------------------------------------------------------------------- #
# weight files: "DNPW", u32 version, u32 conv count, then per conv layer four
# u32 dims, f32 kernel, f32 bias; finally k, n, alpha, beta as f64.


def save_weights(weights: WeightSet, path: str | Path) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(weights.kernels))]
    for k, b in zip(weights.kernels, weights.biases):
        parts.append(struct.pack("<4I", *k.shape))
        parts.append(np.ascontiguousarray(k, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    parts.append(struct.pack("<4d", *map(float, weights.lrn)))
    Path(path).write_bytes(b"".join(parts))


def load_weights(path: str | Path, net: NetSpec | None = None) -> WeightSet:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}")
    pos = 4

    def take(nbytes: int) -> bytes:
        nonlocal pos
        if pos + nbytes > len(data):
            raise TruncatedFileError(f"{path}: truncated at byte {len(data)}")
        chunk = data[pos : pos + nbytes]
        pos += nbytes
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise WeightFileError(f"{path}: unsupported version {version}")
    kernels, biases = [], []
    for _ in range(count):
        dims = struct.unpack("<4I", take(16))
        size = int(np.prod(dims))
        kernels.append(np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32))
        biases.append(np.frombuffer(take(4 * dims[0]), dtype="<f4").astype(np.float32))
    k, n, alpha, beta = struct.unpack("<4d", take(32))
    if pos != len(data):
        raise WeightFileError(f"{path}: {len(data) - pos} trailing bytes")
    weights = WeightSet(kernels, biases, (k, int(n), alpha, beta))
    if net is not None:
        weights.check(net)
    return weights
