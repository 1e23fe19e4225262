"""Binary PGM (P5) and PPM (P6) reading and writing, 8-bit only."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _tokens(data: bytes, count: int, pos: int) -> tuple[list[int], int]:
    out = []
    while len(out) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated header")
        try:
            out.append(int(data[start:pos]))
        except ValueError as exc:
            raise ImageFormatError(f"bad header token {data[start:pos]!r}") from exc
    return out, pos + 1


def read_image(path: str | Path) -> np.ndarray:
    """Return ``(H, W)`` for P5 or ``(H, W, 3)`` for P6 as uint8."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: not a binary PGM/PPM file")
    (width, height, maxval), pos = _tokens(data, 3, 2)
    if not 0 < maxval < 256:
        raise ImageFormatError(f"{path}: only 8-bit images are supported")
    channels = 3 if magic == b"P6" else 1
    size = width * height * channels
    if len(data) - pos < size:
        raise ImageFormatError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(data, dtype=np.uint8, count=size, offset=pos)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return pixels.reshape(shape).copy()


def write_image(path: str | Path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    if image.ndim == 2:
        magic = b"P5"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    else:
        raise ImageFormatError(f"cannot write image of shape {image.shape}")
    header = magic + f"\n{image.shape[1]} {image.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + np.ascontiguousarray(image).tobytes())
