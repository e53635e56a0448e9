"""Binary (P5) PGM reading and writing for 8-bit grayscale rasters."""
from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np


def _tokens(data: bytes, count: int):
    """Yield the first ``count`` whitespace-separated header tokens and the body offset."""
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    """Read a P5 PGM with maxval <= 255 into a ``(height, width)`` uint8 array."""
    data = Path(path).read_bytes()
    tokens, offset = _tokens(data, 4)
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    if width < 1 or height < 1:
        raise ValueError(f"{path}: bad extents {width}x{height}")
    if not 0 < maxval <= 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    body = data[offset:offset + width * height]
    if len(body) != width * height:
        raise ValueError(f"{path}: raster truncated ({len(body)} of {width * height} bytes)")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width).copy()


def write_pgm(path: Union[str, Path], pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValueError(f"expected a 2-D raster, got shape {pixels.shape}")
    if pixels.dtype != np.uint8:
        if pixels.min() < 0 or pixels.max() > 255:
            raise ValueError("pixel values must lie in 0..255")
        pixels = pixels.astype(np.uint8)
    height, width = pixels.shape
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(pixels).tobytes())
