"""Minimal reader/writer for 8-bit portable graymaps (P5 binary, P2 ascii)."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np


class PGMError(ValueError):
    pass


_TOKEN = re.compile(rb"(#[^\n\r]*[\r\n]?)|(\S+)")


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Return the first ``count`` header tokens and the offset just past them."""
    tokens = []
    pos = 0
    while len(tokens) < count:
        m = _TOKEN.search(data, pos)
        if m is None:
            raise PGMError("truncated PGM header")
        pos = m.end()
        if m.group(2) is not None:
            tokens.append(m.group(2))
    return tokens, pos


def decode_pgm(data: bytes) -> np.ndarray:
    """Decode PGM bytes into a uint8 array of shape (height, width)."""
    if data[:2] not in (b"P5", b"P2"):
        raise PGMError("not a PGM file (expected P5 or P2 magic)")
    tokens, pos = _header_tokens(data, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise PGMError(f"malformed PGM header: {tokens!r}") from None
    if width < 1 or height < 1:
        raise PGMError(f"invalid PGM dimensions {width}x{height}")
    if not 1 <= maxval <= 255:
        raise PGMError(f"only 8-bit graymaps are supported (maxval {maxval})")
    if tokens[0] == b"P5":
        raster = data[pos + 1:pos + 1 + width * height]  # single whitespace after maxval
        if len(raster) != width * height:
            raise PGMError(f"PGM raster truncated: {len(raster)} of {width * height} bytes")
        pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    else:
        values = [m.group(2) for m in _TOKEN.finditer(data, pos) if m.group(2) is not None]
        if len(values) < width * height:
            raise PGMError(f"PGM raster truncated: {len(values)} of {width * height} samples")
        try:
            pixels = np.array([int(v) for v in values[:width * height]], dtype=np.int64)
        except ValueError:
            raise PGMError("non-numeric sample in ASCII PGM raster") from None
        pixels = pixels.reshape(height, width)
    if pixels.max(initial=0) > maxval:
        raise PGMError("PGM sample exceeds maxval")
    if maxval != 255:
        pixels = np.rint(pixels.astype(np.float64) * (255.0 / maxval))
    return pixels.astype(np.uint8)


def encode_pgm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise PGMError("expected a 2-D uint8 array")
    h, w = pixels.shape
    return b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def read_pgm(path: str | Path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(pixels))
