"""Binary PPM (P6, maxval 255) reading and writing.

Images are returned channel-first, ``(3, H, W)`` uint8, matching the rest of
the package.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import FormatError


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    out: list[bytes] = []
    pos = 0
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise FormatError("truncated PPM header")
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        out.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return out, pos + 1


def decode_ppm(buf: bytes) -> np.ndarray:
    (magic, w, h, maxval), offset = _tokens(buf, 4)
    if magic != b"P6":
        raise FormatError(f"not a binary PPM (magic {magic!r})")
    try:
        width, height, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise FormatError("malformed PPM header") from exc
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    need = width * height * 3
    raster = buf[offset:offset + need]
    if len(raster) != need:
        raise FormatError(f"PPM raster truncated: expected {need} bytes, got {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3).transpose(2, 0, 1).copy()


def encode_ppm(image) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3 or image.dtype != np.uint8:
        raise FormatError(f"PPM needs a (3,H,W) uint8 image, got {image.dtype} {image.shape}")
    _, h, w = image.shape
    return b"P6\n%d %d\n255\n" % (w, h) + image.transpose(1, 2, 0).tobytes()


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def write_ppm(path: str | os.PathLike, image) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(image))
