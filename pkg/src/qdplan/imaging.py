"""Minimal PNG heatmaps (zlib + struct, no plotting dependency)."""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

# a few anchor colours of a perceptually ordered dark-blue -> yellow ramp
_RAMP = np.array([
    [68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37],
], dtype=float)
_EMPTY = (40, 40, 40)


def _chunk(tag: bytes, data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)


def write_png(path: str | Path, rgb: np.ndarray) -> Path:
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) array")
    h, w, _ = rgb.shape
    raw = b"".join(b"\x00" + rgb[r].tobytes() for r in range(h))
    png = (b"\x89PNG\r\n\x1a\n"
           + _chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0))
           + _chunk(b"IDAT", zlib.compress(raw, 9))
           + _chunk(b"IEND", b""))
    path = Path(path)
    path.write_bytes(png)
    return path


def read_png(path: str | Path) -> np.ndarray:
    """Decode PNGs written by :func:`write_png` (8-bit RGB, filter 0 only)."""
    data = Path(path).read_bytes()
    if data[:8] != b"\x89PNG\r\n\x1a\n":
        raise ValueError("not a PNG file")
    k, idat, w, h = 8, b"", 0, 0
    while k < len(data):
        (n,) = struct.unpack(">I", data[k:k + 4])
        tag, body = data[k + 4:k + 8], data[k + 8:k + 8 + n]
        if tag == b"IHDR":
            w, h = struct.unpack(">II", body[:8])
        elif tag == b"IDAT":
            idat += body
        k += 12 + n
    raw = np.frombuffer(zlib.decompress(idat), dtype=np.uint8).reshape(h, 1 + 3 * w)
    return raw[:, 1:].reshape(h, w, 3).copy()


def colorize(grid: np.ndarray, vmin: float | None = None, vmax: float | None = None) -> np.ndarray:
    """Map an (nx, ny) grid to an image with y pointing up; NaN cells are dark gray."""
    g = np.asarray(grid, dtype=float)
    finite = np.isfinite(g)
    lo = vmin if vmin is not None else (g[finite].min() if finite.any() else 0.0)
    hi = vmax if vmax is not None else (g[finite].max() if finite.any() else 1.0)
    t = np.zeros_like(g) if hi <= lo else np.clip((g - lo) / (hi - lo), 0.0, 1.0)
    t = np.where(finite, t, 0.0)
    pos = t * (len(_RAMP) - 1)
    i0 = np.minimum(pos.astype(int), len(_RAMP) - 2)
    frac = (pos - i0)[..., None]
    rgb = _RAMP[i0] * (1 - frac) + _RAMP[i0 + 1] * frac
    rgb[~finite] = _EMPTY
    # (x, y) grid -> image rows top-to-bottom = decreasing y
    return np.round(rgb.transpose(1, 0, 2)[::-1]).astype(np.uint8)


def write_heatmap(path: str | Path, grid: np.ndarray, scale: int = 8,
                  vmin: float | None = None, vmax: float | None = None) -> Path:
    img = colorize(grid, vmin, vmax)
    img = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    return write_png(path, img)
