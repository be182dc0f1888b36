"""Grayscale montages of filters and feature maps, written as binary PGM."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .convengine import ScalePyramidResponse


def pgm_bytes(image: np.ndarray) -> bytes:
    """Encode a uint8 (H, W) array as a binary P5 PGM."""
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 2:
        raise ValueError("PGM encoder expects a 2D uint8 array")
    h, w = image.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes()


def read_pgm(path) -> np.ndarray:
    """Decode a binary P5 PGM (maxval <= 255) into floats in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != b"P5" or maxval > 255:
        raise ValueError(f"{path}: only 8-bit binary PGM (P5) is supported")
    pix = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1)
    return pix.reshape(h, w).astype(float) / maxval


def _to_gray(tile: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi > lo:
        scaled = (tile - lo) / (hi - lo) * 255.0
    else:
        scaled = np.full(tile.shape, 127.5)  # constant tile -> mid gray
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def montage(grids: Sequence[np.ndarray], layout: tuple[int, int], normalize: str = "per-tile",
            separator: int = 1) -> np.ndarray:
    """Tile real maps row-major into one uint8 image with black separators.

    Tiles smaller than the largest one are centered in their cell.
    """
    if not grids:
        raise ValueError("need at least one grid to render")
    rows, cols = layout
    if rows * cols < len(grids):
        raise ValueError(f"layout {rows}x{cols} cannot hold {len(grids)} tiles")
    if normalize not in ("per-tile", "global"):
        raise ValueError(f"normalize must be 'per-tile' or 'global', got {normalize!r}")
    grids = [np.asarray(g, dtype=float) for g in grids]
    ch = max(g.shape[0] for g in grids)
    cw = max(g.shape[1] for g in grids)
    out = np.zeros((rows * ch + (rows - 1) * separator, cols * cw + (cols - 1) * separator), dtype=np.uint8)
    glo = min(g.min() for g in grids)
    ghi = max(g.max() for g in grids)
    for n, g in enumerate(grids):
        r, c = divmod(n, cols)
        lo, hi = (g.min(), g.max()) if normalize == "per-tile" else (glo, ghi)
        top = r * (ch + separator) + (ch - g.shape[0]) // 2
        left = c * (cw + separator) + (cw - g.shape[1]) // 2
        out[top:top + g.shape[0], left:left + g.shape[1]] = _to_gray(g, lo, hi)
    return out


def render_grid(grids: Sequence[np.ndarray], layout: tuple[int, int], normalize: str = "per-tile") -> bytes:
    return pgm_bytes(montage(grids, layout, normalize))


def average_activation(responses: Sequence[ScalePyramidResponse]) -> np.ndarray:
    """Mean of the pooled maps over channels."""
    if not responses:
        raise ValueError("need at least one response")
    shape = responses[0].pooled.shape
    for r in responses:
        if r.pooled.shape != shape:
            raise ValueError(f"pooled map shapes differ: {r.pooled.shape} vs {shape}")
    return np.mean([r.pooled for r in responses], axis=0)


def write_pgm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(pgm_bytes(image))
