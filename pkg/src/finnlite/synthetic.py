"""Synthetic vineyard-like data: red-purple blobs (grape) against green foliage noise (no_grape)."""
from __future__ import annotations

import numpy as np

from .tiles import TILE


def _foliage(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = rng.uniform([20, 70, 10], [80, 150, 60], size=3)
    noise = rng.normal(0, 18, size=(h, w, 3))
    return np.clip(base + noise, 0, 255)


def _blob(img: np.ndarray, rng: np.random.Generator, cy: float, cx: float, radius: float) -> None:
    h, w = img.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    color = rng.uniform([90, 0, 40], [170, 30, 110], size=3)
    img[mask] = np.clip(color + rng.normal(0, 10, size=(int(mask.sum()), 3)), 0, 255)


def make_tiles(n: int, seed: int = 0):
    """``n`` 32x32 RGB tiles (NHWC uint8) and 0/1 labels, alternating classes.

    A grape tile carries one disc of radius 10 to 13 pixels centred well
    inside the tile, so at least a quarter of its pixels are red-purple.
    Background tiles are pure foliage noise.
    """
    rng = np.random.default_rng(seed)
    x = np.empty((n, TILE, TILE, 3), dtype=np.uint8)
    y = np.arange(n, dtype=np.int64) % 2 == 0
    for i in range(n):
        img = _foliage(rng, TILE, TILE)
        if y[i]:
            _blob(img, rng, rng.uniform(11, 21), rng.uniform(11, 21), rng.uniform(10, 13))
        x[i] = img.astype(np.uint8)
    return x, y.astype(np.int64)


def make_frame(height: int, width: int, seed: int = 0, n_blobs: int = 40) -> np.ndarray:
    """A foliage frame with scattered grape-like blobs."""
    rng = np.random.default_rng(seed)
    img = _foliage(rng, height, width)
    for _ in range(n_blobs):
        _blob(img, rng, rng.uniform(0, height), rng.uniform(0, width), rng.uniform(6, 20))
    return img.astype(np.uint8)


def make_frames(n_frames: int, height: int = 256, width: int = 256, seed: int = 0, n_blobs: int = 12):
    """``(frame_id, frame)`` pairs in acquisition order."""
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2 ** 31, size=n_frames)
    return [(f"frame{i:04d}", make_frame(height, width, int(s), n_blobs)) for i, s in enumerate(seeds)]
