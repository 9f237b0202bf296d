"""Procedurally generated pristine images for tests and demos."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from .imaging import save_image

FIXTURE_SIZE = 128
_STYLES = ("gradient", "checkerboard", "filtered_noise", "synthetic_photo")


def _gradient(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    angle = rng.uniform(0, 2 * np.pi)
    t = np.cos(angle) * xx + np.sin(angle) * yy
    t = (t - t.min()) / (np.ptp(t) + 1e-12)
    c0, c1 = rng.uniform(0.1, 0.9, size=(2, 3))
    img = c0 + t[..., None] * (c1 - c0)
    # a few soft blobs so the image has edges for the gradient-based agents
    for _ in range(3):
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        r = rng.uniform(0.08, 0.2)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        img = img + blob[..., None] * rng.uniform(-0.3, 0.3, size=3)
    return img


def _checkerboard(rng, h, w):
    period = int(rng.integers(8, 24))
    yy, xx = np.mgrid[0:h, 0:w]
    board = ((yy // period + xx // period) % 2).astype(np.float64)
    board = ndimage.gaussian_filter(board, 0.7)
    c0, c1 = rng.uniform(0.15, 0.85, size=(2, 3))
    shade = 0.85 + 0.15 * (yy / h)
    return (c0 + board[..., None] * (c1 - c0)) * shade[..., None]


def _filtered_noise(rng, h, w):
    layers = []
    for c in range(3):
        n = rng.normal(size=(h, w))
        n = ndimage.gaussian_filter(n, rng.uniform(1.0, 2.5)) + 0.5 * ndimage.gaussian_filter(n, 6.0)
        n = (n - n.mean()) / (n.std() + 1e-12)
        layers.append(n)
    base = rng.uniform(0.35, 0.65, size=3)
    return base + 0.12 * np.stack(layers, axis=-1)


def _synthetic_photo(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sky = rng.uniform(0.4, 0.9, size=3)
    ground = rng.uniform(0.1, 0.5, size=3)
    horizon = rng.uniform(0.35, 0.65) * h
    img = np.where((yy < horizon)[..., None], sky, ground).astype(np.float64)
    img *= (0.8 + 0.2 * (1 - yy / h))[..., None]
    texture = ndimage.gaussian_filter(rng.normal(size=(h, w)), 1.0)
    img += 0.04 * texture[..., None] * (yy >= horizon)[..., None]
    for _ in range(int(rng.integers(3, 7))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(6, 26, size=2)
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        color = rng.uniform(0.05, 0.95, size=3)
        light = 1.0 - 0.35 * np.clip(((yy - cy) / ry + (xx - cx) / rx) / 2, -1, 1)
        img = np.where(mask[..., None], color * light[..., None], img)
    return ndimage.gaussian_filter(img, (0.6, 0.6, 0))


def make_pristine(index: int, seed: int = 0, size: int = FIXTURE_SIZE) -> np.ndarray:
    """Deterministic pristine image number ``index``; styles cycle every four."""
    rng = np.random.default_rng([seed, index])
    style = _STYLES[index % len(_STYLES)]
    img = globals()[f"_{style}"](rng, size, size)
    return np.clip(img, 0.0, 1.0)


def write_fixture(out_dir, n: int = 8, seed: int = 0, size: int = FIXTURE_SIZE) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for i in range(n):
        p = out_dir / f"pristine_{i:02d}_{_STYLES[i % len(_STYLES)]}.png"
        save_image(make_pristine(i, seed=seed, size=size), p)
        paths.append(p)
    return paths


def bundled_fixture_dir() -> Path:
    """Directory holding the eight pristine images shipped with the package."""
    return Path(__file__).parent / "data" / "fixture"
