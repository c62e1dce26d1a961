"""Deterministic synthetic four-band cloud scenes.

Each scene is a smooth land background with optional bright bare-soil
patches, snow-like confusers that are bright in the visible bands but dark in
NIR, and a cloud layer cut from multi-octave smoothed noise with a feathered
edge.  A thin haze veil may brighten clear ground without reaching the labelled
opacity.  The truth mask is the cloud opacity above one half, so thin fringes
and haze are labelled background.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, special

BANDS = ("R", "G", "B", "NIR")
CONFUSER_NIR_GAP = 0.3     # required drop of confuser NIR below its visible mean
CLOUD_FRACTION = (0.15, 0.45)
HAZE_MAX = 0.45            # haze opacity stays below the 0.5 labelling threshold
NOISE = 0.03


@dataclass
class TileDataset:
    images: np.ndarray     # [N, 4, H, W] reflectance-like values in [0, 1]
    masks: np.ndarray      # [N, H, W] in {0, 1}

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != len(BANDS):
            raise ValueError(f"images must be [N, 4, H, W], got {self.images.shape}")
        if self.masks.shape != (self.images.shape[0],) + self.images.shape[2:]:
            raise ValueError(f"masks {self.masks.shape} do not match images {self.images.shape}")
        if not np.all((self.masks == 0) | (self.masks == 1)):
            raise ValueError("masks must be binary")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, index) -> "TileDataset":
        index = np.asarray(index)
        return TileDataset(self.images[index], self.masks[index])

    def cloud_fraction(self) -> float:
        return float(self.masks.mean())


def _smooth_noise(rng: np.random.Generator, shape, sigmas, weights) -> np.ndarray:
    field = np.zeros(shape)
    for s, w in zip(sigmas, weights):
        layer = ndimage.gaussian_filter(rng.standard_normal(shape), s, mode="wrap")
        field += w * layer / (layer.std() + 1e-12)
    return field


def _background(rng, h, w) -> np.ndarray:
    scale = max(h, w)
    land = special.expit(2.0 * _smooth_noise(rng, (h, w), (scale / 6, scale / 16), (1.0, 0.4)))
    tint = rng.uniform(-0.03, 0.03, size=3)
    img = np.empty((4, h, w))
    # vegetation-like: dark visible, brighter NIR; drier ground raises the visible bands
    for k in range(3):
        img[k] = 0.06 + 0.14 * (1.0 - land) + tint[k]
    img[3] = 0.12 + 0.30 * land
    img += 0.02 * _smooth_noise(rng, (4, h, w), (1.0,), (1.0,))
    return img


def _confusers(rng, img, max_patches: int = 3):
    """Paint bright, NIR-dark patches in place; returns the patch masks."""
    _, h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    patches = []
    for _ in range(rng.integers(0, max_patches + 1)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(0.04, 0.14) * h, rng.uniform(0.04, 0.14) * w
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        if not inside.any():
            continue
        vis = rng.uniform(0.6, 0.9)
        nir = max(0.0, vis - rng.uniform(0.4, 0.55))
        for k in range(3):
            img[k][inside] = vis + rng.uniform(-0.03, 0.03)
        img[3][inside] = nir
        rgb_mean = img[:3][:, inside].mean()
        nir_mean = img[3][inside].mean()
        assert nir_mean <= rgb_mean - CONFUSER_NIR_GAP, "confuser lost its NIR contrast"
        patches.append(inside)
    return patches


def _soil(rng, img, max_patches: int = 2) -> None:
    """Bright bare ground: raised visible and NIR, darker than cloud cores."""
    _, h, w = img.shape
    scale = max(h, w)
    for _ in range(rng.integers(0, max_patches + 1)):
        field = _smooth_noise(rng, (h, w), (scale / 12,), (1.0,))
        inside = field > np.quantile(field, 1.0 - rng.uniform(0.03, 0.12))
        level = rng.uniform(0.3, 0.45)
        img[:3][:, inside] = level + rng.uniform(-0.03, 0.03, size=(3, 1))
        img[3][inside] = level + rng.uniform(0.0, 0.08)


def _clouds(rng, h, w):
    scale = max(h, w)
    field = _smooth_noise(rng, (h, w), (scale / 5, scale / 10, scale / 20), (1.0, 0.5, 0.25))
    frac = rng.uniform(*CLOUD_FRACTION)
    thr = np.quantile(field, 1.0 - frac)
    softness = rng.uniform(0.1, 0.3) * field.std()
    return special.expit((field - thr) / softness)


def _haze(rng, h, w):
    """Thin veil that never reaches the labelled opacity."""
    if rng.uniform() < 0.4:
        return np.zeros((h, w))
    scale = max(h, w)
    field = _smooth_noise(rng, (h, w), (scale / 8,), (1.0,))
    return HAZE_MAX * special.expit((field - rng.uniform(0.0, 1.0)) / 0.3)


def render_scene(rng: np.random.Generator, h: int, w: int):
    """One ``([4, h, w] image, [h, w] mask)`` pair."""
    img = _background(rng, h, w)
    _soil(rng, img)
    _confusers(rng, img)
    alpha = _clouds(rng, h, w)
    veil = np.maximum(alpha, _haze(rng, h, w))
    brightness = rng.uniform(0.55, 0.9)
    texture = 0.05 * _smooth_noise(rng, (h, w), (2.0,), (1.0,))
    cloud = np.stack([brightness + texture + rng.uniform(-0.02, 0.02) for _ in BANDS])
    img = (1.0 - veil) * img + veil * cloud
    img += NOISE * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0), (alpha > 0.5).astype(np.float64)


def worker_count(default: int | None = None) -> int:
    """Worker cap from ``CDMAMBA_THREADS`` (falls back to the CPU count)."""
    env = os.environ.get("CDMAMBA_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ValueError(f"CDMAMBA_THREADS must be an integer, got {env!r}") from None
        return max(1, n)
    return default or os.cpu_count() or 1


def gen_synthetic(seed: int, count: int, size: int, workers: int | None = None) -> TileDataset:
    """``count`` square tiles of side ``size``; tile ``i`` is seeded by ``(seed, i)``."""
    if size <= 0 or size % 32:
        raise ValueError(f"tile size must be a positive multiple of 32, got {size}")
    if count <= 0:
        raise ValueError("count must be positive")

    def one(i):
        return render_scene(np.random.default_rng([seed, i]), size, size)

    n_workers = min(worker_count(workers), count)
    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            tiles = list(pool.map(one, range(count)))
    else:
        tiles = [one(i) for i in range(count)]
    return TileDataset(np.stack([t[0] for t in tiles]), np.stack([t[1] for t in tiles]))


def holdout_split(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded (train, validation) index split with ``round(fraction * n)`` held out."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    n_val = int(round(fraction * n))
    if n_val == 0 or n_val == n:
        raise ValueError(f"cannot hold out {fraction} of {n} samples")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def kfold_splits(n: int, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seeded K-fold partition; fold sizes differ by at most one."""
    if k < 2 or k > n:
        raise ValueError(f"need 2 <= k <= n, got k={k}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, k)
    return [(np.sort(np.concatenate(folds[:i] + folds[i + 1:])), np.sort(f))
            for i, f in enumerate(folds)]
