"""Training-time augmentations at the image level (raw HU volumes) and the
point-cloud level, plus class-balanced batch selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .cloud import PointCloud
from .errors import DegenerateScale, SingleClassDataset
from .volume import Volume


@dataclass(frozen=True)
class AugmentConfig:
    noise_lambda: float = 0.05
    noise_sigma: float = 30.0
    blur_prob: float = 0.2
    blur_alpha_range: tuple = (0.2, 0.8)
    hu_shift_range: tuple = (-50.0, 50.0)
    scale_sigma: float = 0.05
    rotation: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.blur_prob <= 1.0:
            raise ValueError("blur_prob must lie in [0, 1]")
        for name in ("blur_alpha_range", "hu_shift_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is reversed")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.noise_lambda < 0 or self.noise_sigma < 0 or self.scale_sigma < 0:
            raise ValueError("rates and deviations must be non-negative")


def _as_hu(values) -> np.ndarray:
    return np.clip(np.rint(values), -32768, 32767).astype(np.int16)


def masked_gaussian_noise(v: Volume, cfg: AugmentConfig, rng) -> Volume:
    """Add N(0, sigma) noise only where a binarized Poisson(lambda) mask fires."""
    mask = np.minimum(rng.poisson(cfg.noise_lambda, size=v.dims), 1)
    noise = rng.normal(0.0, cfg.noise_sigma, size=v.dims) if cfg.noise_sigma > 0 else 0.0
    return Volume(_as_hu(v.data + mask * noise), v.spacing)


def blur_alpha(cfg: AugmentConfig, rng) -> float | None:
    """Kernel width for one blur draw, or ``None`` when blur is skipped."""
    if rng.random() >= cfg.blur_prob:
        return None
    return float(rng.uniform(*cfg.blur_alpha_range))


def gaussian_blur(v: Volume, cfg: AugmentConfig, rng) -> Volume:
    alpha = blur_alpha(cfg, rng)
    if alpha is None:
        return Volume(v.data.copy(), v.spacing)
    out = ndimage.gaussian_filter(v.data.astype(np.float64), sigma=alpha, mode="nearest")
    return Volume(_as_hu(out), v.spacing)


def hu_shift_value(cfg: AugmentConfig, rng) -> int:
    lo, hi = cfg.hu_shift_range
    return int(np.rint(rng.uniform(lo, hi))) if hi > lo else int(np.rint(lo))


def hu_shift(v: Volume, cfg: AugmentConfig, rng) -> Volume:
    """Add one integer HU offset to every voxel (raw HU, before windowing)."""
    s = hu_shift_value(cfg, rng)
    return Volume(_as_hu(v.data.astype(np.int32) + s), v.spacing)


def augment_volume(v: Volume, cfg: AugmentConfig, rng) -> Volume:
    v = masked_gaussian_noise(v, cfg, rng)
    v = gaussian_blur(v, cfg, rng)
    return hu_shift(v, cfg, rng)


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def rotate_xy(points: np.ndarray, theta: float) -> np.ndarray:
    out = np.array(points, dtype=np.float64, copy=True)
    out[:, :2] = out[:, :2] @ rotation_matrix(theta).T
    return out


def rotate_transverse(pc: PointCloud, rng, theta: float | None = None) -> PointCloud:
    """Rotate x, y about the origin by a random angle in [0, 2*pi)."""
    if theta is None:
        theta = rng.uniform(0.0, 2.0 * np.pi)
    return pc.with_points(rotate_xy(pc.points, theta))


def scale_factors(cfg: AugmentConfig, rng, tries: int = 10) -> np.ndarray:
    """Diagonal of ``I + diag(N(0, sigma))``, redrawn while any entry is <= 0."""
    for _ in range(tries):
        f = 1.0 + rng.normal(0.0, cfg.scale_sigma, size=3) if cfg.scale_sigma > 0 else np.ones(3)
        if np.all(f > 0):
            return f
    raise DegenerateScale(f"no positive scale factors after {tries} draws")


def anisotropic_scale(pc: PointCloud, cfg: AugmentConfig, rng, factors=None) -> PointCloud:
    f = scale_factors(cfg, rng) if factors is None else np.asarray(factors, dtype=np.float64)
    pts = np.array(pc.points, dtype=np.float64, copy=True)
    pts[:, :3] *= f
    return pc.with_points(pts)


def augment_points(points: np.ndarray, cfg: AugmentConfig, rng) -> np.ndarray:
    """Rotation then scaling applied to an ``(m, 5)`` feature array."""
    pts = np.array(points, dtype=np.float64, copy=True)
    if cfg.rotation:
        pts = rotate_xy(pts, rng.uniform(0.0, 2.0 * np.pi))
    pts[:, :3] *= scale_factors(cfg, rng)
    return pts.astype(points.dtype)


def balanced_batches(labels, batch: int, rng):
    """Endless stream of index batches with equal positive and negative counts.

    Each half is drawn with replacement from its class, which upsamples the
    minority class.
    """
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise SingleClassDataset("balanced selection needs both classes")
    if batch < 2:
        raise ValueError("batch must hold at least one sample per class")
    half = batch // 2
    while True:
        idx = np.concatenate([pos[rng.integers(0, len(pos), half)],
                              neg[rng.integers(0, len(neg), half)]])
        yield idx[rng.permutation(len(idx))]
