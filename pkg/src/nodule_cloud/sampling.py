"""Fixed-size resampling of candidate clouds.

The main sampler mixes two streams: points drawn uniformly from the detector
mask (so small candidates never vanish) and Monte-Carlo draws from the whole
ROI that are kept with probability given by a Gaussian kernel of their
distance to the candidate center. The plain uniform sampler is the baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud
from .errors import DrawBudgetExhausted, NoMaskPoints


@dataclass(frozen=True)
class SamplerConfig:
    m: int = 2048
    mask_quota: int | None = None
    sigma_ratio: float = 0.5
    max_draws: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be positive")
        if self.sigma_ratio <= 0:
            raise ValueError("sigma_ratio must be positive")
        if self.mask_quota is not None and not 0 < self.mask_quota <= self.m:
            raise ValueError("mask_quota must lie in (0, m]")
        if self.max_draws is not None and self.max_draws < self.m:
            raise ValueError("max_draws must be at least m")

    @property
    def draw_budget(self) -> int:
        return self.max_draws if self.max_draws is not None else 200 * self.m

    def quota_for(self, cloud: PointCloud) -> int:
        if self.mask_quota is not None:
            return self.mask_quota
        return max(1, min(cloud.mask_count, self.m // 8))


def rbf_weight(x, center, sigma: float):
    """exp(-|x - center|^2 / (2 sigma^2)), vectorized over leading axes of ``x``."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    d2 = np.sum((np.asarray(x, dtype=np.float64) - np.asarray(center, dtype=np.float64)) ** 2, axis=-1)
    return np.exp(-d2 / (2.0 * sigma * sigma))


def rbf_accept(weights: np.ndarray, n_draws: int, rng: np.random.Generator):
    """Draw ``n_draws`` indices with replacement; accept each when its weight
    exceeds a fresh uniform threshold. Returns ``(drawn, accepted)``."""
    drawn = rng.integers(0, len(weights), size=n_draws)
    tau = rng.random(n_draws)
    return drawn, weights[drawn] > tau


def mc_rbf_sample(cloud: PointCloud, n: int, sigma: float, max_draws: int, rng, chunk: int = 4096):
    """Indices of ``n`` points accepted by the RBF Monte-Carlo rule.

    Returns ``(indices, draws_used)``. Raises :class:`DrawBudgetExhausted`
    with the partial sample when ``max_draws`` runs out first.
    """
    if len(cloud) == 0:
        raise ValueError("cannot sample an empty cloud")
    if n <= 0:
        return np.empty(0, dtype=np.int64), 0
    weights = rbf_weight(cloud.xyz, np.zeros(3), sigma)
    got: list[np.ndarray] = []
    have = draws = 0
    while have < n and draws < max_draws:
        size = min(chunk, max_draws - draws)
        drawn, ok = rbf_accept(weights, size, rng)
        acc_pos = np.flatnonzero(ok)
        need = n - have
        if len(acc_pos) >= need:
            # stop at the draw that completed the sample
            got.append(drawn[acc_pos[:need]])
            draws += int(acc_pos[need - 1]) + 1
            have = n
            break
        got.append(drawn[acc_pos])
        have += len(acc_pos)
        draws += size
    idx = np.concatenate(got) if got else np.empty(0, dtype=np.int64)
    if have < n:
        raise DrawBudgetExhausted(idx, draws)
    return idx, draws


def mask_uniform_sample(cloud: PointCloud, k: int, rng) -> np.ndarray:
    """Indices of ``k`` uniform draws (with replacement) among mask points."""
    mask_idx = np.flatnonzero(cloud.is_mask)
    if len(mask_idx) == 0:
        raise NoMaskPoints(f"cloud {cloud.candidate_ref!r} has no mask points")
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    return mask_idx[rng.integers(0, len(mask_idx), size=k)]


def sample_candidate(cloud: PointCloud, cfg: SamplerConfig, rng) -> PointCloud:
    """Mask quota plus RBF Monte-Carlo fill; always exactly ``cfg.m`` points.

    Sampling statistics are recorded in ``meta`` of the returned cloud.
    """
    quota = cfg.quota_for(cloud)
    sigma = cfg.sigma_ratio * cloud.r_mm
    mask_part = mask_uniform_sample(cloud, quota, rng)
    fill = 0
    try:
        mc_part, draws = mc_rbf_sample(cloud, cfg.m - quota, sigma, cfg.draw_budget, rng)
    except DrawBudgetExhausted as exc:
        fill = cfg.m - quota - len(exc.partial)
        mc_part = np.concatenate([exc.partial, rng.integers(0, len(cloud), size=fill)])
        draws = exc.draws
    idx = np.concatenate([mask_part, mc_part])
    idx = idx[rng.permutation(len(idx))]
    out = cloud.take(idx)
    out.meta.update(
        sampler="rbf", sigma_mm=float(sigma), draws=int(draws), fallback_fill=int(fill),
        mask_quota=int(quota), mask_points=out.mask_count, source_points=len(cloud),
    )
    return out


def uniform_sample(cloud: PointCloud, m: int, rng) -> PointCloud:
    if len(cloud) == 0:
        raise ValueError("cannot sample an empty cloud")
    out = cloud.take(rng.integers(0, len(cloud), size=m))
    out.meta.update(sampler="uniform", draws=int(m), mask_points=out.mask_count,
                    source_points=len(cloud))
    return out


def resample(cloud: PointCloud, cfg: SamplerConfig, mode: str, rng) -> PointCloud:
    if mode == "rbf":
        return sample_candidate(cloud, cfg, rng)
    if mode == "uniform":
        return uniform_sample(cloud, cfg.m, rng)
    raise ValueError(f"unknown sampler mode {mode!r}")


def candidate_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(int(seed) ^ int(index))
