import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import sphere_volume
from nodule_cloud.cloud import PointCloud, candidate_cloud, encode_npcd, make_candidate
from nodule_cloud.errors import DrawBudgetExhausted, NoMaskPoints
from nodule_cloud.sampling import (
    SamplerConfig, candidate_rng, mask_uniform_sample, mc_rbf_sample, rbf_accept, rbf_weight, resample,
    sample_candidate, uniform_sample,
)
from nodule_cloud.volume import Volume


def cloud_at(xyz, is_mask=None, r_mm=2.0):
    xyz = np.asarray(xyz, dtype=np.float32).reshape(-1, 3)
    pts = np.zeros((len(xyz), 5), np.float32)
    pts[:, :3] = xyz
    pts[:, 4] = 0.5
    m = np.zeros(len(xyz), bool) if is_mask is None else np.asarray(is_mask, bool)
    return PointCloud(pts, m, r_mm, "t")


def test_rbf_weight_values():
    assert rbf_weight([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], 4.0) == 1.0
    assert math.isclose(rbf_weight([4.0, 0, 0], [0, 0, 0], 4.0), math.exp(-0.5), rel_tol=1e-15)
    assert math.isclose(rbf_weight([0, 12.0, 0], [0, 0, 0], 4.0), 0.011108996538242306, rel_tol=1e-12)
    with pytest.raises(ValueError):
        rbf_weight([0, 0, 0], [0, 0, 0], 0.0)


@pytest.mark.parametrize("mult", [0, 1, 2, 3])
def test_acceptance_rate_law(mult):
    sigma = 4.0
    w = rbf_weight(np.array([[mult * sigma, 0, 0]]), np.zeros(3), sigma)
    _, ok = rbf_accept(w, 100_000, np.random.default_rng(mult))
    assert abs(ok.mean() - math.exp(-mult ** 2 / 2)) <= 0.02


def test_all_at_origin_accepts_every_draw():
    idx, draws = mc_rbf_sample(cloud_at(np.zeros((5, 3))), 300, 1.0, 10_000, np.random.default_rng(0))
    assert len(idx) == 300 and draws == 300


def test_two_point_far_rate():
    sigma = 2.0
    pc = cloud_at([[0, 0, 0], [3 * sigma, 0, 0]])
    idx, draws = mc_rbf_sample(pc, 60_000, sigma, 10 ** 7, np.random.default_rng(1))
    n_far = int((idx == 1).sum())
    # far point is drawn about draws/2 times; fraction accepted estimates its weight
    rate = n_far / (draws / 2)
    assert abs(rate - math.exp(-4.5)) <= 0.02
    assert n_far / (idx == 0).sum() == pytest.approx(math.exp(-4.5), abs=0.02)


def test_mc_deterministic_and_budget():
    pc = cloud_at(np.random.default_rng(0).normal(scale=5, size=(50, 3)))
    a = mc_rbf_sample(pc, 100, 2.0, 100_000, np.random.default_rng(9))
    b = mc_rbf_sample(pc, 100, 2.0, 100_000, np.random.default_rng(9))
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]
    far = cloud_at([[100.0, 0, 0]])
    with pytest.raises(DrawBudgetExhausted) as info:
        mc_rbf_sample(far, 10, 1.0, 500, np.random.default_rng(0))
    assert len(info.value.partial) == 0 and info.value.draws == 500


@given(st.floats(0.5, 5.0), st.integers(0, 1000))
@settings(max_examples=10, deadline=None)
def test_monotone_density(sigma, seed):
    pc = cloud_at([[0.5 * sigma, 0, 0], [1.5 * sigma, 0, 0]])
    idx, draws = mc_rbf_sample(pc, 5000, sigma, 10 ** 6, np.random.default_rng(seed))
    assert (idx == 0).sum() >= (idx == 1).sum()


def test_mask_uniform_cases():
    pc = cloud_at(np.arange(12).reshape(4, 3), is_mask=[False, True, False, False])
    assert np.array_equal(mask_uniform_sample(pc, 5, np.random.default_rng(0)), [1] * 5)
    assert len(mask_uniform_sample(pc, 0, np.random.default_rng(0))) == 0
    with pytest.raises(NoMaskPoints):
        mask_uniform_sample(cloud_at(np.zeros((3, 3))), 2, np.random.default_rng(0))


def test_mask_uniform_frequency():
    pc = cloud_at(np.zeros((150, 3)), is_mask=np.r_[np.ones(100, bool), np.zeros(50, bool)])
    idx = mask_uniform_sample(pc, 100_000, np.random.default_rng(3))
    freq = np.bincount(idx, minlength=150) / 100_000
    assert np.all(freq[100:] == 0)
    assert np.all(np.abs(freq[:100] - 0.01) <= 0.005)


def small_candidate_cloud(diam_mm=2.0, box=48):
    v, mask = sphere_volume((box, box, box), (box / 2,) * 3, diam_mm / 2, inside=30)
    data = v.data.copy()
    data[:, :, :6] = 20  # a band of in-range tissue far from the candidate
    v = Volume(data, v.spacing)
    c = make_candidate(mask, v.spacing, 0.7)
    return candidate_cloud(v, c, padding_mm=box)


def test_quota_unconditional():
    pc = small_candidate_cloud()
    cfg = SamplerConfig(m=2048, mask_quota=256)
    for seed in range(20):
        out = sample_candidate(pc, cfg, np.random.default_rng(seed))
        assert len(out) == 2048 and out.mask_count >= 256
        assert out.meta["mask_quota"] == 256 and out.meta["mask_points"] == out.mask_count


def test_default_quota_and_fallback_meta():
    pc = small_candidate_cloud()
    cfg = SamplerConfig(m=64, max_draws=64)
    assert cfg.quota_for(pc) == min(pc.mask_count, 8)
    out = sample_candidate(pc, cfg, np.random.default_rng(0))
    assert len(out) == 64 and out.meta["draws"] <= 64
    assert out.meta["fallback_fill"] >= 0
    assert out.meta["sigma_mm"] == pytest.approx(0.5 * pc.r_mm)


def test_origin_cloud_copies():
    pc = cloud_at(np.zeros((16, 3)), is_mask=[True] + [False] * 15)
    pc.points[:, 3] = np.arange(16)
    out = sample_candidate(pc, SamplerConfig(m=16), np.random.default_rng(0))
    assert len(out) == 16 and np.all(out.xyz == 0)
    assert set(out.points[:, 3].tolist()) <= set(range(16))


def test_sampling_is_deterministic():
    pc = small_candidate_cloud(4.0)
    cfg = SamplerConfig(m=256, seed=5)
    for mode in ("rbf", "uniform"):
        a = resample(pc, cfg, mode, candidate_rng(5, 3))
        b = resample(pc, cfg, mode, candidate_rng(5, 3))
        assert encode_npcd(a) == encode_npcd(b)
    assert encode_npcd(resample(pc, cfg, "rbf", candidate_rng(5, 3))) != encode_npcd(
        resample(pc, cfg, "uniform", candidate_rng(5, 3)))
    assert candidate_rng(5, 3).random() == np.random.default_rng(5 ^ 3).random()


def test_uniform_support():
    pc = cloud_at(np.random.default_rng(0).normal(size=(40, 3)))
    out = uniform_sample(pc, 40, np.random.default_rng(2))
    rows = {tuple(r) for r in pc.points.tolist()}
    assert len(out) == 40 and all(tuple(r) in rows for r in out.points.tolist())


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(m=0)
    with pytest.raises(ValueError):
        SamplerConfig(m=8, mask_quota=9)
    with pytest.raises(ValueError):
        SamplerConfig(m=8, max_draws=7)
    with pytest.raises(ValueError):
        SamplerConfig(sigma_ratio=0)
    assert SamplerConfig(m=10).draw_budget == 2000
    with pytest.raises(ValueError):
        resample(cloud_at(np.zeros((2, 3))), SamplerConfig(m=2), "fps", np.random.default_rng(0))
