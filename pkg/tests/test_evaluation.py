import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from froc_oracle import brute_force, random_instance
from nodule_cloud.errors import NoTruths
from nodule_cloud.evaluation import (
    FP_LEVELS, FrocReport, ScoredCandidate, Truth, count_truths, froc, interpolate_sensitivity, labeled_to_csv,
    match_candidates, read_labeled_csv,
)


def cand(score, center=(0.0, 0.0, 0.0), scan="s0", cid=""):
    return ScoredCandidate(scan, center, score, cid)


def score(cands, truths, n_scans):
    match_candidates(cands, truths)
    return froc(cands, n_scans, count_truths(truths))


def test_match_rules():
    t = {"s0": [Truth("a", (0, 0, 0), 10.0)]}
    c = match_candidates([cand(0.5)], t)[0]
    assert c.status == "tp" and c.matched_truth == "a"
    far = match_candidates([cand(0.5, (5.0 + 1e-9, 0, 0))], t)[0]
    edge = match_candidates([cand(0.5, (5.0, 0, 0))], t)[0]
    assert far.status == "fp" and edge.status == "tp"
    two = match_candidates([cand(0.3, cid="lo"), cand(0.9, (1, 0, 0), cid="hi")], t)
    assert [x.status for x in two] == ["ignored", "tp"]


def test_small_truths_count_as_fp():
    t = {"s0": [Truth("tiny", (0, 0, 0), 3.0), Truth("big", (50, 0, 0), 6.0)]}
    cs = match_candidates([cand(0.9), cand(0.8, (50, 0, 0))], t)
    assert [c.status for c in cs] == ["fp", "tp"]
    assert count_truths(t) == 1


def test_nearest_unclaimed_truth():
    t = {"s0": [Truth("a", (0, 0, 0), 20.0), Truth("b", (4, 0, 0), 20.0)]}
    cs = match_candidates([cand(0.9, (1, 0, 0)), cand(0.8, (1, 0, 0))], t)
    assert [(c.status, c.matched_truth) for c in cs] == [("tp", "a"), ("tp", "b")]


def test_single_perfect_hit():
    rep = score([cand(0.9)], {"s0": [Truth("a", (0, 0, 0), 8.0)]}, 1)
    assert all(rep.sens_at[lv] == 1.0 for lv in FP_LEVELS) and rep.mean_sens == 1.0


def test_three_candidate_example():
    truths = {"s0": [Truth("a", (0, 0, 0), 8.0)], "s1": [Truth("b", (0, 0, 0), 8.0)]}
    cands = [cand(0.9, scan="s0"), cand(0.8, (30, 0, 0), scan="s0"), cand(0.7, scan="s1")]
    rep = score(cands, truths, 2)
    curve, sens, mean, _ = brute_force(cands, truths, 2)
    assert rep.curve == curve == [(0.0, 0.5), (0.5, 0.5), (0.5, 1.0)]
    assert rep.sens_at == sens and rep.mean_sens == mean


def test_row_format():
    rep = FrocReport([], dict(zip(FP_LEVELS, [0.545, 0.679, 0.842, 0.971, 0.990, 0.995, 0.995])), 0.859, 1, 1)
    assert rep.row() == "0.545 0.679 0.842 0.971 0.990 0.995 0.995 | 0.859"


def test_interpolation_rules():
    curve = [(0.5, 0.2), (1.0, 0.6), (3.0, 0.8)]
    assert interpolate_sensitivity(curve, 0.25) == 0.0
    assert interpolate_sensitivity(curve, 0.5) == 0.2
    assert interpolate_sensitivity(curve, 0.75) == pytest.approx(0.4)
    assert interpolate_sensitivity(curve, 2.0) == pytest.approx(0.7)
    assert interpolate_sensitivity(curve, 8.0) == 0.8


@given(st.integers(0, 10 ** 9))
@settings(max_examples=150, deadline=None)
def test_matches_brute_force(seed):
    cands, truths, n = random_instance(np.random.default_rng(seed))
    rep = score(cands, truths, n)
    curve, sens, mean, n_truths = brute_force(cands, truths, n)
    assert rep.n_truths == n_truths
    assert len(rep.curve) == len(curve)
    assert np.allclose(rep.curve, curve, rtol=0, atol=1e-12)
    assert all(abs(rep.sens_at[lv] - sens[lv]) <= 1e-12 for lv in FP_LEVELS)
    assert abs(rep.mean_sens - mean) <= 1e-12


@given(st.integers(0, 10 ** 9))
@settings(max_examples=60, deadline=None)
def test_curve_invariants(seed):
    cands, truths, n = random_instance(np.random.default_rng(seed))
    rep = score(cands, truths, n)
    sens = [s for _, s in rep.curve]
    assert sens == sorted(sens) and all(0 <= s <= 1 for s in sens)
    assert abs(rep.mean_sens - np.mean([rep.sens_at[lv] for lv in FP_LEVELS])) <= 1e-12


@given(st.integers(0, 10 ** 9))
@settings(max_examples=60, deadline=None)
def test_monotone_rescaling_invariance(seed):
    r = np.random.default_rng(seed)
    cands, truths, n = random_instance(r)
    base = score(cands, truths, n).mean_sens
    moved = [cand(0.1 + 0.8 * c.score ** 3, c.center_mm, c.scan_id, c.id) for c in cands]
    assert score(moved, truths, n).mean_sens == pytest.approx(base, abs=1e-12)


@given(st.integers(0, 10 ** 9))
@settings(max_examples=60, deadline=None)
def test_low_fp_does_not_change_sensitivity(seed):
    r = np.random.default_rng(seed)
    cands, truths, n = random_instance(r)
    before = score(cands, truths, n)
    hits = [c.score for c in cands if c.status == "tp"]
    low = (min(hits) if hits else 1.0) - 1e-3
    extra = cands + [cand(low, (999.0, 999.0, 999.0), "s0", "extra")]
    after = score(extra, truths, n)
    assert all(after.sens_at[lv] == pytest.approx(before.sens_at[lv], abs=1e-12) for lv in FP_LEVELS)


def test_errors():
    with pytest.raises(NoTruths):
        froc([cand(0.5)], 1, 0)
    with pytest.raises(ValueError):
        froc([cand(0.5)], 0, 1)


def test_report_serialization(tmp_path):
    truths = {"s0": [Truth("a", (0, 0, 0), 8.0)]}
    cands = [cand(0.9, cid="c0"), cand(0.4, (40, 0, 0), cid="c1")]
    rep = score(cands, truths, 1)
    d = rep.to_dict()
    assert d["fp_levels"] == list(FP_LEVELS) and d["mean_sens"] == rep.mean_sens
    assert rep.to_csv().splitlines()[0] == "fp_per_scan,sensitivity"
    p = tmp_path / "labeled.csv"
    p.write_text(labeled_to_csv(cands))
    back = read_labeled_csv(p)
    assert [(c.id, c.status, c.matched_truth, c.score) for c in back] == [
        ("c0", "tp", "a", 0.9), ("c1", "fp", None, 0.4)]
    assert froc(back, 1, 1).mean_sens == rep.mean_sens
