"""Candidate-to-truth matching and FROC scoring."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import NoTruths

FP_LEVELS = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
MIN_POSITIVE_DIAMETER_MM = 3.0


@dataclass(frozen=True)
class Truth:
    id: str
    center_mm: tuple
    diameter_mm: float

    @property
    def radius_mm(self) -> float:
        return self.diameter_mm / 2.0


@dataclass
class ScoredCandidate:
    scan_id: str
    center_mm: tuple
    score: float
    id: str = ""
    matched_truth: str | None = None
    status: str = "fp"  # "tp", "fp" or "ignored"


@dataclass
class FrocReport:
    curve: list
    sens_at: dict
    mean_sens: float
    n_scans: int
    n_truths: int
    fp_levels: tuple = field(default=FP_LEVELS)

    def row(self) -> str:
        vals = " ".join(f"{self.sens_at[lv]:.3f}" for lv in self.fp_levels)
        return f"{vals} | {self.mean_sens:.3f}"

    def to_dict(self) -> dict:
        return {
            "curve": [[float(f), float(s)] for f, s in self.curve],
            "fp_levels": list(self.fp_levels),
            "sens_at": [float(self.sens_at[lv]) for lv in self.fp_levels],
            "mean_sens": float(self.mean_sens),
            "n_scans": self.n_scans,
            "n_truths": self.n_truths,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["fp_per_scan", "sensitivity"])
        for lv in self.fp_levels:
            w.writerow([lv, repr(float(self.sens_at[lv]))])
        w.writerow(["mean", repr(float(self.mean_sens))])
        return out.getvalue()


def match_candidates(cands, truths, min_diameter_mm: float = MIN_POSITIVE_DIAMETER_MM):
    """Label candidates of one or more scans against their truths.

    ``truths`` maps scan id to a list of :class:`Truth`. A candidate hits a
    truth when its center lies within the truth radius. Candidates are visited
    by descending score; the first hit claims the truth (TP), later hits on a
    claimed truth are ignored, and everything else is FP. Hits on truths no
    larger than ``min_diameter_mm`` count as FP.
    """
    order = sorted(range(len(cands)), key=lambda i: (-cands[i].score, i))
    claimed: set = set()
    for i in order:
        c = cands[i]
        c.matched_truth, c.status = None, "fp"
        hits = []
        for t in truths.get(c.scan_id, ()):
            if t.diameter_mm <= min_diameter_mm:
                continue
            d = float(np.linalg.norm(np.asarray(c.center_mm, float) - np.asarray(t.center_mm, float)))
            if d <= t.radius_mm:
                hits.append((d, t.id))
        if not hits:
            continue
        hits.sort()
        free = [tid for _, tid in hits if (c.scan_id, tid) not in claimed]
        if free:
            c.matched_truth, c.status = free[0], "tp"
            claimed.add((c.scan_id, free[0]))
        else:
            c.matched_truth, c.status = hits[0][1], "ignored"
    return cands


def count_truths(truths, min_diameter_mm: float = MIN_POSITIVE_DIAMETER_MM) -> int:
    return sum(1 for ts in truths.values() for t in ts if t.diameter_mm > min_diameter_mm)


def froc_curve(labeled, n_scans: int, n_truths: int):
    """(fp_per_scan, sensitivity) at every distinct score threshold, sorted."""
    scored = [c for c in labeled if c.status != "ignored"]
    scores = np.array([c.score for c in scored], dtype=np.float64)
    is_tp = np.array([c.status == "tp" for c in scored], dtype=bool)
    order = np.argsort(-scores, kind="stable")
    scores, is_tp = scores[order], is_tp[order]
    tp = np.cumsum(is_tp)
    fp = np.cumsum(~is_tp)
    # last position of each distinct score: threshold "score >= s"
    last = np.flatnonzero(np.r_[scores[1:] != scores[:-1], True]) if len(scores) else []
    pts = {(fp[i] / n_scans, tp[i] / n_truths) for i in last}
    return sorted((float(f), float(s)) for f, s in pts)


def interpolate_sensitivity(curve, level: float) -> float:
    """Linear interpolation between the curve points bracketing ``level``.

    Below the first point the sensitivity is 0; beyond the last it stays at
    the last point's value.
    """
    below = [pt for pt in curve if pt[0] <= level]
    if not below:
        return 0.0
    f0, s0 = below[-1]
    above = curve[len(below):]
    if not above or f0 == level:
        return s0
    f1, s1 = above[0]
    return s0 + (s1 - s0) * (level - f0) / (f1 - f0)


def froc(labeled, n_scans: int, n_truths: int | None = None, fp_levels=FP_LEVELS) -> FrocReport:
    """FROC report from matched candidates.

    ``n_truths`` is the number of eligible truths, including ones no candidate
    found; it defaults to the number of distinct claimed truths.
    """
    if n_scans < 1:
        raise ValueError("n_scans must be at least 1")
    if n_truths is None:
        n_truths = len({(c.scan_id, c.matched_truth) for c in labeled if c.status == "tp"})
    if n_truths < 1:
        raise NoTruths("FROC needs at least one truth")
    curve = froc_curve(labeled, n_scans, n_truths)
    sens_at = {lv: interpolate_sensitivity(curve, lv) for lv in fp_levels}
    mean = float(np.mean([sens_at[lv] for lv in fp_levels]))
    return FrocReport(curve, sens_at, mean, n_scans, n_truths, tuple(fp_levels))


def mean_sensitivity(scores, candidates, truths, n_scans: int) -> float:
    """Mean sensitivity of ``scores`` assigned to ``candidates`` (re-matched)."""
    scored = [ScoredCandidate(c.scan_id, c.center_mm, float(s), c.id) for c, s in zip(candidates, scores)]
    match_candidates(scored, truths)
    return froc(scored, n_scans, count_truths(truths)).mean_sens


# -- labeled-candidate CSV ------------------------------------------------------

LABELED_FIELDS = ("scan_id", "candidate_id", "x", "y", "z", "score", "status", "truth_id")


def labeled_to_csv(labeled) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(LABELED_FIELDS)
    for c in labeled:
        x, y, z = (repr(float(v)) for v in c.center_mm)
        w.writerow([c.scan_id, c.id, x, y, z, repr(float(c.score)), c.status, c.matched_truth or ""])
    return out.getvalue()


def read_labeled_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append(ScoredCandidate(
            r["scan_id"], (float(r["x"]), float(r["y"]), float(r["z"])), float(r["score"]),
            r["candidate_id"], r["truth_id"] or None, r["status"],
        ))
    return out
