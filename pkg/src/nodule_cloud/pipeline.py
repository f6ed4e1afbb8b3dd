"""In-memory end-to-end pipeline: scenes -> candidates -> clouds -> model -> FROC.

The CLI runs the same steps through files; this module keeps everything in
memory for the sampling and feature ablations.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .cloud import candidate_cloud, make_candidate
from .evaluation import FrocReport, ScoredCandidate, count_truths, froc, match_candidates
from .model import FeatureSet, TrainConfig, predict, train
from .phantom import DetectorConfig, PhantomConfig, build_fpr_dataset, detector_stub, gen_phantom
from .sampling import SamplerConfig, candidate_rng, resample
from .volume import resample_isotropic, resample_mask

log = logging.getLogger(__name__)


def scan_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index), int(stream)])


def scan_id(index: int) -> str:
    return f"scan_{index:03d}"


@dataclass
class ScanData:
    scan_id: str
    volume: object
    truths: list
    candidates: list  # dicts: candidate_id, mask, p, center_mm, r_mm, source
    nodules: list = field(default_factory=list)  # TruthNodule records with HU and placement


def make_scan(index: int, seed: int, phantom: PhantomConfig, detector: DetectorConfig,
              target_mm: float = 1.0) -> ScanData:
    scene = gen_phantom(phantom, scan_rng(seed, index, 0))
    vol = resample_isotropic(scene.volume, target_mm)
    stubs = detector_stub(scene, detector, scan_rng(seed, index, 1))
    sid = scan_id(index)
    cands = []
    for j, st in enumerate(stubs):
        mask = resample_mask(st.mask.astype(np.uint8), scene.volume.spacing, target_mm)
        if not mask.any():
            continue
        c = make_candidate(mask, vol.spacing, st.p, f"{sid}_c{j:03d}")
        cands.append({"candidate_id": c.ref, "mask": mask, "p": c.p, "center_mm": c.center_mm.tolist(),
                      "r_mm": c.r_mm, "source": st.source})
    return ScanData(sid, vol, [t.as_truth() for t in scene.truths], cands, list(scene.truths))


@dataclass
class CloudSet:
    """Fixed-size clouds of one split plus what is needed to FROC-score them."""

    clouds: np.ndarray  # (N, m, 5)
    labels: np.ndarray
    rows: list
    truths: dict
    scan_ids: list

    def mean_sensitivity(self, scores) -> float:
        return score_report(self, scores).mean_sens


def score_report(cs: CloudSet, scores) -> FrocReport:
    scored = [ScoredCandidate(r["scan_id"], tuple(r["center_mm"]), float(s), r["candidate_id"])
              for r, s in zip(cs.rows, scores)]
    match_candidates(scored, cs.truths)
    return froc(scored, len(cs.scan_ids), count_truths(cs.truths))


def build_cloud_set(rows, scans: dict, scan_ids, sampler: SamplerConfig, mode: str,
                    padding_mm: float = 16.0) -> CloudSet:
    clouds = []
    for i, row in enumerate(rows):
        scan = scans[row["scan_id"]]
        c = make_candidate(row["mask"], scan.volume.spacing, row["p"], row["candidate_id"])
        full = candidate_cloud(scan.volume, c, padding_mm)
        clouds.append(resample(full, sampler, mode, candidate_rng(sampler.seed, i)).points)
    arr = np.stack(clouds).astype(np.float32) if clouds else np.empty((0, sampler.m, 5), np.float32)
    truths = {sid: scans[sid].truths for sid in scan_ids}
    return CloudSet(arr, np.array([r["label"] for r in rows], dtype=int), list(rows), truths, list(scan_ids))


@dataclass(frozen=True)
class BenchConfig:
    n_scans: int = 96
    seed: int = 7
    folds: int = 4
    train_frac: float = 0.75
    val_frac: float = 0.0
    phantom: PhantomConfig = PhantomConfig()
    detector: DetectorConfig = DetectorConfig()
    sampler: SamplerConfig = SamplerConfig(m=256)
    train: TrainConfig = TrainConfig(epochs=30, batch_size=32)
    repeats: int = 2
    runs: tuple = (
        ("rbf", "xyz-hu-p"),
        ("uniform", "xyz-hu-p"),
        ("rbf", "xyz"),
        ("rbf", "hu-p"),
    )


@dataclass
class BenchResult:
    """``reports[key]`` lists one FROC report per training repeat."""

    reports: dict = field(default_factory=dict)
    logs: dict = field(default_factory=dict)
    n_candidates: int = 0
    n_train: int = 0
    n_test: int = 0
    seconds: float = 0.0


def assemble(cfg: BenchConfig):
    scans = {}
    for i in range(cfg.n_scans):
        s = make_scan(i, cfg.seed, cfg.phantom, cfg.detector)
        scans[s.scan_id] = s

    def infer(sid, trained_on):
        return scans[sid].candidates

    rng = np.random.default_rng([cfg.seed, 99])
    fpr_train, fpr_test, split = build_fpr_dataset(
        list(scans), infer, lambda sid: scans[sid].truths, cfg.folds, cfg.train_frac, rng)
    return scans, fpr_train, fpr_test, split


def run_benchmark(cfg: BenchConfig) -> BenchResult:
    t0 = time.time()
    scans, fpr_train, fpr_test, split = assemble(cfg)
    out = BenchResult(n_candidates=len(fpr_train) + len(fpr_test), n_train=len(fpr_train),
                      n_test=len(fpr_test))
    sets = {}
    for mode, feats in cfg.runs:
        if mode not in sets:
            sets[mode] = (
                build_cloud_set(fpr_train, scans, split["train"], cfg.sampler, mode),
                build_cloud_set(fpr_test, scans, split["test"], cfg.sampler, mode),
            )
        tr, te = sets[mode]
        key = f"{mode}/{feats}"
        out.reports[key], out.logs[key] = [], []
        for rep in range(cfg.repeats):
            tcfg = replace(cfg.train, feature_set=FeatureSet(feats), seed=cfg.train.seed + rep)
            res = train(tr.clouds, tr.labels, tcfg, np.random.default_rng(tcfg.seed))
            scores = predict(te.clouds, res.weights, tcfg.feature_set)
            out.reports[key].append(score_report(te, scores))
            out.logs[key].append(res.log)
            log.info("%s repeat %d: mean sens %.3f", key, rep, out.reports[key][-1].mean_sens)
    out.seconds = time.time() - t0
    return out


def summarize(result: BenchResult) -> dict:
    """Mean sensitivity per run averaged over repeats."""
    return {k: float(np.mean([r.mean_sens for r in reps])) for k, reps in result.reports.items()}
