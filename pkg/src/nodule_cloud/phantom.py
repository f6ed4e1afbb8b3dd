"""Synthetic chest-like scenes, a parametric detector stand-in and the
fold-based assembly of the FPR train/test candidate sets.

A scene is parenchyma bounded on one side by a curved pleural wall with air
beyond it. Vessels are capped cylinders, nodules are spheres; a fraction of
the nodules sit against the inner wall surface (subpleural).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import PlacementFailure, TooFewScans
from .evaluation import ScoredCandidate, Truth, match_candidates
from .volume import Volume

BACKGROUND, WALL, VESSEL, NODULE = 0, 1, 2, 3


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple = (80, 80, 64)
    spacing: tuple = (1.0, 1.0, 1.0)
    nodule_count: tuple = (1, 3)
    nodule_diameter_mm: tuple = (5.0, 12.0)
    nodule_hu: tuple = (-100.0, 100.0)
    subpleural_fraction: float = 0.4
    subpleural_diameter_mm: tuple = (3.5, 5.0)
    vessel_count: tuple = (6, 10)
    vessel_radius_mm: tuple = (0.75, 2.0)
    vessel_length_mm: tuple = (20.0, 60.0)
    vessel_hu: tuple = (-100.0, 100.0)
    wall: bool = True
    wall_thickness_mm: tuple = (2.0, 4.0)
    wall_hu: tuple = (0.0, 60.0)
    wall_depth_mm: float = 12.0
    wall_radius_mm: float = 150.0
    air_hu: float = -1000.0
    parenchyma_hu: float = -850.0
    noise_sd: float = 15.0
    max_tries: int = 200

    def __post_init__(self):
        lo, hi = self.nodule_diameter_mm
        if lo <= 0 or hi < lo:
            raise ValueError("nodule diameters must be positive and ordered")
        if not 0.0 <= self.subpleural_fraction <= 1.0:
            raise ValueError("subpleural_fraction must lie in [0, 1]")
        if self.subpleural_diameter_mm[0] <= 0:
            raise ValueError("subpleural diameters must be positive")


@dataclass(frozen=True)
class TruthNodule:
    id: str
    center_mm: tuple
    diameter_mm: float
    hu: float
    subpleural: bool = False

    def as_truth(self) -> Truth:
        return Truth(self.id, self.center_mm, self.diameter_mm)


@dataclass
class PhantomScene:
    volume: Volume
    truths: list
    labels: np.ndarray
    wall_center_mm: np.ndarray | None = None
    wall_radius_mm: float = 0.0
    vessels: list = field(default_factory=list)

    def __iter__(self):
        # unpacks as (volume, truths)
        return iter((self.volume, self.truths))


def _uniform(rng, lo_hi):
    lo, hi = lo_hi
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def _local_grid(center_mm, reach_mm, spacing, dims):
    """Index slices and voxel-center coordinates of the sub-grid around a point."""
    s = np.asarray(spacing)
    lo = np.maximum(np.floor((np.asarray(center_mm) - reach_mm) / s - 0.5).astype(int), 0)
    hi = np.minimum(np.ceil((np.asarray(center_mm) + reach_mm) / s + 0.5).astype(int), dims)
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    axes = [(np.arange(a, b) + 0.5) * si for a, b, si in zip(lo, hi, s)]
    return sl, np.meshgrid(*axes, indexing="ij")


def ball_mask(dims, spacing, center_mm, radius_mm) -> np.ndarray:
    """Voxels whose centers lie within ``radius_mm`` of ``center_mm``."""
    out = np.zeros(dims, dtype=bool)
    sl, (X, Y, Z) = _local_grid(center_mm, radius_mm, spacing, dims)
    c = center_mm
    out[sl] = (X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2 <= radius_mm ** 2
    return out


def capsule_mask(dims, spacing, a_mm, b_mm, radius_mm) -> np.ndarray:
    a, b = np.asarray(a_mm, float), np.asarray(b_mm, float)
    mid = (a + b) / 2
    reach = np.linalg.norm(b - a) / 2 + radius_mm
    out = np.zeros(dims, dtype=bool)
    sl, (X, Y, Z) = _local_grid(mid, reach, spacing, dims)
    P = np.stack([X, Y, Z], axis=-1)
    ab = b - a
    t = np.clip(((P - a) @ ab) / max(float(ab @ ab), 1e-12), 0.0, 1.0)
    d2 = np.sum((P - (a + t[..., None] * ab)) ** 2, axis=-1)
    out[sl] = d2 <= radius_mm ** 2
    return out


def _random_direction(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def gen_phantom(cfg: PhantomConfig, rng) -> PhantomScene:
    dims = tuple(int(d) for d in cfg.dims)
    s = np.asarray(cfg.spacing, dtype=float)
    extent = np.asarray(dims) * s
    grid = [(np.arange(n) + 0.5) * si for n, si in zip(dims, s)]
    X, Y, Z = np.meshgrid(*grid, indexing="ij")
    hu = np.full(dims, cfg.parenchyma_hu, dtype=np.float64)
    labels = np.zeros(dims, dtype=np.uint8)

    wall_c, R = None, cfg.wall_radius_mm
    if cfg.wall:
        # wall surface crosses the volume wall_depth_mm inside a random side face
        axis = int(rng.integers(0, 2))
        side = int(rng.integers(0, 2))
        wall_c = extent / 2.0
        wall_c = wall_c.copy()
        if side == 0:
            wall_c[axis] = cfg.wall_depth_mm + R
        else:
            wall_c[axis] = extent[axis] - cfg.wall_depth_mm - R
        thick = _uniform(rng, cfg.wall_thickness_mm)
        dist = np.sqrt((X - wall_c[0]) ** 2 + (Y - wall_c[1]) ** 2 + (Z - wall_c[2]) ** 2)
        in_wall = (dist >= R) & (dist < R + thick)
        hu[dist >= R + thick] = cfg.air_hu
        hu[in_wall] = _uniform(rng, cfg.wall_hu)
        labels[in_wall] = WALL
        lung = dist < R
    else:
        lung = np.ones(dims, dtype=bool)

    def inside_lung(p, margin):
        if np.any(p - margin < 0) or np.any(p + margin > extent):
            return False
        return wall_c is None or np.linalg.norm(p - wall_c) < R - margin

    vessels = []
    for _ in range(int(rng.integers(cfg.vessel_count[0], cfg.vessel_count[1] + 1))):
        for _try in range(cfg.max_tries):
            mid = rng.uniform(0, extent)
            if inside_lung(mid, 2.0):
                break
        else:
            raise PlacementFailure("could not place a vessel inside the lung")
        half = _uniform(rng, cfg.vessel_length_mm) / 2
        d = _random_direction(rng)
        rad = _uniform(rng, cfg.vessel_radius_mm)
        a, b = mid - half * d, mid + half * d
        m = capsule_mask(dims, s, a, b, rad) & lung
        hu[m] = _uniform(rng, cfg.vessel_hu)
        labels[m] = VESSEL
        vessels.append({"a": a.tolist(), "b": b.tolist(), "radius_mm": rad})

    truths: list[TruthNodule] = []
    n_nod = int(rng.integers(cfg.nodule_count[0], cfg.nodule_count[1] + 1))
    for i in range(n_nod):
        sub = cfg.wall and rng.random() < cfg.subpleural_fraction
        diam = _uniform(rng, cfg.subpleural_diameter_mm if sub else cfg.nodule_diameter_mm)
        r = diam / 2
        for _try in range(cfg.max_tries):
            if sub:
                # touch the inner wall surface from the lung side
                q = rng.uniform(0, extent) - wall_c
                c = wall_c + (R - r) * q / np.linalg.norm(q)
                ok = bool(np.all(c - r - 2 >= 0) and np.all(c + r + 2 <= extent))
            else:
                c = rng.uniform(0, extent)
                ok = inside_lung(c, r + 2.0)
            if ok and all(np.linalg.norm(c - np.asarray(t.center_mm)) > r + t.diameter_mm / 2 + 4
                          for t in truths):
                break
        else:
            raise PlacementFailure(f"could not place nodule {i} after {cfg.max_tries} tries")
        m = ball_mask(dims, s, c, r)
        val = _uniform(rng, cfg.nodule_hu)
        hu[m] = val
        labels[m] = NODULE
        truths.append(TruthNodule(f"n{i}", tuple(float(x) for x in c), float(diam), float(val), bool(sub)))

    if cfg.noise_sd > 0:
        hu += rng.normal(0.0, cfg.noise_sd, size=dims)
    data = np.clip(np.rint(hu), -32768, 32767).astype(np.int16)
    return PhantomScene(Volume(data, tuple(s)), truths, labels, wall_c, R, vessels)


# -- detector stand-in ---------------------------------------------------------


@dataclass(frozen=True)
class DetectorConfig:
    recall: float = 0.9
    margin_mm: float = 1.0
    fp_per_scan: float = 6.0
    fp_radius_mm: tuple = (1.5, 4.0)
    fp_wall_fraction: float = 0.4
    p_true: tuple = (0.5, 1.0)
    p_false: tuple = (0.1, 0.9)


@dataclass
class StubCandidate:
    mask: np.ndarray
    p: float
    source: str  # truth id, "vessel" or "wall"


def detector_stub(scene: PhantomScene, cfg: DetectorConfig, rng) -> list:
    """Candidate masks and probabilities imitating a segmentation detector."""
    v = scene.volume
    dims, s = v.dims, v.spacing
    out = []
    for t in scene.truths:
        if rng.random() >= cfg.recall:
            continue
        r = t.diameter_mm / 2 + (rng.uniform(-cfg.margin_mm, cfg.margin_mm) if cfg.margin_mm > 0 else 0.0)
        r = max(r, 0.5 * min(s))
        m = ball_mask(dims, s, t.center_mm, r)
        if not m.any():
            m = ball_mask(dims, s, t.center_mm, 0.87 * max(s))
        out.append(StubCandidate(m, float(rng.uniform(*cfg.p_true)), t.id))
    n_fp = int(rng.poisson(cfg.fp_per_scan)) if cfg.fp_per_scan > 0 else 0
    wall_idx = np.argwhere(scene.labels == WALL)
    vessel_idx = np.argwhere(scene.labels == VESSEL)
    for _ in range(n_fp):
        use_wall = len(wall_idx) > 0 and (len(vessel_idx) == 0 or rng.random() < cfg.fp_wall_fraction)
        pool = wall_idx if use_wall else vessel_idx
        if len(pool) == 0:
            break
        vox = pool[rng.integers(0, len(pool))]
        center = (vox + 0.5) * np.asarray(s)
        m = ball_mask(dims, s, center, _uniform(rng, cfg.fp_radius_mm))
        out.append(StubCandidate(m, float(rng.uniform(*cfg.p_false)), "wall" if use_wall else "vessel"))
    return out


# -- FPR dataset assembly ----------------------------------------------------


def split_scans(scan_ids, folds: int = 4, train_frac: float = 0.75, rng=None):
    """Shuffle, split train/test, then deal train scans round-robin into folds."""
    ids = list(scan_ids)
    order = rng.permutation(len(ids)) if rng is not None else np.arange(len(ids))
    shuffled = [ids[i] for i in order]
    n_train = int(round(train_frac * len(ids)))
    if n_train < folds:
        raise TooFewScans(f"{n_train} training scans cannot fill {folds} folds")
    train, test = shuffled[:n_train], shuffled[n_train:]
    fold_of = {sid: i % folds for i, sid in enumerate(train)}
    return train, test, fold_of


def build_fpr_dataset(scan_ids, infer, truths_of, folds: int = 4, train_frac: float = 0.75, rng=None):
    """Assemble FPR train/test candidate records.

    ``infer(scan_id, trained_on)`` returns candidate dicts (with at least
    ``center_mm`` and ``p``) for a scan using a detector trained on the scans
    ``trained_on``; ``truths_of(scan_id)`` returns that scan's
    :class:`Truth` list. Each training fold is inferred by a detector trained
    on the other folds; the test split by one trained on all training scans.
    """
    train, test, fold_of = split_scans(scan_ids, folds, train_frac, rng)
    fpr_train, fpr_test = [], []
    for f in range(folds):
        held = [sid for sid in train if fold_of[sid] == f]
        trained_on = [sid for sid in train if fold_of[sid] != f]
        for sid in held:
            fpr_train.extend(_label(sid, infer(sid, trained_on), truths_of(sid), fold=f, split="train"))
    for sid in test:
        fpr_test.extend(_label(sid, infer(sid, train), truths_of(sid), fold=None, split="test"))
    split = {"train": train, "test": test, "folds": {sid: fold_of[sid] for sid in train}}
    return fpr_train, fpr_test, split


def _label(scan_id, cands, truths, fold, split):
    scored = [ScoredCandidate(scan_id, tuple(c["center_mm"]), float(c["p"]), c.get("candidate_id", ""))
              for c in cands]
    match_candidates(scored, {scan_id: list(truths)})
    rows = []
    for c, sc in zip(cands, scored):
        row = dict(c)
        row.update(scan_id=scan_id, status=sc.status, truth_id=sc.matched_truth,
                   label=int(sc.status != "fp"), fold=fold, split=split)
        rows.append(row)
    return rows


def config_dict(cfg) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}


def truth_to_dict(t: TruthNodule) -> dict:
    return {"id": t.id, "center_mm": list(t.center_mm), "diameter_mm": t.diameter_mm,
            "hu": t.hu, "subpleural": t.subpleural}


def truth_from_dict(d) -> TruthNodule:
    return TruthNodule(d["id"], tuple(d["center_mm"]), float(d["diameter_mm"]), float(d.get("hu", 0.0)),
                       bool(d.get("subpleural", False)))


def sphere_voxel_count(dims, spacing, center_mm, radius_mm) -> int:
    return int(ball_mask(dims, spacing, center_mm, radius_mm).sum())


def sphere_volume_voxels(radius_mm, spacing) -> float:
    return 4.0 / 3.0 * math.pi * radius_mm ** 3 / float(np.prod(spacing))
