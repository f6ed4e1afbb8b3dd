"""Candidate ROI to featurized point cloud.

A cloud stores its points as an ``(n, 5)`` float32 array with columns
``x, y, z, hu, p`` plus a boolean ``is_mask`` flag per point. Coordinates are
in mm relative to the candidate center.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyMask, MalformedCloudFile
from .fileutil import atomic_write_bytes, atomic_write_text
from .volume import Volume

COLUMNS = ("x", "y", "z", "hu", "p")
HU_BAND = (-400.0, 400.0)
NPCD_MAGIC = b"NPCD1"
_RECORD = np.dtype([("f", "<f4", (5,)), ("is_mask", "u1")])


@dataclass
class Candidate:
    mask: np.ndarray
    spacing: tuple
    p: float
    center_mm: np.ndarray
    r_mm: float
    ref: str = ""

    @property
    def extent_mm(self):
        return np.asarray(self.mask.shape) * np.asarray(self.spacing, dtype=float)


def make_candidate(mask, spacing, p, ref="") -> Candidate:
    """Derive center and equivalent-sphere radius from a global binary mask."""
    mask = np.asarray(mask).astype(bool)
    idx = np.argwhere(mask)
    if len(idx) == 0:
        raise EmptyMask(f"candidate {ref!r} has an empty mask")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability {p} outside [0, 1]")
    s = np.asarray(spacing, dtype=float)
    center = ((idx + 0.5) * s).mean(axis=0)
    vol_mm3 = len(idx) * float(np.prod(s))
    r = (3.0 * vol_mm3 / (4.0 * math.pi)) ** (1.0 / 3.0)
    return Candidate(mask, tuple(float(x) for x in s), float(p), center, r, ref)


@dataclass(frozen=True)
class RoiBox:
    min_mm: np.ndarray
    max_mm: np.ndarray

    @property
    def size_mm(self):
        return self.max_mm - self.min_mm


@dataclass
class PointCloud:
    points: np.ndarray
    is_mask: np.ndarray
    r_mm: float
    candidate_ref: str = ""
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.points)

    @property
    def xyz(self):
        return self.points[:, :3]

    @property
    def mask_count(self) -> int:
        return int(self.is_mask.sum())

    def take(self, idx) -> "PointCloud":
        idx = np.asarray(idx, dtype=np.int64)
        return PointCloud(
            self.points[idx].copy(), self.is_mask[idx].copy(), self.r_mm, self.candidate_ref,
            dict(self.meta),
        )

    def with_points(self, points) -> "PointCloud":
        return PointCloud(
            np.asarray(points, dtype=np.float32), self.is_mask.copy(), self.r_mm,
            self.candidate_ref, dict(self.meta),
        )


def roi_bbox(c: Candidate, padding_mm: float = 16.0) -> RoiBox:
    """Voxel-face bounding box of the mask, padded on every face and clipped
    to the volume extent."""
    idx = np.argwhere(c.mask)
    if len(idx) == 0:
        raise EmptyMask(f"candidate {c.ref!r} has an empty mask")
    s = np.asarray(c.spacing, dtype=float)
    lo = idx.min(axis=0) * s - padding_mm
    hi = (idx.max(axis=0) + 1) * s + padding_mm
    return RoiBox(np.maximum(lo, 0.0), np.minimum(hi, c.extent_mm))


def box_index_ranges(box: RoiBox, spacing) -> list[tuple[int, int]]:
    """Half-open index ranges of voxels whose centers lie inside ``box``."""
    s = np.asarray(spacing, dtype=float)
    lo = np.ceil(box.min_mm / s - 0.5 - 1e-9).astype(int)
    hi = np.floor(box.max_mm / s - 0.5 + 1e-9).astype(int) + 1
    return [(int(a), int(b)) for a, b in zip(lo, hi)]


def hu_feature(hu, hu_lo: float = HU_BAND[0], hu_hi: float = HU_BAND[1]):
    """Affine map of [hu_lo, hu_hi] onto [-1, 1], clamped."""
    x = 2.0 * (np.asarray(hu, dtype=np.float64) - hu_lo) / (hu_hi - hu_lo) - 1.0
    return np.clip(x, -1.0, 1.0)


def extract_points(
    v: Volume,
    c: Candidate,
    box: RoiBox,
    hu_lo: float = HU_BAND[0],
    hu_hi: float = HU_BAND[1],
) -> PointCloud:
    """Keep box voxels inside the HU band plus every mask voxel, centered on
    the candidate."""
    ranges = box_index_ranges(box, v.spacing)
    for (a, b), n in zip(ranges, v.dims):
        if a < 0 or b > n:
            raise ValueError("box extends beyond the volume")
    sl = tuple(slice(a, b) for a, b in ranges)
    sub = v.data[sl]
    sub_mask = c.mask[sl].astype(bool)
    if not sub_mask.any():
        raise EmptyMask(f"candidate {c.ref!r} has no mask voxels inside the box")
    keep = ((sub >= hu_lo) & (sub <= hu_hi)) | sub_mask
    idx = np.argwhere(keep)
    s = np.asarray(v.spacing, dtype=float)
    offset = np.array([a for a, _ in ranges])
    xyz = (idx + offset + 0.5) * s - c.center_mm
    hu = sub[keep]
    points = np.empty((len(idx), 5), dtype=np.float32)
    points[:, :3] = xyz
    points[:, 3] = hu_feature(hu, hu_lo, hu_hi)
    points[:, 4] = c.p
    return PointCloud(points, sub_mask[keep], c.r_mm, c.ref)


def candidate_cloud(v: Volume, c: Candidate, padding_mm: float = 16.0, band=HU_BAND) -> PointCloud:
    return extract_points(v, c, roi_bbox(c, padding_mm), *band)


# -- serialization -------------------------------------------------------------


def encode_npcd(cloud: PointCloud) -> bytes:
    rec = np.empty(len(cloud), dtype=_RECORD)
    rec["f"] = cloud.points
    rec["is_mask"] = cloud.is_mask
    return NPCD_MAGIC + struct.pack("<I", len(cloud)) + rec.tobytes()


def decode_npcd(buf: bytes, r_mm: float = float("nan"), ref: str = "") -> PointCloud:
    if not buf.startswith(NPCD_MAGIC) or len(buf) < len(NPCD_MAGIC) + 4:
        raise MalformedCloudFile("missing NPCD1 header")
    (n,) = struct.unpack_from("<I", buf, len(NPCD_MAGIC))
    payload = buf[len(NPCD_MAGIC) + 4:]
    if len(payload) != n * _RECORD.itemsize:
        raise MalformedCloudFile(f"expected {n} records, payload has {len(payload)} bytes")
    rec = np.frombuffer(payload, dtype=_RECORD)
    flags = rec["is_mask"]
    if np.any(flags > 1):
        raise MalformedCloudFile("is_mask flag outside {0, 1}")
    return PointCloud(rec["f"].astype(np.float32), flags.astype(bool), r_mm, ref)


def write_cloud(path, cloud: PointCloud) -> None:
    atomic_write_bytes(path, encode_npcd(cloud))


def read_cloud(path, r_mm: float = float("nan"), ref: str = "") -> PointCloud:
    with open(path, "rb") as fh:
        return decode_npcd(fh.read(), r_mm, ref)


def cloud_to_csv(cloud: PointCloud) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow([*COLUMNS, "is_mask"])
    for row, m in zip(cloud.points.tolist(), cloud.is_mask.tolist()):
        w.writerow([*(repr(float(np.float32(x))) for x in row), int(m)])
    return out.getvalue()


def write_cloud_csv(path, cloud: PointCloud) -> None:
    atomic_write_text(path, cloud_to_csv(cloud))


def read_cloud_csv(path, r_mm: float = float("nan"), ref: str = "") -> PointCloud:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    pts = np.array([[float(r[c]) for c in COLUMNS] for r in rows], dtype=np.float32).reshape(-1, 5)
    flags = np.array([int(r["is_mask"]) for r in rows], dtype=bool)
    return PointCloud(pts, flags, r_mm, ref)
