"""CT-like scalar volumes: HU windowing, isotropic resampling, slab MIPs and
the NVOL on-disk format.

Arrays are indexed ``data[i, j, k]`` with ``i`` along x. Voxel ``i`` spans
``[i*s, (i+1)*s)`` mm, so its center sits at ``(i + 0.5) * s``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import MalformedFile, SlabOutOfBounds
from .fileutil import atomic_write_bytes

HU_MIN = -1000
HU_MAX = 400

AXES = {"x": 0, "y": 1, "z": 2}

NVOL_MAGIC = b"NVOL1\n"
_DTYPES = {"i16": np.dtype("<i2"), "u8": np.dtype("u1")}


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume must be 3D and non-empty, got {self.data.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def extent_mm(self) -> np.ndarray:
        return np.asarray(self.dims) * np.asarray(self.spacing)


@dataclass(frozen=True)
class NormalizedVolume:
    data: np.ndarray
    spacing: tuple[float, float, float]

    @property
    def dims(self):
        return tuple(int(n) for n in self.data.shape)


@dataclass(frozen=True)
class MipImage:
    axis: str
    slab_mm: float
    origin_slice: int
    data: np.ndarray


def normalize_hu(v: Volume) -> NormalizedVolume:
    """Clamp to the lung window [-1000, 400] HU and map linearly onto [0, 1]."""
    x = np.clip(v.data.astype(np.float64), HU_MIN, HU_MAX)
    out = ((x - HU_MIN) / (HU_MAX - HU_MIN)).astype(np.float32)
    return NormalizedVolume(out, v.spacing)


def normalize_hu_value(x_hu: float) -> float:
    x = min(max(float(x_hu), HU_MIN), HU_MAX)
    return (x - HU_MIN) / (HU_MAX - HU_MIN)


def _resample_grid(shape, spacing, target_mm):
    out_dims = [max(1, int(round(n * s / target_mm))) for n, s in zip(shape, spacing)]
    # output voxel centers expressed as fractional input indices
    axes = [(np.arange(m) + 0.5) * target_mm / s - 0.5 for m, s in zip(out_dims, spacing)]
    return out_dims, np.meshgrid(*axes, indexing="ij")


def resample_isotropic(v: Volume, target_mm: float = 1.0) -> Volume:
    """Trilinear resampling to cubic voxels of ``target_mm``; HU rounded."""
    if target_mm <= 0:
        raise ValueError("target_mm must be positive")
    if all(s == target_mm for s in v.spacing):
        return Volume(v.data.copy(), v.spacing)
    out_dims, coords = _resample_grid(v.dims, v.spacing, target_mm)
    vals = ndimage.map_coordinates(v.data.astype(np.float64), coords, order=1, mode="nearest")
    vals = np.clip(np.rint(vals), -32768, 32767).astype(np.int16)
    return Volume(vals.reshape(out_dims), (target_mm,) * 3)


def resample_mask(mask: np.ndarray, spacing, target_mm: float = 1.0) -> np.ndarray:
    """Nearest-neighbour counterpart of :func:`resample_isotropic` for u8 masks."""
    if all(s == target_mm for s in spacing):
        return mask.copy()
    out_dims, coords = _resample_grid(mask.shape, spacing, target_mm)
    vals = ndimage.map_coordinates(mask.astype(np.uint8), coords, order=0, mode="nearest")
    return vals.reshape(out_dims).astype(np.uint8)


def mip(v: Volume, axis: str, slab_mm: float, origin_slice: int) -> MipImage:
    """Maximum intensity projection over a slab starting at ``origin_slice``.

    The slab covers ``ceil(slab_mm / spacing)`` consecutive slices along ``axis``.
    """
    ax = AXES[axis]
    if slab_mm <= 0:
        raise ValueError("slab_mm must be positive")
    n = math.ceil(slab_mm / v.spacing[ax] - 1e-9)
    if origin_slice < 0 or origin_slice + n > v.dims[ax]:
        raise SlabOutOfBounds(
            f"slab of {n} slices from {origin_slice} exceeds {v.dims[ax]} along {axis}"
        )
    slab = np.take(v.data, np.arange(origin_slice, origin_slice + n), axis=ax)
    return MipImage(axis, float(slab_mm), int(origin_slice), slab.max(axis=ax))


# -- NVOL -------------------------------------------------------------------


def encode_nvol(data: np.ndarray, spacing, offset=None) -> bytes:
    if data.dtype == np.uint8 or data.dtype == bool:
        tag, arr = "u8", data.astype(np.uint8)
    else:
        tag, arr = "i16", data.astype("<i2")
    nx, ny, nz = arr.shape
    lines = [
        f"dims {nx} {ny} {nz}",
        "spacing " + " ".join(repr(float(s)) for s in spacing),
        f"dtype {tag}",
    ]
    if offset is not None:
        lines.append("offset " + " ".join(str(int(o)) for o in offset))
    header = NVOL_MAGIC + ("\n".join(lines) + "\n\n").encode("ascii")
    return header + arr.tobytes(order="F")


def decode_nvol(buf: bytes):
    """Return ``(data, spacing, offset)``; ``offset`` is (0, 0, 0) unless stored."""
    if not buf.startswith(NVOL_MAGIC):
        raise MalformedFile("missing NVOL1 magic")
    end = buf.find(b"\n\n", len(NVOL_MAGIC) - 1)
    if end < 0:
        raise MalformedFile("unterminated NVOL header")
    fields = {}
    for line in buf[len(NVOL_MAGIC):end].decode("ascii").splitlines():
        key, *vals = line.split()
        fields[key] = vals
    try:
        dims = tuple(int(x) for x in fields["dims"])
        spacing = tuple(float(x) for x in fields["spacing"])
        dtype = _DTYPES[fields["dtype"][0]]
        offset = tuple(int(x) for x in fields.get("offset", (0, 0, 0)))
    except (KeyError, ValueError, IndexError) as exc:
        raise MalformedFile(f"bad NVOL header: {exc}") from exc
    if len(dims) != 3 or min(dims) < 1 or len(spacing) != 3 or not min(spacing) > 0 or len(offset) != 3:
        raise MalformedFile(f"bad NVOL geometry: dims {dims}, spacing {spacing}")
    payload = buf[end + 2:]
    count = int(np.prod(dims))
    if len(payload) != count * dtype.itemsize:
        raise MalformedFile(f"payload has {len(payload)} bytes, expected {count * dtype.itemsize}")
    data = np.frombuffer(payload, dtype=dtype).reshape(dims, order="F")
    if dtype == np.uint8 and data.max() > 1:
        raise MalformedFile("mask values outside {0, 1}")
    return data.astype(dtype.newbyteorder("=")), spacing, offset


def write_volume(path: str | os.PathLike, v: Volume) -> None:
    atomic_write_bytes(path, encode_nvol(v.data, v.spacing))


def read_volume(path: str | os.PathLike) -> Volume:
    data, spacing, _ = decode_nvol(Path(path).read_bytes())
    return Volume(data.astype(np.int16), spacing)


def write_mask(path, mask: np.ndarray, spacing, crop: bool = True) -> None:
    """Write a binary mask; with ``crop`` only the positive bounding box is stored
    together with its index offset into the full grid."""
    mask = np.asarray(mask, dtype=np.uint8)
    if crop and mask.any():
        idx = np.argwhere(mask)
        lo, hi = idx.min(0), idx.max(0) + 1
        sub = mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        blob = encode_nvol(sub, spacing, offset=lo)
    else:
        blob = encode_nvol(mask, spacing)
    atomic_write_bytes(path, blob)


def read_mask(path, dims=None) -> np.ndarray:
    """Read a mask, expanding a cropped file back into a grid of ``dims``."""
    data, _, offset = decode_nvol(Path(path).read_bytes())
    data = data.astype(np.uint8)
    if dims is None:
        if any(offset):
            raise MalformedFile("cropped mask needs the full grid dims")
        return data
    o = offset
    if any(a < 0 or a + n > d for a, n, d in zip(o, data.shape, dims)):
        raise MalformedFile(f"mask at offset {o} does not fit grid {tuple(dims)}")
    full = np.zeros(dims, dtype=np.uint8)
    full[o[0]:o[0] + data.shape[0], o[1]:o[1] + data.shape[1], o[2]:o[2] + data.shape[2]] = data
    return full
