"""Dense 3D scalar grids: patches, occlusion, cubic resampling, RV1 I/O."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

RV1_MAGIC = b"RVOL"
_RV1_HEADER = struct.Struct("<4sIII")


class BoundsError(ValueError):
    """A patch does not fit inside the volume it is applied to."""


@dataclass(frozen=True)
class Volume:
    """Immutable 3D grid indexed ``data[x, y, z]``.

    The flat (serialized) layout is x-fastest, i.e. ``idx = x + nx*(y + ny*z)``.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume must be a non-empty 3D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @classmethod
    def zeros(cls, dims: Sequence[int]) -> "Volume":
        return cls(np.zeros(tuple(dims)))

    @classmethod
    def from_flat(cls, flat, dims: Sequence[int]) -> "Volume":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != int(np.prod(dims)):
            raise ValueError(f"flat length {flat.size} does not match dims {tuple(dims)}")
        return cls(flat.reshape(tuple(dims), order="F"))

    def flat(self) -> np.ndarray:
        return self.data.ravel(order="F")

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True)
class PatchSpec:
    origin: tuple[int, int, int]
    size: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(int(o) for o in self.origin))
        object.__setattr__(self, "size", tuple(int(s) for s in self.size))
        if len(self.origin) != 3 or len(self.size) != 3:
            raise ValueError("origin and size must have three components")
        if any(s < 1 for s in self.size):
            raise ValueError(f"patch size must be positive, got {self.size}")

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + s) for o, s in zip(self.origin, self.size))

    def contains(self, point: Sequence[int]) -> bool:
        return all(o <= p < o + s for o, s, p in zip(self.origin, self.size, point))

    def check_bounds(self, dims: Sequence[int]) -> None:
        for axis, (o, s, d) in enumerate(zip(self.origin, self.size, dims)):
            if o < 0 or o + s > d:
                raise BoundsError(
                    f"patch out of bounds on axis {'xyz'[axis]}: "
                    f"[{o}, {o + s}) not within [0, {d})"
                )


def extract_patch(v: Volume, p: PatchSpec) -> Volume:
    p.check_bounds(v.dims)
    return Volume(v.data[p.slices])


def occlude(v: Volume, p: PatchSpec, fill: float = 0.0) -> Volume:
    p.check_bounds(v.dims)
    out = v.data.copy()
    out[p.slices] = fill
    return Volume(out)


def accumulate(acc: Volume, v: Volume) -> Volume:
    if acc.dims != v.dims:
        raise ValueError(f"dimension mismatch: {acc.dims} vs {v.dims}")
    return Volume(acc.data + v.data)


def patch_total_weight(weights: Volume, p: PatchSpec) -> float:
    p.check_bounds(weights.dims)
    return float(weights.data[p.slices].sum())


def _catmull_rom_axis(arr: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    """Evaluate a Catmull-Rom spline along ``axis`` at fractional ``coords``.

    Coordinates and neighbour indices are clamped to the valid range.
    """
    n = arr.shape[axis]
    coords = np.clip(np.asarray(coords, dtype=np.float64), 0.0, n - 1)
    i1 = np.floor(coords).astype(np.int64)
    i1 = np.minimum(i1, n - 1)
    t = coords - i1
    idx = [np.clip(i1 + k, 0, n - 1) for k in (-1, 0, 1, 2)]
    p0, p1, p2, p3 = (np.take(arr, i, axis=axis) for i in idx)
    shape = [1] * arr.ndim
    shape[axis] = -1
    t = t.reshape(shape)
    t2 = t * t
    t3 = t2 * t
    # at t == 0 every term except p1 vanishes, so integer coordinates are exact
    return p1 + 0.5 * (
        (p2 - p0) * t
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t2
        + (3.0 * (p1 - p2) + p3 - p0) * t3
    )


def resample_at(v: Volume, coords: Sequence[np.ndarray]) -> Volume:
    """Separable cubic interpolation of ``v`` at per-axis fractional coordinates."""
    out = v.data
    for axis, c in enumerate(coords):
        out = _catmull_rom_axis(out, c, axis)
    return Volume(out)


def resample(v: Volume, target_dims: Sequence[int]) -> Volume:
    """Resize with corner-aligned sampling: target index 0 and n-1 hit source 0 and n-1."""
    target_dims = tuple(int(d) for d in target_dims)
    if len(target_dims) != 3 or any(d < 1 for d in target_dims):
        raise ValueError(f"target dims must be three positive integers, got {target_dims}")
    coords = []
    for n_src, n_tgt in zip(v.dims, target_dims):
        if n_tgt == 1:
            coords.append(np.array([(n_src - 1) / 2.0]))
        else:
            coords.append(np.arange(n_tgt) * ((n_src - 1) / (n_tgt - 1)))
    return resample_at(v, coords)


def write_rv1(path: str | Path, v: Volume) -> None:
    header = _RV1_HEADER.pack(RV1_MAGIC, *v.dims)
    body = v.flat().astype("<f8").tobytes()
    Path(path).write_bytes(header + body)


def read_rv1(path: str | Path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < _RV1_HEADER.size:
        raise ValueError(f"{path}: truncated RV1 header")
    magic, nx, ny, nz = _RV1_HEADER.unpack_from(raw)
    if magic != RV1_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    n = nx * ny * nz
    body = raw[_RV1_HEADER.size:]
    if len(body) != 8 * n:
        raise ValueError(f"{path}: expected {8 * n} data bytes, found {len(body)}")
    return Volume.from_flat(np.frombuffer(body, dtype="<f8"), (nx, ny, nz))
