"""Occlusion-sensitivity maps, group aggregation and ROI ranking."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .volume import (PatchSpec, Volume, accumulate, extract_patch, occlude,
                     patch_total_weight, resample_at)


def _triple(v) -> tuple[int, int, int]:
    if np.isscalar(v):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 components, got {v!r}")
    return t


@dataclass
class OcclusionConfig:
    occlusion_size: tuple[int, int, int] = (4, 4, 4)
    stride: tuple[int, int, int] | None = None  # None -> half the occlusion edge
    fill: float = 0.0
    roi_size: tuple[int, int, int] = (6, 6, 6)
    roi_stride: tuple[int, int, int] | None = None  # None -> same as stride
    top_k: int = 10
    absolute: bool = False

    def __post_init__(self):
        self.occlusion_size = _triple(self.occlusion_size)
        self.roi_size = _triple(self.roi_size)
        if self.stride is None:
            self.stride = tuple(max(1, s // 2) for s in self.occlusion_size)
        self.stride = _triple(self.stride)
        if self.roi_stride is None:
            self.roi_stride = self.stride
        self.roi_stride = _triple(self.roi_stride)
        if min(self.stride) < 1 or min(self.roi_stride) < 1:
            raise ValueError("stride must be >= 1")
        # a stride longer than the patch would leave voxels never occluded / never in a candidate
        if any(st > sz for st, sz in zip(self.stride, self.occlusion_size)):
            raise ValueError("occlusion stride must not exceed the occlusion patch edge")
        if any(st > sz for st, sz in zip(self.roi_stride, self.roi_size)):
            raise ValueError("ROI stride must not exceed the ROI edge")

    @classmethod
    def scaled(cls, factor: float, **kw) -> "OcclusionConfig":
        """Paper-scale sizes (occlusion 20^3, ROI 30^3) shrunk by ``factor``."""
        occ = max(1, round(20 * factor))
        roi = max(1, round(30 * factor))
        return cls(occlusion_size=(occ,) * 3, roi_size=(roi,) * 3, **kw)


def grid_origins(dim: int, size: int, stride: int) -> np.ndarray:
    """Stride-spaced origins along one axis; the last one is clamped to touch the far edge."""
    if size > dim:
        raise ValueError(f"patch edge {size} larger than volume edge {dim}")
    origins = list(range(0, dim - size + 1, stride))
    if origins[-1] != dim - size:
        origins.append(dim - size)
    return np.array(origins, dtype=np.int64)


def _scorer_fn(scorer) -> Callable[[Volume], float]:
    return scorer.forward if hasattr(scorer, "forward") else scorer


@dataclass
class CoarseImpacts:
    axes: tuple[np.ndarray, np.ndarray, np.ndarray]  # patch origins per axis
    size: tuple[int, int, int]
    impacts: np.ndarray  # (n0, n1, n2) baseline minus occluded output
    baseline: float

    def centers(self) -> list[np.ndarray]:
        return [a + (s - 1) / 2.0 for a, s in zip(self.axes, self.size)]


def coarse_occlusion_impacts(scorer, v: Volume, cfg: OcclusionConfig) -> CoarseImpacts:
    size = cfg.occlusion_size
    axes = tuple(grid_origins(d, s, st) for d, s, st in zip(v.dims, size, cfg.stride))
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    fn = _scorer_fn(scorer)
    baseline = float(fn(v))
    if hasattr(scorer, "occlusion_probabilities"):
        occluded = scorer.occlusion_probabilities(v, mesh, size, cfg.fill)
    else:
        occluded = np.array([fn(occlude(v, PatchSpec(tuple(o), size), cfg.fill)) for o in mesh])
    impacts = (baseline - occluded).reshape(tuple(a.size for a in axes))
    return CoarseImpacts(axes, size, impacts, baseline)


def upsample_impacts(coarse: CoarseImpacts, dims: Sequence[int]) -> Volume:
    """Cubic interpolation of patch-centre impacts onto every voxel (clamped outside the centres)."""
    coords = []
    for centers, n in zip(coarse.centers(), dims):
        if centers.size == 1:
            coords.append(np.zeros(n))
        else:
            coords.append(np.interp(np.arange(n, dtype=np.float64), centers,
                                    np.arange(centers.size, dtype=np.float64)))
    return resample_at(Volume(coarse.impacts), coords)


def subject_occlusion_map(scorer, v: Volume, cfg: OcclusionConfig) -> Volume:
    return upsample_impacts(coarse_occlusion_impacts(scorer, v, cfg), v.dims)


def group_occlusion_map(maps: Sequence[Volume], absolute: bool = False) -> Volume:
    if not maps:
        raise ValueError("group map needs at least one subject map")
    acc = Volume.zeros(maps[0].dims)
    for m in maps:
        acc = accumulate(acc, Volume(np.abs(m.data)) if absolute else m)
    return acc


@dataclass(frozen=True)
class Roi:
    patch: PatchSpec
    total_weight: float
    rank: int
    name: str

    def to_dict(self) -> dict:
        return {"origin": list(self.patch.origin), "size": list(self.patch.size),
                "weight": self.total_weight, "rank": self.rank, "name": self.name}


@dataclass
class RoiSet:
    rois: list[Roi] = field(default_factory=list)

    def __len__(self):
        return len(self.rois)

    def __iter__(self):
        return iter(self.rois)

    def __getitem__(self, i):
        return self.rois[i]

    def origins(self) -> list[tuple[int, int, int]]:
        return [r.patch.origin for r in self.rois]

    def to_json(self) -> str:
        return json.dumps([r.to_dict() for r in self.rois], indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RoiSet":
        return cls([Roi(PatchSpec(tuple(d["origin"]), tuple(d["size"])), float(d["weight"]),
                        int(d["rank"]), d["name"]) for d in json.loads(text)])


def candidate_rois(dims: Sequence[int], cfg: OcclusionConfig) -> list[PatchSpec]:
    axes = [grid_origins(d, s, st) for d, s, st in zip(dims, cfg.roi_size, cfg.roi_stride)]
    return [PatchSpec((int(a), int(b), int(c)), cfg.roi_size)
            for a in axes[0] for b in axes[1] for c in axes[2]]


def rank_rois(group_map: Volume, cfg: OcclusionConfig) -> RoiSet:
    candidates = candidate_rois(group_map.dims, cfg)
    if cfg.top_k > len(candidates):
        raise ValueError(f"top_k={cfg.top_k} exceeds the {len(candidates)} candidate ROIs")
    scored = [(patch_total_weight(group_map, p), p) for p in candidates]
    scored.sort(key=lambda wp: (-wp[0], wp[1].origin))
    return RoiSet([Roi(p, w, r + 1, f"ROI{r + 1}") for r, (w, p) in enumerate(scored[: cfg.top_k])])


def extract_roi_cohort(volumes: Sequence[Volume], roi: PatchSpec) -> list[Volume]:
    return [extract_patch(v, roi) for v in volumes]
