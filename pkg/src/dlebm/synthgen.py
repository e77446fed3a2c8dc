"""Seeded synthetic cohorts: ellipsoid heads, Voronoi atlas, planted regional reductions."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .biomarkers import Atlas
from .volume import Volume, read_rv1, write_rv1

BASELINE = 0.8


@dataclass
class SynthConfig:
    dims: tuple[int, int, int] = (30, 36, 30)
    n_regions: int = 16
    n_per_class: int = 60
    effects: list[tuple[int, float]] = field(default_factory=list)  # (region id, reduction)
    interactions: list[tuple[int, int]] = field(default_factory=list)
    interaction_reduction: float = 0.4
    hit_probability: float = 0.5
    noise_sd: float = 0.05
    label_noise: float = 0.0
    seed: int = 0
    head_fraction: float = 0.45  # ellipsoid semi-axis as a fraction of each edge
    lloyd_iterations: int = 5

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.effects = [(int(r), float(f)) for r, f in self.effects]
        self.interactions = [(int(a), int(b)) for a, b in self.interactions]
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise ValueError(f"dims must be three axes of at least 8, got {self.dims}")
        if self.n_regions < 2:
            raise ValueError("need at least two regions")
        for r, f in self.effects:
            if not 1 <= r <= self.n_regions or not 0.0 <= f <= 1.0:
                raise ValueError(f"bad effect ({r}, {f})")
        for a, b in self.interactions:
            if a == b or not (1 <= a <= self.n_regions and 1 <= b <= self.n_regions):
                raise ValueError(f"bad interaction pair ({a}, {b})")
        if not 0.0 <= self.interaction_reduction <= 1.0 or not 0.0 <= self.hit_probability <= 1.0:
            raise ValueError("interaction reduction and hit probability must lie in [0, 1]")
        if self.noise_sd < 0 or not 0.0 <= self.label_noise <= 0.5:
            raise ValueError("noise_sd must be >= 0 and label_noise in [0, 0.5]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["effects"] = [list(e) for e in self.effects]
        d["interactions"] = [list(p) for p in self.interactions]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)


def head_mask(dims, head_fraction: float = 0.45) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
    r2 = np.zeros(dims)
    for g, n in zip(grids, dims):
        c = (n - 1) / 2.0
        r2 += ((g - c) / (head_fraction * n)) ** 2
    return r2 <= 1.0


def make_atlas(cfg: SynthConfig) -> Atlas:
    mask = head_mask(cfg.dims, cfg.head_fraction)
    pts = np.argwhere(mask).astype(np.float64)
    m = cfg.n_regions
    if m > len(pts):
        raise ValueError(f"{m} regions exceed the {len(pts)} interior voxels")
    rng = np.random.default_rng([cfg.seed, 0])
    seeds = pts[rng.choice(len(pts), size=m, replace=False)]
    for _ in range(cfg.lloyd_iterations):
        _, owner = cKDTree(seeds).query(pts)
        counts = np.bincount(owner, minlength=m)
        sums = np.stack([np.bincount(owner, weights=pts[:, a], minlength=m) for a in range(3)], axis=1)
        keep = counts > 0
        seeds[keep] = sums[keep] / counts[keep, None]
    _, owner = cKDTree(seeds).query(pts)
    present = np.unique(owner)
    if present.size != m:
        raise ValueError("Voronoi partition produced empty regions; try another seed")
    labels = np.zeros(cfg.dims)
    idx = pts.astype(np.int64)
    labels[idx[:, 0], idx[:, 1], idx[:, 2]] = owner + 1
    return Atlas(Volume(labels), [f"Region{r:02d}" for r in range(1, m + 1)])


@dataclass
class Subject:
    volume: Volume
    scale: float
    hits: list[tuple[bool, bool]]


def sample_subject(cfg: SynthConfig, atlas: Atlas, label: int, rng: np.random.Generator) -> Subject:
    if label not in (0, 1):
        raise ValueError("label must be 0 or 1")
    lab = atlas.labels.data
    scale = float(rng.uniform(0.9, 1.1))
    factor = np.ones(atlas.n_regions + 1)
    factor[0] = 0.0
    hits = []
    # draws happen for both classes so that the stream does not depend on the label
    draws = rng.random((len(cfg.interactions), 2))
    if label == 1:
        for r, f in cfg.effects:
            factor[r] *= 1.0 - f
    for (a, b), d in zip(cfg.interactions, draws):
        ha, hb = bool(d[0] < cfg.hit_probability), bool(d[1] < cfg.hit_probability)
        hits.append((ha, hb) if label == 1 else (False, False))
        if label == 1 and ha and hb:
            factor[a] *= 1.0 - cfg.interaction_reduction
            factor[b] *= 1.0 - cfg.interaction_reduction
    img = BASELINE * scale * factor[lab.astype(np.int64)]
    noise = rng.standard_normal(cfg.dims)
    if cfg.noise_sd > 0:
        img = img + cfg.noise_sd * noise
    return Subject(Volume(np.clip(img, 0.0, 1.0)), scale, hits)


@dataclass
class Cohort:
    volumes: list[Volume]
    labels: np.ndarray
    icv: np.ndarray
    ids: list[str]
    seeds: list[int]
    atlas: Atlas
    config: SynthConfig
    true_labels: np.ndarray | None = None  # before label noise

    def __len__(self):
        return len(self.volumes)

    def subset(self, idx) -> "Cohort":
        idx = np.asarray(idx, dtype=np.int64)
        return Cohort([self.volumes[i] for i in idx], self.labels[idx], self.icv[idx],
                      [self.ids[i] for i in idx], [self.seeds[i] for i in idx], self.atlas,
                      self.config, None if self.true_labels is None else self.true_labels[idx])


def make_cohort(cfg: SynthConfig, atlas: Atlas | None = None) -> Cohort:
    atlas = atlas or make_atlas(cfg)
    n = 2 * cfg.n_per_class
    true = np.repeat([0, 1], cfg.n_per_class)
    mask_count = float((atlas.labels.data > 0).sum())
    vols, icv, seeds, labels = [], [], [], []
    for i in range(n):
        rng = np.random.default_rng([cfg.seed, 1, i])
        s = sample_subject(cfg, atlas, int(true[i]), rng)
        vols.append(s.volume)
        icv.append(mask_count * s.scale)
        seeds.append(i)
        flip = rng.random() < cfg.label_noise
        labels.append(1 - true[i] if flip else true[i])
    ids = [f"S{i:04d}" for i in range(n)]
    return Cohort(vols, np.array(labels, dtype=np.int64), np.array(icv), ids, seeds, atlas, cfg, true)


def save_cohort(cohort: Cohort, directory: str | Path) -> None:
    d = Path(directory)
    (d / "subjects").mkdir(parents=True, exist_ok=True)
    for sid, v in zip(cohort.ids, cohort.volumes):
        write_rv1(d / "subjects" / f"{sid}.rv1", v)
    write_rv1(d / "atlas.rv1", cohort.atlas.labels)
    (d / "atlas.json").write_text(json.dumps({"names": cohort.atlas.names}))
    (d / "synth_config.json").write_text(json.dumps(cohort.config.to_dict(), indent=1))
    with open(d / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "icv", "seed"])
        for sid, y, c, s in zip(cohort.ids, cohort.labels, cohort.icv, cohort.seeds):
            w.writerow([sid, int(y), repr(float(c)), s])


def load_cohort(directory: str | Path) -> Cohort:
    d = Path(directory)
    with open(d / "manifest.csv") as fh:
        rows = list(csv.DictReader(fh))
    atlas = Atlas(read_rv1(d / "atlas.rv1"), json.loads((d / "atlas.json").read_text())["names"])
    cfg = SynthConfig.from_dict(json.loads((d / "synth_config.json").read_text()))
    vols = [read_rv1(d / "subjects" / f"{r['id']}.rv1") for r in rows]
    return Cohort(vols, np.array([int(r["label"]) for r in rows]), np.array([float(r["icv"]) for r in rows]),
                  [r["id"] for r in rows], [int(r["seed"]) for r in rows], atlas, cfg)
