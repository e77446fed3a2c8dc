"""Multi-seed synthetic experiments built on the pipeline (ROI recovery,
DL-vs-V comparison on interaction cohorts, null calibration)."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .evaluation import auc, paired_bootstrap_test
from .occlusion import RoiSet
from .pipeline import PipelineConfig, Run
from .synthgen import load_cohort


def with_seed(cfg: PipelineConfig, seed: int) -> PipelineConfig:
    return replace(cfg, seed=seed).validate()


@dataclass
class RoiRecovery:
    seed: int
    hit: bool
    top_regions: list[list[int]]  # planted region ids touched by each of the top-n ROIs


def roi_recovery(cfg: PipelineConfig, seeds: Sequence[int], workdir: str | Path,
                 top_n: int = 3) -> list[RoiRecovery]:
    """Does any of the top-``top_n`` ROIs touch a voxel of a planted effect region?"""
    planted = [r for r, _ in cfg.synth.effects] + [r for pair in cfg.synth.interactions for r in pair]
    out = []
    for s in seeds:
        run = Run(with_seed(cfg, s), Path(workdir) / f"seed{s}")
        run.run("select-rois")
        labels = load_cohort(run.root / "cohort").atlas.labels.data
        rois = RoiSet.from_json((run.root / "rois" / "rois.json").read_text())
        touched = [sorted(set(np.unique(labels[r.patch.slices]).astype(int)) & set(planted))
                   for r in rois.rois[:top_n]]
        out.append(RoiRecovery(s, any(touched), touched))
    return out


@dataclass
class HeldOut:
    seed: int
    ids: list[str]
    labels: np.ndarray
    scores: dict[str, np.ndarray]

    def auc(self, model: str) -> float:
        return auc(self.scores[model], self.labels)


def held_out_predictions(run_root: Path) -> HeldOut:
    with open(run_root / "reports" / "predictions.csv") as fh:
        rows = list(csv.DictReader(fh))
    models = [k for k in rows[0] if k not in ("id", "label")]
    return HeldOut(-1, [r["id"] for r in rows], np.array([int(r["label"]) for r in rows]),
                   {m: np.array([float(r[m]) for r in rows]) for m in models})


def run_seeds(cfg: PipelineConfig, seeds: Sequence[int], workdir: str | Path,
              until: str = "evaluate") -> list[HeldOut]:
    out = []
    for s in seeds:
        run = Run(with_seed(cfg, s), Path(workdir) / f"seed{s}")
        run.run(until)
        h = held_out_predictions(run.root)
        h.seed = s
        out.append(h)
    return out


@dataclass
class PooledComparison:
    per_seed: list[tuple[int, float, float]]  # (seed, AUC a, AUC b)
    wins: int
    diff: float
    p: float


def pooled_comparison(results: Sequence[HeldOut], a: str = "EBM-DL", b: str = "EBM-V",
                      reps: int = 2000, seed: int = 0) -> PooledComparison:
    per_seed = [(h.seed, h.auc(a), h.auc(b)) for h in results]
    wins = sum(x > y for _, x, y in per_seed)
    sa = np.concatenate([h.scores[a] for h in results])
    sb = np.concatenate([h.scores[b] for h in results])
    y = np.concatenate([h.labels for h in results])
    r = paired_bootstrap_test(sa, sb, y, "AUC", reps=reps, seed=seed)
    return PooledComparison(per_seed, wins, r.diff, r.p)
