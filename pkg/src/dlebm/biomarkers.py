"""EBM input features: out-of-fold scorer probabilities and ICV-corrected region volumes."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .ebm import TabularDataset
from .volume import Volume

TOTAL_BRAIN = "Total brain"


@dataclass
class Atlas:
    labels: Volume
    names: list[str]

    def __post_init__(self):
        ids = np.unique(self.labels.data)
        ids = ids[ids != 0]
        m = len(self.names)
        if not np.array_equal(ids, np.arange(1, m + 1)):
            raise ValueError(f"atlas ids must be contiguous 1..{m}, found {ids.tolist()}")

    @property
    def n_regions(self) -> int:
        return len(self.names)

    def mask(self) -> np.ndarray:
        return self.labels.data > 0

    def region_mask(self, rid: int) -> np.ndarray:
        return self.labels.data == rid


@dataclass
class ColumnSource:
    kind: str  # "DL-global" | "DL-roi" | "volume"
    source: str


@dataclass
class BiomarkerTable:
    data: TabularDataset
    provenance: list[ColumnSource]
    subject_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.provenance) != self.data.n_features:
            raise ValueError("one provenance entry per column required")
        for j, p in enumerate(self.provenance):
            if p.kind.startswith("DL"):
                col = self.data.features[:, j]
                if col.min() < 0.0 or col.max() > 1.0:
                    raise ValueError(f"DL column {self.data.feature_names[j]} outside [0, 1]")

    def select(self, cols: Sequence[int]) -> "BiomarkerTable":
        return BiomarkerTable(self.data.columns(cols), [self.provenance[c] for c in cols],
                              self.subject_ids)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subject", "label", *self.data.feature_names])
        ids = self.subject_ids or [str(i) for i in range(self.data.n_rows)]
        for sid, y, row in zip(ids, self.data.labels, self.data.features):
            w.writerow([sid, int(y), *(repr(float(v)) for v in row)])
        return buf.getvalue()

    def sidecar(self) -> str:
        return json.dumps([{"column": n, "kind": p.kind, "source": p.source}
                           for n, p in zip(self.data.feature_names, self.provenance)], indent=1)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.with_suffix(".csv").write_text(self.to_csv())
        path.with_suffix(".json").write_text(self.sidecar())

    @classmethod
    def load(cls, path: str | Path) -> "BiomarkerTable":
        path = Path(path)
        rows = list(csv.reader(path.with_suffix(".csv").read_text().splitlines()))
        names = rows[0][2:]
        ids = [r[0] for r in rows[1:]]
        labels = np.array([int(r[1]) for r in rows[1:]])
        X = np.array([[float(v) for v in r[2:]] for r in rows[1:]]).reshape(len(ids), len(names))
        prov = [ColumnSource(d["kind"], d["source"])
                for d in json.loads(path.with_suffix(".json").read_text())]
        return cls(TabularDataset(X, labels, names), prov, ids)


# -- DL biomarkers -----------------------------------------------------------

class FoldLeakageError(RuntimeError):
    pass


def check_folds(folds: Sequence[tuple[np.ndarray, np.ndarray]], n: int) -> None:
    """Every subject tested exactly once and never trained on in its own fold."""
    seen = np.zeros(n, dtype=np.int64)
    for k, (train, test) in enumerate(folds):
        if np.intersect1d(train, test).size:
            raise FoldLeakageError(f"fold {k}: subjects in both train and test")
        seen[np.asarray(test, dtype=np.int64)] += 1
    if not np.all(seen == 1):
        raise FoldLeakageError("test folds do not partition the cohort")


@dataclass
class OofResult:
    oof: np.ndarray  # one out-of-fold probability per optimization subject
    held_out: np.ndarray  # mean over fold models, one per held-out subject
    fold_scorers: list


def oof_dl_biomarkers(volumes: Sequence[Volume], labels, folds: Sequence[tuple[np.ndarray, np.ndarray]],
                      scorer_trainer: Callable, held_out: Sequence[Volume] = ()) -> OofResult:
    """``scorer_trainer(train_volumes, train_labels, fold_index)`` returns an object with ``predict``."""
    y = np.asarray(labels)
    check_folds(folds, len(volumes))
    oof = np.full(len(volumes), np.nan)
    per_fold_held = []
    scorers = []
    for k, (train, test) in enumerate(folds):
        scorer = scorer_trainer([volumes[i] for i in train], y[train], k)
        scorers.append(scorer)
        oof[test] = _predict(scorer, [volumes[i] for i in test])
        if len(held_out):
            per_fold_held.append(_predict(scorer, held_out))
    held = np.mean(per_fold_held, axis=0) if per_fold_held else np.zeros(0)
    return OofResult(oof, held, scorers)


def _predict(scorer, volumes) -> np.ndarray:
    if hasattr(scorer, "predict"):
        return np.asarray(scorer.predict(volumes), dtype=np.float64)
    return np.array([scorer(v) for v in volumes], dtype=np.float64)


def ensemble_average(glo: float, locs: Sequence[float]) -> float:
    values = [glo, *locs]
    if glo is None or not values:
        raise ValueError("ensemble needs at least one probability")
    return float(np.mean(values))


# -- volume biomarkers -------------------------------------------------------

def region_volumes(v: Volume, atlas: Atlas) -> dict[str, float]:
    """Summed intensity per region plus the whole-mask total."""
    if v.dims != atlas.labels.dims:
        raise ValueError(f"atlas dims {atlas.labels.dims} differ from volume dims {v.dims}")
    ids = atlas.labels.data.astype(np.int64).ravel()
    sums = np.bincount(ids, weights=v.data.ravel(), minlength=atlas.n_regions + 1)
    out = {name: float(sums[r + 1]) for r, name in enumerate(atlas.names)}
    out[TOTAL_BRAIN] = float(sums[1:].sum())
    return out


def icv_correct(volumes, icv: float) -> np.ndarray:
    if not icv > 0:
        raise ValueError("intracranial volume must be positive")
    return np.asarray(volumes, dtype=np.float64) / icv


def volume_table(volumes: Sequence[Volume], labels, icv, atlas: Atlas,
                 subject_ids: Sequence[str] = ()) -> BiomarkerTable:
    rows, names = [], None
    for v, c in zip(volumes, icv):
        rv = region_volumes(v, atlas)
        names = list(rv)
        rows.append(icv_correct(list(rv.values()), c))
    X = np.array(rows).reshape(len(volumes), len(names) if names else 0)
    prov = [ColumnSource("volume", n) for n in names]
    return BiomarkerTable(TabularDataset(X, labels, names), prov, list(subject_ids))


def welch_pvalues(X: np.ndarray, labels) -> np.ndarray:
    """Two-sided Welch t-test p-value per column; columns constant in both classes get p = 1."""
    y = np.asarray(labels)
    if y.min() == y.max():
        raise ValueError("both classes are needed")
    a, b = X[y == 1], X[y == 0]
    p = np.ones(X.shape[1])
    for j in range(X.shape[1]):
        if np.var(a[:, j]) == 0.0 and np.var(b[:, j]) == 0.0:
            continue
        res = stats.ttest_ind(a[:, j], b[:, j], equal_var=False)
        p[j] = 1.0 if np.isnan(res.pvalue) else float(res.pvalue)
    return p


def select_v_biomarkers(table: BiomarkerTable, labels, top_k: int) -> list[tuple[int, str, float]]:
    """Columns with the smallest Welch p-values: (column index, name, p), ties by name."""
    names = table.data.feature_names
    if top_k > len(names):
        raise ValueError(f"top_k={top_k} exceeds the {len(names)} columns")
    p = welch_pvalues(table.data.features, labels)
    order = sorted(range(len(names)), key=lambda j: (p[j], names[j]))
    return [(j, names[j], float(p[j])) for j in order[:top_k]]
