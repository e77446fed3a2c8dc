"""Explainable Boosting Machine for binary targets.

Cyclic gradient boosting of per-feature shape functions (and optional pair
grids) on quantile bins.  Each feature update averages ``bags`` shallow
trees whose split structure is grown on a bootstrap bag; leaf values are the
mean log-loss gradient of all boosting rows that fall in the leaf, so every
update is a descent step on the training loss.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from numba import njit

from .evaluation import stratified_split

FORMAT_NAME = "dlebm.ebm"
FORMAT_VERSION = 1


class NotFittedError(RuntimeError):
    pass


@dataclass
class TabularDataset:
    features: np.ndarray
    labels: np.ndarray
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be an N x n matrix")
        self.labels = np.asarray(self.labels).astype(np.int64)
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels must have one entry per row")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be 0/1")
        if not self.feature_names:
            self.feature_names = [f"x{j}" for j in range(self.features.shape[1])]
        self.feature_names = list(self.feature_names)
        if len(self.feature_names) != self.features.shape[1]:
            raise ValueError("one name per feature column required")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, rows) -> "TabularDataset":
        return TabularDataset(self.features[rows], self.labels[rows], self.feature_names)

    def columns(self, cols: Sequence[int]) -> "TabularDataset":
        cols = list(cols)
        return TabularDataset(self.features[:, cols], self.labels,
                              [self.feature_names[c] for c in cols])


@dataclass
class EbmConfig:
    rounds: int = 1000
    learning_rate: float = 0.01
    bags: int = 8
    max_leaves: int = 3
    max_bins: int = 32
    min_samples_leaf: int = 2
    early_stopping_rounds: int = 50
    validation_fraction: float = 0.15
    seed: int = 0


@dataclass
class BinMap:
    cuts: list[np.ndarray]

    def n_bins(self, j: int) -> int:
        return len(self.cuts[j]) + 1

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.empty(X.shape, dtype=np.int64)
        for j, c in enumerate(self.cuts):
            out[:, j] = np.searchsorted(c, X[:, j], side="right")
        return out


def fit_bins(data: TabularDataset, max_bins: int = 32) -> BinMap:
    """Quantile cut points per feature.

    A cut is always an observed training value and a value equal to a cut
    belongs to the bin above it, so bin assignment depends only on ranks.
    """
    if max_bins < 2:
        raise ValueError("max_bins must be >= 2")
    if data.n_rows == 0:
        raise ValueError("cannot bin an empty dataset")
    cuts = []
    for j in range(data.n_features):
        x = data.features[:, j]
        uniq = np.unique(x)
        if uniq.size <= max_bins:
            c = uniq[1:]
        else:
            q = np.quantile(x, np.arange(1, max_bins) / max_bins)
            c = uniq[np.searchsorted(uniq, q, side="left")]
            c = np.unique(c)
            c = c[c > uniq[0]]
        cuts.append(np.asarray(c, dtype=np.float64))
    return BinMap(cuts)


@dataclass
class PairTerm:
    i: int
    j: int
    grid: np.ndarray

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("pair term needs two distinct features")


@dataclass
class EbmModel:
    intercept: float
    bin_map: BinMap
    mains: list[np.ndarray]
    feature_names: list[str]
    config: EbmConfig
    pairs: list[PairTerm] = field(default_factory=list)
    history: dict = field(default_factory=dict, compare=False)

    @property
    def n_features(self) -> int:
        return len(self.mains)

    def term_names(self) -> list[str]:
        names = list(self.feature_names)
        names += [f"{self.feature_names[p.i]} × {self.feature_names[p.j]}" for p in self.pairs]
        return names

    def _binned(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        if not np.all(np.isfinite(X)):
            raise ValueError("features must be finite")
        return self.bin_map.transform(X)

    def contributions(self, X) -> np.ndarray:
        """Per-row, per-term log-odds contributions (mains first, then pairs)."""
        xb = self._binned(X)
        cols = [self.mains[j][xb[:, j]] for j in range(self.n_features)]
        cols += [p.grid[xb[:, p.i], xb[:, p.j]] for p in self.pairs]
        return np.stack(cols, axis=1) if cols else np.zeros((xb.shape[0], 0))

    def decision_function(self, X) -> np.ndarray:
        contrib = self.contributions(X)
        score = np.full(contrib.shape[0], self.intercept)
        for t in range(contrib.shape[1]):
            score = score + contrib[:, t]
        return score

    def predict_proba(self, X) -> np.ndarray:
        return _sigmoid(self.decision_function(X))

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "intercept": self.intercept,
            "feature_names": self.feature_names,
            "cuts": [c.tolist() for c in self.bin_map.cuts],
            "mains": [m.tolist() for m in self.mains],
            "pairs": [{"i": p.i, "j": p.j, "grid": p.grid.tolist()} for p in self.pairs],
            "config": asdict(self.config),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "EbmModel":
        if d.get("format") != FORMAT_NAME or d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model document {d.get('format')!r} v{d.get('version')}")
        return cls(
            intercept=float(d["intercept"]),
            bin_map=BinMap([np.asarray(c, dtype=np.float64) for c in d["cuts"]]),
            mains=[np.asarray(m, dtype=np.float64) for m in d["mains"]],
            feature_names=list(d["feature_names"]),
            config=EbmConfig(**d["config"]),
            pairs=[PairTerm(int(p["i"]), int(p["j"]),
                            np.asarray(p["grid"], dtype=np.float64).reshape(
                                len(d["cuts"][p["i"]]) + 1, len(d["cuts"][p["j"]]) + 1))
                   for p in d["pairs"]],
        )

    @classmethod
    def from_json(cls, text: str) -> "EbmModel":
        return cls.from_dict(json.loads(text))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z)))


def _logloss(y, score) -> float:
    # log(1 + e^s) - y*s, written to stay finite for large |s|
    return float(np.mean(np.logaddexp(0.0, score) - y * score))


def predict_score(model: EbmModel, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("predict_score takes a single feature vector")
    return float(model.decision_function(x)[0])


def term_contributions(model: EbmModel, x) -> list[tuple[str, float]]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("term_contributions takes a single feature vector")
    return list(zip(model.term_names(), model.contributions(x)[0].tolist()))


def global_importance(model: EbmModel, data: TabularDataset) -> list[tuple[str, float]]:
    """Mean absolute contribution of each term over ``data``, largest first."""
    if data.n_rows == 0:
        raise ValueError("importance needs at least one row")
    imp = np.abs(model.contributions(data.features)).mean(axis=0)
    names = model.term_names()
    order = sorted(range(len(names)), key=lambda t: (-imp[t], t))
    return [(names[t], float(imp[t])) for t in order]


# --------------------------------------------------------------------------
# tree growth kernels


@njit(cache=True)
def _grow_1d(bag_g, bag_n, full_g, full_n, max_leaves, min_leaf):
    """Average over bags of greedy best-first piecewise-constant fits.

    bag_g/bag_n: (K, B) gradient sums and row counts per bin in each bag.
    Leaf values come from the full-data sums full_g/full_n.
    """
    K, B = bag_g.shape
    out = np.zeros(B)
    lo = np.empty(max_leaves, dtype=np.int64)
    hi = np.empty(max_leaves, dtype=np.int64)
    cg = np.zeros(B + 1)
    cn = np.zeros(B + 1)
    for k in range(K):
        for b in range(B):
            cg[b + 1] = cg[b] + bag_g[k, b]
            cn[b + 1] = cn[b] + bag_n[k, b]
        n_leaves = 1
        lo[0] = 0
        hi[0] = B
        while n_leaves < max_leaves:
            best_gain = 0.0
            best_leaf = -1
            best_cut = -1
            for leaf in range(n_leaves):
                a = lo[leaf]
                z = hi[leaf]
                sg = cg[z] - cg[a]
                sn = cn[z] - cn[a]
                if sn <= 0.0:
                    continue
                parent = sg * sg / sn
                for c in range(a + 1, z):
                    ln = cn[c] - cn[a]
                    rn = sn - ln
                    if ln < min_leaf or rn < min_leaf:
                        continue
                    lg = cg[c] - cg[a]
                    rg = sg - lg
                    gain = lg * lg / ln + rg * rg / rn - parent
                    if gain > best_gain + 1e-15:
                        best_gain = gain
                        best_leaf = leaf
                        best_cut = c
            if best_leaf < 0:
                break
            lo[n_leaves] = best_cut
            hi[n_leaves] = hi[best_leaf]
            hi[best_leaf] = best_cut
            n_leaves += 1
        for leaf in range(n_leaves):
            sg = 0.0
            sn = 0.0
            for b in range(lo[leaf], hi[leaf]):
                sg += full_g[b]
                sn += full_n[b]
            v = sg / sn if sn > 0.0 else 0.0
            for b in range(lo[leaf], hi[leaf]):
                out[b] += v
    return out / K


@njit(cache=True)
def _rect_sum(P, a0, z0, a1, z1):
    return P[z0, z1] - P[a0, z1] - P[z0, a1] + P[a0, a1]


@njit(cache=True)
def _grow_2d(bag_g, bag_n, full_g, full_n, max_leaves, min_leaf):
    """2D analogue of _grow_1d on a (B0, B1) grid with axis-aligned splits."""
    K, B0, B1 = bag_g.shape
    out = np.zeros((B0, B1))
    rect = np.empty((max_leaves, 4), dtype=np.int64)
    Pg = np.zeros((B0 + 1, B1 + 1))
    Pn = np.zeros((B0 + 1, B1 + 1))
    for k in range(K):
        for a in range(B0):
            for b in range(B1):
                Pg[a + 1, b + 1] = Pg[a, b + 1] + Pg[a + 1, b] - Pg[a, b] + bag_g[k, a, b]
                Pn[a + 1, b + 1] = Pn[a, b + 1] + Pn[a + 1, b] - Pn[a, b] + bag_n[k, a, b]
        n_leaves = 1
        rect[0, 0] = 0
        rect[0, 1] = B0
        rect[0, 2] = 0
        rect[0, 3] = B1
        while n_leaves < max_leaves:
            best_gain = 0.0
            best_leaf = -1
            best_axis = -1
            best_cut = -1
            for leaf in range(n_leaves):
                a0 = rect[leaf, 0]
                z0 = rect[leaf, 1]
                a1 = rect[leaf, 2]
                z1 = rect[leaf, 3]
                sg = _rect_sum(Pg, a0, z0, a1, z1)
                sn = _rect_sum(Pn, a0, z0, a1, z1)
                if sn <= 0.0:
                    continue
                parent = sg * sg / sn
                for c in range(a0 + 1, z0):
                    ln = _rect_sum(Pn, a0, c, a1, z1)
                    rn = sn - ln
                    if ln < min_leaf or rn < min_leaf:
                        continue
                    lg = _rect_sum(Pg, a0, c, a1, z1)
                    rg = sg - lg
                    gain = lg * lg / ln + rg * rg / rn - parent
                    if gain > best_gain + 1e-15:
                        best_gain = gain
                        best_leaf = leaf
                        best_axis = 0
                        best_cut = c
                for c in range(a1 + 1, z1):
                    ln = _rect_sum(Pn, a0, z0, a1, c)
                    rn = sn - ln
                    if ln < min_leaf or rn < min_leaf:
                        continue
                    lg = _rect_sum(Pg, a0, z0, a1, c)
                    rg = sg - lg
                    gain = lg * lg / ln + rg * rg / rn - parent
                    if gain > best_gain + 1e-15:
                        best_gain = gain
                        best_leaf = leaf
                        best_axis = 1
                        best_cut = c
            if best_leaf < 0:
                break
            for t in range(4):
                rect[n_leaves, t] = rect[best_leaf, t]
            if best_axis == 0:
                rect[n_leaves, 0] = best_cut
                rect[best_leaf, 1] = best_cut
            else:
                rect[n_leaves, 2] = best_cut
                rect[best_leaf, 3] = best_cut
            n_leaves += 1
        for leaf in range(n_leaves):
            sg = 0.0
            sn = 0.0
            for a in range(rect[leaf, 0], rect[leaf, 1]):
                for b in range(rect[leaf, 2], rect[leaf, 3]):
                    sg += full_g[a, b]
                    sn += full_n[a, b]
            v = sg / sn if sn > 0.0 else 0.0
            for a in range(rect[leaf, 0], rect[leaf, 1]):
                for b in range(rect[leaf, 2], rect[leaf, 3]):
                    out[a, b] += v
    return out / K


# --------------------------------------------------------------------------
# boosting


def _holdout(labels: np.ndarray, cfg: EbmConfig) -> tuple[np.ndarray, np.ndarray]:
    n = labels.size
    all_rows = np.arange(n)
    if cfg.early_stopping_rounds <= 0 or cfg.validation_fraction <= 0 or cfg.rounds == 0:
        return all_rows, all_rows[:0]
    try:
        plan = stratified_split(labels, cfg.validation_fraction, cfg.seed)
    except ValueError:
        return all_rows, all_rows[:0]
    return plan.train_idx, plan.test_idx


class _Booster:
    """Shared cyclic loop for main and pair terms."""

    def __init__(self, y, score, cfg: EbmConfig, train_rows, val_rows, rng):
        self.y = y
        self.cfg = cfg
        self.tr = train_rows
        self.va = val_rows
        self.rng = rng
        self.score_tr = score[train_rows].copy()
        self.score_va = score[val_rows].copy()

    def bag_weights(self) -> np.ndarray:
        n = self.tr.size
        return self.rng.multinomial(n, np.full(n, 1.0 / n), size=self.cfg.bags).astype(np.float64)

    def run(self, terms: list, update_fn) -> dict:
        """``terms`` hold (cells_tr, cells_va, n_cells, scores, shape); scores updated in place."""
        cfg = self.cfg
        y_tr = self.y[self.tr]
        y_va = self.y[self.va]
        train_loss = [_logloss(y_tr, self.score_tr)]
        val_loss = [_logloss(y_va, self.score_va)] if self.va.size else []
        best = (val_loss[0] if val_loss else math.inf, 0, [t[3].copy() for t in terms])
        stale = 0
        rounds_done = 0
        onehots = []
        for cells_tr, _, n_cells, _, _ in terms:
            onehot = np.zeros((cells_tr.size, n_cells))
            onehot[np.arange(cells_tr.size), cells_tr] = 1.0
            onehots.append(onehot)
        for r in range(cfg.rounds):
            for (cells_tr, cells_va, n_cells, scores, shape), onehot in zip(terms, onehots):
                g = y_tr - _sigmoid(self.score_tr)
                full_g = np.bincount(cells_tr, weights=g, minlength=n_cells)
                full_n = np.bincount(cells_tr, minlength=n_cells).astype(np.float64)
                W = self.bag_weights()
                bag_g = (W * g) @ onehot
                bag_n = W @ onehot
                inc = update_fn(bag_g, bag_n, full_g, full_n, shape)
                step = cfg.learning_rate * inc
                scores += step.reshape(scores.shape)
                flat = step.ravel()
                self.score_tr += flat[cells_tr]
                if self.va.size:
                    self.score_va += flat[cells_va]
            rounds_done = r + 1
            train_loss.append(_logloss(y_tr, self.score_tr))
            if self.va.size:
                vl = _logloss(y_va, self.score_va)
                val_loss.append(vl)
                if vl < best[0] - 1e-12:
                    best = (vl, rounds_done, [t[3].copy() for t in terms])
                    stale = 0
                else:
                    stale += 1
                    if stale >= cfg.early_stopping_rounds:
                        break
        if self.va.size:
            for t, saved in zip(terms, best[2]):
                t[3][...] = saved
            best_round = best[1]
        else:
            best_round = rounds_done
        return {"train_loss": train_loss, "val_loss": val_loss,
                "rounds_run": rounds_done, "best_round": best_round}


def _center(scores: np.ndarray, counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    if scores.size == 1:  # constant feature: the whole term belongs in the intercept
        mean = float(scores.flat[0])
        scores[...] = 0.0
        return mean
    mean = float((scores * counts).sum() / total)
    scores -= mean
    return mean


def fit_ebm(data: TabularDataset, config: EbmConfig | None = None) -> EbmModel:
    """Boost main-effect shape functions only; see :func:`add_pair_terms`."""
    cfg = config or EbmConfig()
    if cfg.rounds < 0:
        raise ValueError("rounds must be >= 0")
    y = data.labels
    if y.min() == y.max():
        raise ValueError("both classes must be present to fit")
    bin_map = fit_bins(data, cfg.max_bins)
    xb = bin_map.transform(data.features)
    base = float(y.mean())
    intercept = math.log(base / (1.0 - base))
    mains = [np.zeros(bin_map.n_bins(j)) for j in range(data.n_features)]

    rng = np.random.default_rng(cfg.seed)
    tr, va = _holdout(y, cfg)
    booster = _Booster(y, np.full(y.size, intercept), cfg, tr, va, rng)
    terms = [(xb[tr, j], xb[va, j], mains[j].size, mains[j], None) for j in range(data.n_features)]
    history = booster.run(
        terms, lambda bg, bn, fg, fn, _: _grow_1d(bg, bn, fg, fn, cfg.max_leaves, cfg.min_samples_leaf)
    )
    for j, m in enumerate(mains):
        counts = np.bincount(xb[:, j], minlength=m.size).astype(np.float64)
        intercept += _center(m, counts)
    return EbmModel(intercept, bin_map, mains, list(data.feature_names), replace(cfg),
                    history={"mains": history})


def pair_strengths(xb: np.ndarray, n_bins: Sequence[int], residual: np.ndarray) -> dict:
    """Best squared-residual reduction of a single 2x2 cut for every feature pair.

    The reduction of a partition into quadrants q is ``sum_q S_q^2 / n_q``
    (S = residual sum), i.e. the drop from ``sum r^2`` to the residual sum of
    squares after fitting a constant per quadrant.
    """
    n = xb.shape[1]
    out = {}
    for i in range(n):
        for j in range(i + 1, n):
            bi, bj = n_bins[i], n_bins[j]
            cell = xb[:, i] * bj + xb[:, j]
            S = np.bincount(cell, weights=residual, minlength=bi * bj).reshape(bi, bj)
            C = np.bincount(cell, minlength=bi * bj).reshape(bi, bj).astype(np.float64)
            PS = np.zeros((bi + 1, bj + 1))
            PC = np.zeros((bi + 1, bj + 1))
            PS[1:, 1:] = S.cumsum(0).cumsum(1)
            PC[1:, 1:] = C.cumsum(0).cumsum(1)
            ci = np.arange(1, bi) if bi > 1 else np.array([0])
            cj = np.arange(1, bj) if bj > 1 else np.array([0])
            a, b = np.meshgrid(ci, cj, indexing="ij")
            gain = np.zeros(a.shape)
            totS, totC = PS[bi, bj], PC[bi, bj]
            ll_s, ll_c = PS[a, b], PC[a, b]
            lr_s, lr_c = PS[a, bj] - ll_s, PC[a, bj] - ll_c
            ul_s, ul_c = PS[bi, b] - ll_s, PC[bi, b] - ll_c
            ur_s = totS - ll_s - lr_s - ul_s
            ur_c = totC - ll_c - lr_c - ul_c
            for s_q, c_q in ((ll_s, ll_c), (lr_s, lr_c), (ul_s, ul_c), (ur_s, ur_c)):
                with np.errstate(divide="ignore", invalid="ignore"):
                    gain += np.where(c_q > 0, s_q * s_q / np.where(c_q > 0, c_q, 1.0), 0.0)
            out[(i, j)] = float(gain.max())
    return out


def rank_pairs(strengths: dict, top_k: int) -> list[tuple[int, int]]:
    ordered = sorted(strengths, key=lambda ij: (-strengths[ij], ij))
    return ordered[:top_k]


def detect_pairs(data: TabularDataset, model: EbmModel, top_k: int) -> list[tuple[int, int]]:
    """Rank feature pairs by interaction strength in the residuals of ``model``."""
    if model is None or not model.mains:
        raise NotFittedError("detect_pairs needs a fitted model")
    n = data.n_features
    if top_k > n * (n - 1) // 2:
        raise ValueError(f"top_k={top_k} exceeds the {n * (n - 1) // 2} available pairs")
    residual = data.labels - model.predict_proba(data.features)
    xb = model.bin_map.transform(data.features)
    nb = [model.bin_map.n_bins(j) for j in range(n)]
    return rank_pairs(pair_strengths(xb, nb, residual), top_k)


def add_pair_terms(data: TabularDataset, model: EbmModel,
                   pairs: Sequence[tuple[int, int]]) -> EbmModel:
    """Boost pair grids on the residual of the frozen model; mains are untouched."""
    existing = {(min(p.i, p.j), max(p.i, p.j)) for p in model.pairs}
    keys = [(min(i, j), max(i, j)) for i, j in pairs]
    if len(set(keys)) != len(keys) or existing & set(keys):
        raise ValueError("duplicate pair term")
    new = EbmModel(model.intercept, model.bin_map, [m.copy() for m in model.mains],
                   list(model.feature_names), replace(model.config),
                   [PairTerm(p.i, p.j, p.grid.copy()) for p in model.pairs],
                   history=dict(model.history))
    if not keys:
        return new
    cfg = model.config
    y = data.labels
    xb = model.bin_map.transform(data.features)
    score = model.decision_function(data.features)
    rng = np.random.default_rng(cfg.seed + 1)
    tr, va = _holdout(y, cfg)
    booster = _Booster(y, score, cfg, tr, va, rng)
    grids, terms = [], []
    for i, j in keys:
        bi, bj = model.bin_map.n_bins(i), model.bin_map.n_bins(j)
        grid = np.zeros((bi, bj))
        cell = xb[:, i] * bj + xb[:, j]
        grids.append((i, j, grid, cell))
        terms.append((cell[tr], cell[va], bi * bj, grid, (bi, bj)))

    def update(bg, bn, fg, fn, shape):
        K = bg.shape[0]
        return _grow_2d(bg.reshape(K, *shape), bn.reshape(K, *shape), fg.reshape(shape),
                        fn.reshape(shape), cfg.max_leaves, cfg.min_samples_leaf)

    new.history["pairs"] = booster.run(terms, update)
    for i, j, grid, cell in grids:
        counts = np.bincount(cell, minlength=grid.size).astype(np.float64).reshape(grid.shape)
        new.intercept += _center(grid, counts)
        new.pairs.append(PairTerm(i, j, grid))
    return new


def fit_ebm_with_pairs(data: TabularDataset, config: EbmConfig | None = None,
                       n_pairs: int = 2) -> EbmModel:
    model = fit_ebm(data, config)
    n = data.n_features
    k = min(n_pairs, n * (n - 1) // 2)
    if k <= 0:
        return model
    return add_pair_terms(data, model, detect_pairs(data, model, k))
