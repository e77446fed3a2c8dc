"""Binary classification metrics, bootstrap intervals, resampled t-tests and splits."""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

METRIC_NAMES = ("ACC", "SEN", "SPE", "AUC")


def _as_binary(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1:
        raise ValueError("labels must be one-dimensional")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    return y.astype(np.int64)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; ties between a positive and a negative count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = _as_binary(labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = stats.rankdata(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    y = _as_binary(labels)
    pred = np.asarray(scores) >= threshold
    return float(np.mean(pred == (y == 1)))


def sensitivity(scores, labels, threshold: float = 0.5) -> float:
    y = _as_binary(labels)
    pos = y == 1
    if not pos.any():
        return float("nan")
    return float(np.mean(np.asarray(scores)[pos] >= threshold))


def specificity(scores, labels, threshold: float = 0.5) -> float:
    y = _as_binary(labels)
    neg = y == 0
    if not neg.any():
        return float("nan")
    return float(np.mean(np.asarray(scores)[neg] < threshold))


METRICS: dict[str, Callable] = {
    "ACC": accuracy,
    "SEN": sensitivity,
    "SPE": specificity,
    "AUC": lambda s, y, threshold=0.5: auc(s, y),
}


@dataclass
class EvalReport:
    ACC: float
    SEN: float
    SPE: float
    AUC: float
    n_test: int
    threshold: float = 0.5
    ci: dict[str, tuple[float, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ci"] = {k: list(v) for k, v in self.ci.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def csv_row(self, model: str = "") -> dict:
        row = {"model": model, "n_test": self.n_test, "threshold": self.threshold}
        for m in METRIC_NAMES:
            row[m] = getattr(self, m)
            lo, hi = self.ci.get(m, (float("nan"), float("nan")))
            row[f"{m}_lo"] = lo
            row[f"{m}_hi"] = hi
        return row


def metrics(scores, labels, threshold: float = 0.5) -> EvalReport:
    s = np.asarray(scores, dtype=np.float64)
    y = _as_binary(labels)
    return EvalReport(
        ACC=accuracy(s, y, threshold),
        SEN=sensitivity(s, y, threshold),
        SPE=specificity(s, y, threshold),
        AUC=auc(s, y),
        n_test=int(y.size),
        threshold=threshold,
    )


def roc_points(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds) with thresholds in descending order, starting at (0, 0)."""
    s = np.asarray(scores, dtype=np.float64)
    y = _as_binary(labels)
    thresholds = np.unique(s)[::-1]
    n_pos = max(int(y.sum()), 1)
    n_neg = max(int(y.size - y.sum()), 1)
    tpr = [0.0]
    fpr = [0.0]
    for t in thresholds:
        pred = s >= t
        tpr.append(float(np.sum(pred & (y == 1)) / n_pos))
        fpr.append(float(np.sum(pred & (y == 0)) / n_neg))
    return np.array(fpr), np.array(tpr), np.concatenate([[np.inf], thresholds])


class BootstrapError(RuntimeError):
    pass


def _resolve_metric(metric) -> Callable:
    if callable(metric):
        return metric
    try:
        return METRICS[metric]
    except KeyError:
        raise ValueError(f"unknown metric {metric!r}") from None


def bootstrap_distribution(scores, labels, metric, reps: int, seed: int) -> np.ndarray:
    """Metric values over ``reps`` accepted resamples; single-class draws are redrawn."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    fn = _resolve_metric(metric)
    s = np.asarray(scores, dtype=np.float64)
    y = _as_binary(labels)
    rng = np.random.default_rng(seed)
    n = y.size
    values = np.empty(reps)
    accepted = redraws = 0
    while accepted < reps:
        idx = rng.integers(0, n, size=n)
        yb = y[idx]
        if yb.min() == yb.max():
            redraws += 1
            if redraws > 10 * reps:
                raise BootstrapError(
                    f"more than {10 * reps} single-class resamples; input too imbalanced"
                )
            continue
        values[accepted] = fn(s[idx], yb)
        accepted += 1
    return values


def bootstrap_ci(scores, labels, metric, reps: int = 100, seed: int = 0,
                 alpha: float = 0.05) -> tuple[float, float]:
    if reps < 20:
        warnings.warn(f"{reps} bootstrap repetitions give a fragile 95% interval", stacklevel=2)
    values = bootstrap_distribution(scores, labels, metric, reps, seed)
    lo, hi = np.percentile(values, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return float(lo), float(hi)


def evaluate(scores, labels, reps: int = 100, seed: int = 0, threshold: float = 0.5) -> EvalReport:
    """Point metrics plus percentile bootstrap CIs for all four metrics."""
    report = metrics(scores, labels, threshold)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for m in METRIC_NAMES:
            fn = METRICS[m]
            report.ci[m] = bootstrap_ci(scores, labels, lambda s, y, fn=fn: fn(s, y, threshold),
                                        reps=reps, seed=seed)
    return report


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    degenerate: bool = False


def corrected_resampled_ttest(diffs, n_train: int, n_test: int) -> TTestResult:
    """Paired t-test over repeated-split differences with the variance inflated
    by ``1/k + n_test/n_train`` to account for overlapping training sets."""
    d = np.asarray(diffs, dtype=np.float64)
    k = d.size
    if k < 2:
        raise ValueError("need at least two paired differences")
    mean = d.mean()
    var = d.var(ddof=1)
    if var == 0.0:
        t = 0.0 if mean == 0.0 else math.copysign(math.inf, mean)
        return TTestResult(t=t, p=float("nan"), degenerate=True)
    t = mean / math.sqrt((1.0 / k + n_test / n_train) * var)
    p = 2.0 * stats.t.sf(abs(t), df=k - 1)
    return TTestResult(t=float(t), p=float(p))


def naive_resampled_ttest(diffs) -> TTestResult:
    d = np.asarray(diffs, dtype=np.float64)
    k = d.size
    var = d.var(ddof=1)
    if var == 0.0:
        return TTestResult(t=0.0 if d.mean() == 0 else math.copysign(math.inf, d.mean()),
                           p=float("nan"), degenerate=True)
    t = d.mean() / math.sqrt(var / k)
    return TTestResult(t=float(t), p=float(2.0 * stats.t.sf(abs(t), df=k - 1)))


@dataclass(frozen=True)
class PairedBootstrapResult:
    diff: float
    ci: tuple[float, float]
    p: float
    degenerate: bool = False


def paired_bootstrap_test(scores_a, scores_b, labels, metric="AUC", reps: int = 1000,
                          seed: int = 0) -> PairedBootstrapResult:
    """Two-sided test of metric(a) - metric(b) = 0 by resampling subjects jointly."""
    fn = _resolve_metric(metric)
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    y = _as_binary(labels)
    if a.shape != b.shape or a.shape != y.shape:
        raise ValueError("mismatched subject sets")
    point = fn(a, y) - fn(b, y)
    rng = np.random.default_rng(seed)
    diffs = np.empty(reps)
    accepted = redraws = 0
    while accepted < reps:
        idx = rng.integers(0, y.size, size=y.size)
        yb = y[idx]
        if yb.min() == yb.max():
            redraws += 1
            if redraws > 10 * reps:
                raise BootstrapError("too many single-class resamples")
            continue
        diffs[accepted] = fn(a[idx], yb) - fn(b[idx], yb)
        accepted += 1
    lo, hi = np.percentile(diffs, [2.5, 97.5])
    if np.all(diffs == 0.0):
        return PairedBootstrapResult(float(point), (float(lo), float(hi)), float("nan"), True)
    below = (np.sum(diffs <= 0.0) + 1) / (reps + 1)
    above = (np.sum(diffs >= 0.0) + 1) / (reps + 1)
    p = min(1.0, 2.0 * min(below, above))
    return PairedBootstrapResult(float(point), (float(lo), float(hi)), float(p))


@dataclass(frozen=True)
class SplitPlan:
    """Part id per subject: 0/1 = train/test for a split, fold id for k-fold."""

    assignment: np.ndarray
    n_parts: int
    seed: int

    @property
    def train_idx(self) -> np.ndarray:
        return np.flatnonzero(self.assignment == 0)

    @property
    def test_idx(self) -> np.ndarray:
        return np.flatnonzero(self.assignment == 1)

    def fold(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """(train, test) indices of fold ``i``."""
        return np.flatnonzero(self.assignment != i), np.flatnonzero(self.assignment == i)

    def to_dict(self) -> dict:
        return {"assignment": self.assignment.tolist(), "n_parts": self.n_parts, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(np.asarray(d["assignment"], dtype=np.int64), int(d["n_parts"]), int(d["seed"]))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(labels, test_fraction: float, seed: int) -> SplitPlan:
    """Stratified train/test split.

    Per class ``n_test = floor(n_c * f + 0.5)``; if the class counts do not add
    up to ``floor(N * f + 0.5)`` the class with the largest (smallest)
    fractional remainder is bumped up (down) until they do.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    y = _as_binary(labels)
    classes = [0, 1]
    sizes = {c: int(np.sum(y == c)) for c in classes}
    exact = {c: sizes[c] * test_fraction for c in classes}
    n_test = {c: _round_half_up(exact[c]) for c in classes}
    target = _round_half_up(y.size * test_fraction)
    while sum(n_test.values()) < target:
        c = max(classes, key=lambda c: (exact[c] - n_test[c], -c))
        n_test[c] += 1
    while sum(n_test.values()) > target:
        c = min(classes, key=lambda c: (exact[c] - n_test[c], c))
        n_test[c] -= 1
    for c in classes:
        if n_test[c] < 1 or n_test[c] >= sizes[c]:
            raise ValueError(f"class {c} with {sizes[c]} subjects cannot be split at {test_fraction}")
    rng = np.random.default_rng(seed)
    assignment = np.zeros(y.size, dtype=np.int64)
    for c in classes:
        members = rng.permutation(np.flatnonzero(y == c))
        assignment[members[: n_test[c]]] = 1
    return SplitPlan(assignment, 2, seed)


def kfold_split(labels, k: int, seed: int) -> SplitPlan:
    """Stratified k folds; members are dealt round-robin across classes."""
    if k < 2:
        raise ValueError("k must be >= 2")
    y = _as_binary(labels)
    rng = np.random.default_rng(seed)
    assignment = np.empty(y.size, dtype=np.int64)
    offset = 0
    for c in (0, 1):
        members = rng.permutation(np.flatnonzero(y == c))
        if members.size < k:
            raise ValueError(f"class {c} has {members.size} subjects, fewer than k={k}")
        assignment[members] = (offset + np.arange(members.size)) % k
        offset += members.size
    return SplitPlan(assignment, k, seed)


def reports_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if not rows:
        return ""
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]))
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
