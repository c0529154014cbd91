"""Imputation fidelity (RMSE, Wasserstein), utility (AUROC of a logistic
classifier) and representation similarity (linear CKA)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    pass


def _missing_cells(imputed, truth, mask) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    imputed = np.asarray(imputed, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    missing = np.asarray(mask) == 0
    if imputed.shape != truth.shape or imputed.shape != missing.shape:
        raise ValueError(f"shape mismatch: {imputed.shape}, {truth.shape}, {missing.shape}")
    if not missing.any():
        raise UndefinedMetricError("no missing entries to score")
    return imputed, truth, missing


def rmse(imputed, truth, mask) -> float:
    """Root mean squared error over the missing cells (``mask == 0``) only."""
    imputed, truth, missing = _missing_cells(imputed, truth, mask)
    err = imputed[missing] - truth[missing]
    return math.sqrt(float(np.mean(err * err)))


def wasserstein_1d(a, b) -> float:
    """W1 between two empirical samples.

    Equal sizes: mean absolute difference of the sorted samples. Otherwise
    both quantile functions are evaluated at ``max(len(a), len(b))``
    midpoint levels ``(i + 0.5) / m``. The sum is exactly rounded, so the
    result does not depend on summation order.
    """
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise UndefinedMetricError("empty sample")
    if a.size != b.size:
        m = max(a.size, b.size)
        levels = (np.arange(m) + 0.5) / m
        a = a[np.minimum((levels * a.size).astype(np.intp), a.size - 1)]
        b = b[np.minimum((levels * b.size).astype(np.intp), b.size - 1)]
    return math.fsum(np.abs(a - b).tolist()) / a.size


def per_feature_scores(imputed, truth, mask) -> list[dict[str, float] | None]:
    imputed, truth, missing = _missing_cells(imputed, truth, mask)
    out: list[dict[str, float] | None] = []
    for j in range(imputed.shape[1]):
        rows = missing[:, j]
        if not rows.any():
            out.append(None)
            continue
        err = imputed[rows, j] - truth[rows, j]
        out.append({
            "n_missing": int(rows.sum()),
            "rmse": math.sqrt(float(np.mean(err * err))),
            "wd": wasserstein_1d(imputed[rows, j], truth[rows, j]),
        })
    return out


def wd(imputed, truth, mask) -> float:
    """Mean over features with missing cells of the per-feature W1 distance
    between imputed and true values at those cells."""
    scores = [s["wd"] for s in per_feature_scores(imputed, truth, mask) if s is not None]
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# AUROC
# ---------------------------------------------------------------------------

def auroc_score(scores, positive) -> float:
    """Rank-statistic AUROC; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    positive = np.asarray(positive, dtype=bool).ravel()
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative examples")
    ranks = rankdata(scores, method="average")
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class LogisticClassifier:
    """Logistic regression; one-vs-rest when there are more than two classes."""

    classes: np.ndarray
    weights: np.ndarray      # (n_models, n_features)
    bias: np.ndarray         # (n_models,)
    mean: np.ndarray
    scale: np.ndarray
    l2: float = 1e-4
    lr: float = 0.1
    iterations: int = 500

    def decision_function(self, features) -> np.ndarray:
        z = (np.asarray(features, dtype=np.float64) - self.mean) / self.scale
        return z @ self.weights.T + self.bias

    def predict_proba(self, features) -> np.ndarray:
        return expit(self.decision_function(features))


def _gd_binary(z: np.ndarray, y: np.ndarray, l2: float, lr: float, iterations: int):
    n, p = z.shape
    w = np.zeros(p)
    b = 0.0
    for _ in range(iterations):
        r = expit(z @ w + b) - y
        w -= lr * (z.T @ r / n + l2 * w)
        b -= lr * float(r.mean())
    return w, b


def fit_logistic(features, labels, seed: int = 0, *, l2: float = 1e-4, lr: float = 0.1,
                 iterations: int = 500) -> LogisticClassifier:
    """Full-batch gradient descent from zero weights on standardised features.

    The fit is deterministic; ``seed`` is accepted for interface symmetry
    with the other seeded components and does not affect the result.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("features must be n x p with one label per row")
    if not np.isfinite(x).all():
        raise ValueError("features must be finite")
    classes = np.unique(y)
    if classes.size < 2:
        raise UndefinedMetricError("need at least two classes")
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    z = (x - mean) / scale
    targets = [classes[1]] if classes.size == 2 else list(classes)
    ws, bs = [], []
    for c in targets:
        w, b = _gd_binary(z, (y == c).astype(np.float64), l2, lr, iterations)
        ws.append(w)
        bs.append(b)
    return LogisticClassifier(classes=classes, weights=np.array(ws), bias=np.array(bs),
                              mean=mean, scale=scale, l2=l2, lr=lr, iterations=iterations)


def auroc(clf: LogisticClassifier, features, labels) -> float:
    """Binary AUROC, or macro-averaged one-vs-rest AUROC for multi-class."""
    y = np.asarray(labels)
    scores = clf.decision_function(features)
    if clf.classes.size == 2:
        return auroc_score(scores[:, 0], y == clf.classes[1])
    per_class = []
    for k, c in enumerate(clf.classes):
        pos = y == c
        if pos.any() and (~pos).any():
            per_class.append(auroc_score(scores[:, k], pos))
    if not per_class:
        raise UndefinedMetricError("test labels contain a single class")
    return float(np.mean(per_class))


def stratified_split(labels, test_fraction: float = 0.2, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Seeded per-class shuffle; each class contributes round(test_fraction * count) test rows."""
    y = np.asarray(labels)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 7))))
    train, test = [], []
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        k = int(round(test_fraction * idx.size))
        if idx.size > 1:
            k = min(max(k, 1), idx.size - 1)
        test.append(idx[:k])
        train.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def downstream_auroc(imputed, labels, seed: int = 0, test_fraction: float = 0.2) -> float:
    train, test = stratified_split(labels, test_fraction, seed)
    y = np.asarray(labels)
    clf = fit_logistic(imputed[train], y[train], seed)
    return auroc(clf, imputed[test], y[test])


# ---------------------------------------------------------------------------
# CKA
# ---------------------------------------------------------------------------

def cka(z1, z2) -> float:
    """Linear CKA of two representations of the same n rows."""
    a = np.asarray(z1, dtype=np.float64)
    b = np.asarray(z2, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ValueError("cka needs two matrices with the same number of rows")
    if a.shape[0] < 2:
        raise UndefinedMetricError("cka needs at least two rows")
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    aa = np.linalg.norm(a.T @ a)
    bb = np.linalg.norm(b.T @ b)
    if aa == 0 or bb == 0:
        raise UndefinedMetricError("cka undefined for a zero-variance representation")
    ab = np.linalg.norm(a.T @ b)
    return float(ab * ab / (aa * bb))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    method: str
    dataset: str
    mechanism: str
    ratio: float
    seed: int
    rmse: float
    wd: float
    auroc: float | None = None
    per_feature: dict[str, Any] = field(default_factory=dict)
    config: dict[str, Any] | None = None

    def __post_init__(self):
        if self.rmse < 0 or self.wd < 0:
            raise ValueError("rmse and wd must be non-negative")
        if self.auroc is not None and not 0.0 <= self.auroc <= 1.0:
            raise ValueError("auroc must lie in [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        if out["config"] is None:
            del out["config"]
        return out


def evaluate(imputed, truth, mask, *, feature_names: Sequence[str] | None = None,
             labels=None, seed: int = 0, **meta) -> MetricReport:
    """Score an imputation against ground truth; AUROC when labels are given."""
    scores = per_feature_scores(imputed, truth, mask)
    names = list(feature_names) if feature_names is not None else [f"x{j}" for j in range(len(scores))]
    per_feature = {name: s for name, s in zip(names, scores) if s is not None}
    utility = None
    if labels is not None:
        utility = downstream_auroc(np.asarray(imputed, dtype=np.float64), labels, seed)
    return MetricReport(rmse=rmse(imputed, truth, mask), wd=wd(imputed, truth, mask),
                        auroc=utility, per_feature=per_feature, seed=seed, **meta)
