"""Column-wise unconditional imputers: mean, median, most frequent."""

from __future__ import annotations

import warnings

import numpy as np

METHODS = ("mean", "median", "frequent")


def _most_frequent(col: np.ndarray) -> float:
    values, counts = np.unique(col, return_counts=True)
    # np.unique sorts, so argmax picks the smallest of tied modes
    return float(values[np.argmax(counts)])


def column_statistics(values, mask, method: str) -> np.ndarray:
    if method not in METHODS:
        raise ValueError(f"unknown baseline {method!r}; expected one of {METHODS}")
    x = np.asarray(values, dtype=np.float64)
    observed = np.asarray(mask).astype(bool)
    stats = np.zeros(x.shape[1])
    for j in range(x.shape[1]):
        col = x[observed[:, j], j]
        if col.size == 0:
            warnings.warn(f"feature {j} has no observed values; filling with 0", RuntimeWarning)
            continue
        if method == "mean":
            stats[j] = col.mean()
        elif method == "median":
            stats[j] = np.median(col)
        else:
            stats[j] = _most_frequent(col)
    return stats


def baseline_impute(values, mask, method: str = "mean") -> np.ndarray:
    """Fill every missing cell (``mask == 0``) with its column statistic over observed cells."""
    x = np.asarray(values, dtype=np.float64)
    observed = np.asarray(mask).astype(bool)
    stats = column_statistics(x, observed, method)
    return np.where(observed, x, stats[None, :])
