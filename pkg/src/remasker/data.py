"""Tabular datasets: CSV ingestion, min-max normalisation and CSV output.

Empty CSV fields are missing values. Categorical columns are
ordinal-encoded in lexicographic category order and treated as a single
numeric feature; decoded output rounds to the nearest valid code.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class IngestionError(ValueError):
    pass


@dataclass
class FeatureMeta:
    name: str
    kind: str = "continuous"          # or "categorical"
    categories: tuple[str, ...] | None = None
    norm_min: float | None = None
    norm_max: float | None = None
    constant: bool = False

    @property
    def category_count(self) -> int | None:
        return None if self.categories is None else len(self.categories)


@dataclass
class TabularDataset:
    """``values`` holds NaN wherever ``mask`` is 0."""

    values: np.ndarray
    mask: np.ndarray
    features: list[FeatureMeta]
    labels: np.ndarray | None = None
    label_name: str | None = None
    label_categories: tuple[str, ...] | None = None
    columns: list[str] | None = None          # full header order, label included
    raw_cells: list[list[str]] | None = None  # verbatim feature cells, for pass-through
    raw_labels: list[str] | None = None
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.values.shape != self.mask.shape or self.values.ndim != 2:
            raise ValueError("values and mask must be congruent n x d matrices")
        if len(self.features) != self.values.shape[1]:
            raise ValueError("one FeatureMeta per column required")
        self.values = np.where(self.mask == 1, self.values, np.nan)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def feature_names(self) -> list[str]:
        return [f.name for f in self.features]

    @classmethod
    def from_arrays(cls, values, mask=None, names: Sequence[str] | None = None,
                    labels=None) -> TabularDataset:
        values = np.asarray(values, dtype=np.float64)
        if mask is None:
            mask = (~np.isnan(values)).astype(np.uint8)
        names = list(names) if names is not None else [f"x{j}" for j in range(values.shape[1])]
        return cls(values=values, mask=mask, features=[FeatureMeta(n) for n in names],
                   labels=None if labels is None else np.asarray(labels))

    def with_mask(self, mask) -> TabularDataset:
        """Copy with extra cells hidden: the new mask is ``self.mask & mask``.

        Hidden cells are set to NaN so nothing downstream can read them.
        """
        combined = (self.mask & np.asarray(mask, dtype=np.uint8)).astype(np.uint8)
        values = np.where(combined == 1, self.values, np.nan)
        return replace(self, values=values, mask=combined,
                       features=[replace(f) for f in self.features])

    def filled(self, fill: float = 0.0) -> np.ndarray:
        return np.where(self.mask == 1, self.values, fill)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def _parse_float(cell: str) -> float | None:
    try:
        v = float(cell)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def load_csv(path: str | Path, *, categorical: Iterable[str] = (), continuous: Iterable[str] = (),
             label_col: str | None = None) -> TabularDataset:
    """Read a headed CSV. Columns not declared either way are continuous when
    every non-empty cell parses as a finite float, categorical otherwise.
    Normalisation is not applied."""
    categorical, continuous = set(categorical), set(continuous)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise IngestionError(f"{path}: empty file")
    header, body = [h.strip() for h in rows[0]], rows[1:]
    if len(header) < 2:
        raise IngestionError(f"{path}: need at least two columns")
    if len(set(header)) != len(header):
        raise IngestionError(f"{path}: duplicate column names")
    for name in categorical | continuous | ({label_col} if label_col else set()):
        if name not in header:
            raise IngestionError(f"{path}: unknown column {name!r}")
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise IngestionError(f"{path}: line {r} has {len(row)} fields, header has {len(header)}")

    cells = [[c.strip() for c in row] for row in body]
    feature_cols = [j for j, h in enumerate(header) if h != label_col]
    n, d = len(cells), len(feature_cols)
    values = np.full((n, d), np.nan)
    mask = np.zeros((n, d), dtype=np.uint8)
    features = []
    for k, j in enumerate(feature_cols):
        name = header[j]
        col = [row[j] for row in cells]
        parsed = [None if c == "" else _parse_float(c) for c in col]
        if name in categorical:
            kind = "categorical"
        elif name in continuous:
            kind = "continuous"
            for r, (c, v) in enumerate(zip(col, parsed), start=2):
                if c != "" and v is None:
                    raise IngestionError(f"{path}: line {r}, column {name!r}: cannot parse {c!r} as a number")
        else:
            kind = "continuous" if all(c == "" or v is not None for c, v in zip(col, parsed)) else "categorical"
        if kind == "continuous":
            meta = FeatureMeta(name)
            for r, v in enumerate(parsed):
                if v is not None:
                    values[r, k] = v
                    mask[r, k] = 1
        else:
            cats = tuple(sorted({c for c in col if c != ""}))
            code = {c: i for i, c in enumerate(cats)}
            meta = FeatureMeta(name, kind="categorical", categories=cats)
            for r, c in enumerate(col):
                if c != "":
                    values[r, k] = code[c]
                    mask[r, k] = 1
        features.append(meta)

    labels = raw_labels = label_cats = None
    if label_col is not None:
        j = header.index(label_col)
        raw_labels = [row[j] for row in cells]
        if any(c == "" for c in raw_labels):
            raise IngestionError(f"{path}: label column {label_col!r} has empty cells")
        nums = [_parse_float(c) for c in raw_labels]
        if all(v is not None for v in nums):
            label_cats = tuple(str(v) for v in sorted(set(nums)))
            code = {v: i for i, v in enumerate(sorted(set(nums)))}
            labels = np.array([code[v] for v in nums])
        else:
            label_cats = tuple(sorted(set(raw_labels)))
            code = {c: i for i, c in enumerate(label_cats)}
            labels = np.array([code[c] for c in raw_labels])

    return TabularDataset(values=values, mask=mask, features=features, labels=labels,
                          label_name=label_col, label_categories=label_cats, columns=header,
                          raw_cells=[[row[j] for j in feature_cols] for row in cells],
                          raw_labels=raw_labels)


def format_value(value: float, meta: FeatureMeta) -> str:
    if meta.kind == "categorical":
        code = int(np.clip(np.rint(value), 0, len(meta.categories) - 1))
        return meta.categories[code]
    return repr(float(value))


def write_csv(path: str | Path, dataset: TabularDataset, raw_values: np.ndarray | None = None) -> None:
    """Write raw-scale values; NaN cells are left empty.

    Observed cells whose original text is known are written verbatim.
    """
    values = dataset.values if raw_values is None else np.asarray(raw_values, dtype=np.float64)
    if dataset.normalized and raw_values is None:
        raise ValueError("pass raw-scale values when writing a normalised dataset")
    columns = dataset.columns or dataset.feature_names + ([dataset.label_name] if dataset.label_name else [])
    feat_pos = {f.name: k for k, f in enumerate(dataset.features)}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for r in range(dataset.n):
            out = []
            for name in columns:
                if name == dataset.label_name and name not in feat_pos:
                    if dataset.raw_labels is not None:
                        out.append(dataset.raw_labels[r])
                    else:
                        out.append(str(dataset.labels[r]))
                    continue
                k = feat_pos[name]
                v = values[r, k]
                if dataset.mask[r, k] and dataset.raw_cells is not None:
                    out.append(dataset.raw_cells[r][k])
                elif np.isnan(v):
                    out.append("")
                else:
                    out.append(format_value(v, dataset.features[k]))
            writer.writerow(out)


def write_mask_csv(path: str | Path, mask: np.ndarray, names: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(names))
        for row in np.asarray(mask, dtype=np.uint8):
            writer.writerow([str(int(v)) for v in row])


def read_mask_csv(path: str | Path) -> tuple[np.ndarray, list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names, body = rows[0], rows[1:]
    try:
        mask = np.array([[int(c) for c in row] for row in body], dtype=np.uint8).reshape(len(body), len(names))
    except ValueError as exc:
        raise IngestionError(f"{path}: malformed mask file ({exc})") from None
    if not np.isin(mask, (0, 1)).all():
        raise IngestionError(f"{path}: mask entries must be 0 or 1")
    return mask, names


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def normalize(dataset: TabularDataset, reference: TabularDataset | None = None) -> TabularDataset:
    """Min-max scale each feature using observed cells (of ``reference`` if given).

    Features with no spread map to 0.5 and are flagged ``constant``.
    """
    if dataset.normalized:
        raise ValueError("dataset is already normalised")
    ref = reference or dataset
    features, cols = [], []
    for j, meta in enumerate(dataset.features):
        if reference is not None and ref.normalized:
            lo, hi = ref.features[j].norm_min, ref.features[j].norm_max
        else:
            obs = ref.values[ref.mask[:, j] == 1, j]
            lo, hi = (float(obs.min()), float(obs.max())) if obs.size else (0.0, 0.0)
        constant = not hi > lo
        col = dataset.values[:, j]
        cols.append(np.full_like(col, 0.5) if constant else (col - lo) / (hi - lo))
        features.append(replace(meta, norm_min=lo, norm_max=hi, constant=constant))
    values = np.column_stack(cols) if cols else dataset.values.copy()
    return replace(dataset, values=values, mask=dataset.mask.copy(), features=features, normalized=True)


def denormalize(dataset: TabularDataset, matrix) -> np.ndarray:
    """Map a normalised-space matrix back to raw scale (exact inverse for non-constant features)."""
    if not dataset.normalized:
        raise ValueError("dataset carries no normalisation parameters")
    x = np.asarray(matrix, dtype=np.float64)
    out = np.empty_like(x)
    for j, meta in enumerate(dataset.features):
        if meta.constant:
            out[:, j] = meta.norm_min
        else:
            out[:, j] = x[:, j] * (meta.norm_max - meta.norm_min) + meta.norm_min
    return out


def round_categoricals(dataset: TabularDataset, raw) -> np.ndarray:
    out = np.array(raw, dtype=np.float64)
    for j, meta in enumerate(dataset.features):
        if meta.kind == "categorical":
            out[:, j] = np.clip(np.rint(out[:, j]), 0, len(meta.categories) - 1)
    return out


# ---------------------------------------------------------------------------
# synthetic benchmark data
# ---------------------------------------------------------------------------

SYNTHETIC_FEATURES = ("z1", "z2", "sum", "diff", "z1_sq", "tanh_z2", "prod", "sin_mix")


def make_synthetic(n: int = 1000, seed: int = 0, noise: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Eight features driven by two latent normals through linear and nonlinear maps.

    Returns the complete raw matrix and a binary label ``z1 + z2 > 0``.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 99))))
    z1, z2 = rng.standard_normal((2, n))
    cols = np.column_stack([
        z1,
        z2,
        z1 + z2,
        z1 - 0.5 * z2,
        z1 ** 2,
        np.tanh(2.0 * z2),
        z1 * z2,
        np.sin(2.0 * z1) + 0.5 * z2,
    ])
    cols += noise * rng.standard_normal(cols.shape)
    labels = (z1 + z2 > 0).astype(int)
    return cols, labels


def synthetic_dataset(n: int = 1000, seed: int = 0) -> TabularDataset:
    values, labels = make_synthetic(n, seed)
    ds = TabularDataset.from_arrays(values, names=SYNTHETIC_FEATURES, labels=labels)
    ds.label_name = "label"
    return ds
