"""Benchmark orchestration: load, normalise, simulate, impute, score, report.

A benchmark is described by an :class:`ExperimentConfig`, usually read from
a YAML file (see ``configs/default.yaml``). Repetition ``r`` uses seed
``seed + r`` for the missingness simulator, the model and the AUROC split.
Reports are JSON with sorted keys, so equal inputs give equal bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from . import baselines, imputer
from .data import (
    IngestionError, TabularDataset, load_csv, normalize, read_mask_csv, synthetic_dataset,
)
from .metrics import MetricReport, evaluate
from .missingness import MissingnessSpec, simulate

METHODS = ("remasker",) + baselines.METHODS
REPORT_VERSION = 1
SYNTHETIC_PREFIX = "synthetic"


class ExperimentError(RuntimeError):
    """A pipeline failure, tagged with the stage that raised it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class ExperimentConfig:
    dataset: str = SYNTHETIC_PREFIX
    label_col: str | None = None
    missingness: MissingnessSpec = field(default_factory=lambda: MissingnessSpec("MCAR", 0.3))
    method: str = "remasker"
    remasker: imputer.RemaskerConfig = field(default_factory=imputer.RemaskerConfig)
    output: str | None = None
    repetitions: int = 1
    seed: int = 0
    synthetic_rows: int = 1000
    training_log: str | None = None
    checkpoint: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")
        if self.synthetic_rows < 2:
            raise ValueError("synthetic_rows must be at least 2")

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["missingness"] = {"mechanism": self.missingness.mechanism,
                              "ratio": self.missingness.target_ratio,
                              "observable_fraction": self.missingness.observable_fraction}
        return out

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> ExperimentConfig:
        raw = dict(raw or {})
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        miss = dict(raw.pop("missingness", None) or {})
        bad = set(miss) - {"mechanism", "ratio", "observable_fraction"}
        if bad:
            raise ValueError(f"unknown missingness keys: {sorted(bad)}")
        spec = MissingnessSpec(str(miss.get("mechanism", "MCAR")), float(miss.get("ratio", 0.3)),
                               float(miss.get("observable_fraction", 0.3)))
        model = imputer.RemaskerConfig.from_dict(raw.pop("remasker", None) or {})
        return cls(missingness=spec, remasker=model, **raw)


def load_config(path: str | Path) -> ExperimentConfig:
    import yaml

    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ExperimentError("config", f"cannot read {path}: {exc}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ExperimentError("config", f"{path}: top level must be a mapping")
    try:
        return ExperimentConfig.from_dict(raw or {})
    except (TypeError, ValueError) as exc:
        raise ExperimentError("config", f"{path}: {exc}") from None


def report_schema() -> dict[str, Any]:
    text = resources.files("remasker").joinpath("report.schema.json").read_text()
    return json.loads(text)


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def load_dataset(source: str, label_col: str | None = None, synthetic_rows: int = 1000) -> TabularDataset:
    """Read a CSV, or build the synthetic benchmark for ``synthetic`` / ``synthetic:<rows>``."""
    if source == SYNTHETIC_PREFIX or source.startswith(SYNTHETIC_PREFIX + ":"):
        _, _, rows = source.partition(":")
        n = int(rows) if rows else synthetic_rows
        ds = synthetic_dataset(n, 0)
        if label_col not in (None, ds.label_name):
            raise IngestionError(f"synthetic data has no column {label_col!r}")
        return ds
    if not Path(source).is_file():
        raise IngestionError(f"{source}: no such file")
    return load_csv(source, label_col=label_col)


def _stage(name: str):
    """Wrap a call so known errors re-raise as an :class:`ExperimentError` tagged ``name``."""
    def run(fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ExperimentError:
            raise
        except (ValueError, RuntimeError, OSError, KeyError) as exc:
            raise ExperimentError(name, str(exc)) from exc
    return run


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

def impute_with(method: str, holed: TabularDataset, model_config: imputer.RemaskerConfig,
                ) -> tuple[np.ndarray, imputer.RemaskerModel | None, imputer.TrainingLog | None]:
    if method == "remasker":
        model, log = imputer.fit(holed, model_config)
        return imputer.impute(model, holed), model, log
    return baselines.baseline_impute(holed.values, holed.mask, method), None, None


def _summary(runs: list[MetricReport]) -> dict[str, Any]:
    out = {}
    for key in ("rmse", "wd", "auroc"):
        vals = [getattr(r, key) for r in runs]
        if any(v is None for v in vals):
            out[key] = None
            continue
        arr = np.asarray(vals, dtype=np.float64)
        out[key] = {"mean": float(arr.mean()), "std": float(arr.std())}
    return out


def _suffixed(path: str, rep: int, repetitions: int) -> Path:
    p = Path(path)
    return p if repetitions == 1 else p.with_name(f"{p.stem}.rep{rep}{p.suffix}")


def run_experiment(config: ExperimentConfig) -> dict[str, Any]:
    """Run every repetition and return the report; writes it when ``config.output`` is set.

    Any failure raises :class:`ExperimentError` and removes files this call wrote.
    """
    written: list[Path] = []
    try:
        report = _run(config, written)
        if config.output:
            written.append(Path(config.output))
            _stage("persist")(write_report, config.output, report)
        return report
    except BaseException:
        for p in written:
            p.unlink(missing_ok=True)
        raise


def _run(config: ExperimentConfig, written: list[Path]) -> dict[str, Any]:
    raw = _stage("load")(load_dataset, config.dataset, config.label_col, config.synthetic_rows)
    if not raw.mask.all():
        raise ExperimentError("load", f"{config.dataset}: benchmark data must be complete "
                                      f"({int((raw.mask == 0).sum())} cells missing)")
    ds = _stage("normalize")(normalize, raw)
    truth = ds.values
    runs = []
    for rep in range(config.repetitions):
        seed = config.seed + rep
        spec = config.missingness.with_seed(seed)
        mask = _stage("simulate")(simulate, truth, spec)
        holed = ds.with_mask(mask)
        model_config = replace(config.remasker, seed=seed)
        imputed, model, log = _stage("impute")(impute_with, config.method, holed, model_config)
        if model is not None and config.checkpoint:
            path = _suffixed(config.checkpoint, rep, config.repetitions)
            written.append(path)
            _stage("persist")(model.save, path)
        if log is not None and config.training_log:
            path = _suffixed(config.training_log, rep, config.repetitions)
            written.append(path)
            _stage("persist")(log.save, path)
        result = _stage("evaluate")(
            evaluate, imputed, truth, mask, feature_names=ds.feature_names, labels=ds.labels,
            seed=seed, method=config.method, dataset=config.dataset,
            mechanism=spec.mechanism, ratio=spec.target_ratio)
        runs.append(result)
    return build_report(config.to_dict(), runs)


def build_report(config: dict[str, Any], runs: list[MetricReport]) -> dict[str, Any]:
    first = runs[0]
    return {
        "version": REPORT_VERSION,
        "method": first.method,
        "dataset": first.dataset,
        "mechanism": first.mechanism,
        "ratio": first.ratio,
        "config": config,
        "runs": [r.to_dict() for r in runs],
        "summary": _summary(runs),
    }


def score_external(imputed_path: str, truth_path: str, mask_path: str,
                   label_col: str | None = None, seed: int = 0) -> dict[str, Any]:
    """Score an imputed CSV against the truth and mask files written by ``simulate``.

    Both tables are scaled with the truth file's per-feature min/max.
    """
    truth_raw = _stage("load")(load_csv, truth_path, label_col=label_col)
    if not truth_raw.mask.all():
        raise ExperimentError("load", f"{truth_path}: truth file has missing cells")
    imputed_raw = _stage("load")(load_csv, imputed_path, label_col=label_col,
                                 categorical=[f.name for f in truth_raw.features if f.kind == "categorical"])
    mask, names = _stage("load")(read_mask_csv, mask_path)
    if names != truth_raw.feature_names or imputed_raw.feature_names != names:
        raise ExperimentError("load", "imputed, truth and mask files have different feature columns")
    if not imputed_raw.mask.all():
        raise ExperimentError("load", f"{imputed_path}: imputed file still has missing cells")
    if mask.shape != truth_raw.values.shape or imputed_raw.values.shape != mask.shape:
        raise ExperimentError("load", "imputed, truth and mask files have different row counts")
    for j, meta in enumerate(truth_raw.features):
        if meta.kind == "categorical":
            # re-code the imputed column with the truth file's categories
            imp_meta = imputed_raw.features[j]
            lookup = {c: i for i, c in enumerate(meta.categories)}
            try:
                imputed_raw.values[:, j] = [lookup[imp_meta.categories[int(v)]] for v in imputed_raw.values[:, j]]
            except KeyError as exc:
                raise ExperimentError("load", f"{imputed_path}: unknown category {exc} in {meta.name!r}") from None
    truth = normalize(truth_raw)
    imputed = normalize(imputed_raw, reference=truth)
    result = _stage("evaluate")(
        evaluate, imputed.values, truth.values, mask, feature_names=truth.feature_names,
        labels=truth.labels, seed=seed, method="external", dataset=imputed_path,
        mechanism="unknown", ratio=float((mask == 0).mean()))
    config = {"imputed": imputed_path, "truth": truth_path, "mask": mask_path,
              "label_col": label_col, "seed": seed}
    return build_report(config, [result])


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        raise ValueError(f"report contains a non-finite number: {obj}")
    if isinstance(obj, dict):
        for v in obj.values():
            _finite(v)
    elif isinstance(obj, list):
        for v in obj:
            _finite(v)


def write_report(path: str | Path, report: dict[str, Any]) -> None:
    _finite(report)
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
