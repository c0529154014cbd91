"""Command-line interface: ``impute``, ``simulate``, ``bench`` and ``inspect-log``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import baselines, imputer
from .data import (
    IngestionError, denormalize, load_csv, normalize, round_categoricals, write_csv, write_mask_csv,
)
from .experiment import (
    METHODS, ExperimentConfig, ExperimentError, load_config, load_dataset, run_experiment,
    score_external, write_report,
)
from .missingness import CalibrationError, MissingnessSpec, simulate

PROG = "remasker"

# flag -> RemaskerConfig field
_MODEL_FLAGS = {
    "epochs": "max_epochs",
    "width": "width",
    "enc_depth": "encoder_depth",
    "dec_depth": "decoder_depth",
    "mask_ratio": "masking_ratio",
    "heads": "heads",
    "batch_size": "batch_size",
    "loss_mode": "loss_mode",
}


def _model_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("model")
    g.add_argument("--method", choices=METHODS, help="imputer (default: remasker)")
    g.add_argument("--epochs", type=int, help="training epochs (default 600)")
    g.add_argument("--width", type=int, help="embedding width (default 64)")
    g.add_argument("--enc-depth", type=int, help="encoder blocks (default 8)")
    g.add_argument("--dec-depth", type=int, help="decoder blocks (default 4)")
    g.add_argument("--heads", type=int, help="attention heads (default 4)")
    g.add_argument("--mask-ratio", type=float, help="re-masking ratio (default 0.5)")
    g.add_argument("--batch-size", type=int, help="rows per batch (default 64)")
    g.add_argument("--loss-mode", choices=imputer.LOSS_MODES)
    g.add_argument("--seed", type=int, help="base seed (default 0)")
    g.add_argument("--label-col", help="column excluded from imputation")
    g.add_argument("--config", help="YAML benchmark/model config; flags override it")
    g.add_argument("--log", dest="training_log", help="write the per-epoch training log (JSON)")
    g.add_argument("--checkpoint", help="write the fitted model (.npz)")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=PROG, description="Masked-autoencoder imputation for tabular data.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    model = _model_parent()

    p = sub.add_parser("impute", parents=[model], help="fill the empty cells of a CSV")
    p.add_argument("--input", required=True, help="CSV with empty cells for missing values")
    p.add_argument("--output", required=True, help="imputed CSV")

    p = sub.add_parser("simulate", help="punch MCAR/MAR/MNAR holes into a complete CSV")
    p.add_argument("--input", required=True, help="complete CSV, or synthetic[:rows]")
    p.add_argument("--output", required=True,
                   help="holed CSV; <stem>.mask.csv and <stem>.truth.csv are written beside it")
    p.add_argument("--mechanism", type=str.lower, choices=("mcar", "mar", "mnar"), default="mcar")
    p.add_argument("--ratio", type=float, default=0.3)
    p.add_argument("--observable-fraction", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--label-col")

    p = sub.add_parser("bench", parents=[model], help="run a benchmark and write a JSON report")
    p.add_argument("--input", help="complete CSV or synthetic[:rows] (overrides config dataset)")
    p.add_argument("--output", help="report path (default: print to stdout)")
    p.add_argument("--mechanism", type=str.lower, choices=("mcar", "mar", "mnar"))
    p.add_argument("--ratio", type=float)
    p.add_argument("--observable-fraction", type=float)
    p.add_argument("--repetitions", type=int)
    p.add_argument("--imputed", help="score this imputed CSV instead of running an imputer")
    p.add_argument("--truth", help="truth CSV written by simulate (with --imputed)")
    p.add_argument("--mask", help="mask CSV written by simulate (with --imputed)")

    p = sub.add_parser("inspect-log", help="summarise a training-log JSON file")
    p.add_argument("--input", required=True)
    p.add_argument("--rows", type=int, default=10, help="epochs to tabulate (default 10)")
    return parser


# ---------------------------------------------------------------------------
# config assembly
# ---------------------------------------------------------------------------

def experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    for flag, name in (("input", "dataset"), ("method", "method"), ("seed", "seed"),
                       ("label_col", "label_col"), ("repetitions", "repetitions"),
                       ("training_log", "training_log"), ("checkpoint", "checkpoint"),
                       ("output", "output")):
        value = getattr(args, flag, None)
        if value is not None:
            changes[name] = value
    spec = cfg.missingness
    mech = getattr(args, "mechanism", None)
    ratio = getattr(args, "ratio", None)
    frac = getattr(args, "observable_fraction", None)
    if mech is not None or ratio is not None or frac is not None:
        spec = MissingnessSpec(mech or spec.mechanism,
                               spec.target_ratio if ratio is None else ratio,
                               spec.observable_fraction if frac is None else frac)
    model = cfg.remasker
    overrides = {f: getattr(args, a) for a, f in _MODEL_FLAGS.items() if getattr(args, a, None) is not None}
    if overrides:
        model = replace(model, **overrides)
    return replace(cfg, missingness=spec, remasker=model, **changes)


def _cleanup(paths: Sequence[Path]) -> None:
    for p in paths:
        p.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_impute(args: argparse.Namespace) -> int:
    cfg = experiment_config(args)
    stage = "load"
    written: list[Path] = []
    try:
        raw = load_csv(args.input, label_col=cfg.label_col)
        stage = "normalize"
        ds = normalize(raw)
        missing = int((ds.mask == 0).sum())
        stage = "impute"
        if cfg.method == "remasker":
            if missing == 0 and not cfg.checkpoint:
                filled = ds.values
            else:
                model, log = imputer.fit(ds, replace(cfg.remasker, seed=cfg.seed))
                filled = imputer.impute(model, ds)
                stage = "persist"
                if cfg.checkpoint:
                    written.append(Path(cfg.checkpoint))
                    model.save(cfg.checkpoint)
                if cfg.training_log:
                    written.append(Path(cfg.training_log))
                    log.save(cfg.training_log)
        else:
            filled = baselines.baseline_impute(ds.values, ds.mask, cfg.method)
        stage = "write"
        out = round_categoricals(ds, denormalize(ds, filled))
        written.append(Path(args.output))
        write_csv(args.output, raw, raw_values=np.where(raw.mask == 1, raw.values, out))
    except BaseException as exc:
        _cleanup(written)
        if isinstance(exc, (ValueError, RuntimeError, OSError)):
            raise ExperimentError(stage, str(exc)) from exc
        raise
    print(f"{args.output}: imputed {missing} of {ds.values.size} cells with {cfg.method}")
    return 0


def sidecar_paths(output: str | Path) -> tuple[Path, Path]:
    out = Path(output)
    stem = out.name[:-len(out.suffix)] if out.suffix else out.name
    return out.with_name(stem + ".mask.csv"), out.with_name(stem + ".truth.csv")


def cmd_simulate(args: argparse.Namespace) -> int:
    mask_path, truth_path = sidecar_paths(args.output)
    written: list[Path] = []
    stage = "load"
    try:
        raw = load_dataset(args.input, args.label_col)
        if not raw.mask.all():
            raise IngestionError(f"{args.input}: input must be complete to serve as ground truth")
        stage = "simulate"
        spec = MissingnessSpec(args.mechanism, args.ratio, args.observable_fraction, args.seed)
        # simulators see normalised values so MAR logits do not depend on units
        mask = simulate(normalize(raw).values, spec)
        stage = "write"
        for path in (Path(args.output), mask_path, truth_path):
            written.append(path)
        write_csv(args.output, raw.with_mask(mask))
        write_mask_csv(mask_path, mask, raw.feature_names)
        write_csv(truth_path, raw)
    except BaseException as exc:
        _cleanup(written)
        if isinstance(exc, (ValueError, RuntimeError, OSError)):
            raise ExperimentError(stage, str(exc)) from exc
        raise
    frac = float((mask == 0).mean())
    print(f"{args.output}: {spec.mechanism} missing fraction {frac:.4f}; wrote {mask_path} and {truth_path}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    external = [args.imputed, args.truth, args.mask]
    if any(v is not None for v in external):
        if any(v is None for v in external):
            raise _UsageError("--imputed, --truth and --mask must be given together")
        report = score_external(args.imputed, args.truth, args.mask, args.label_col,
                                args.seed if args.seed is not None else 0)
        output = args.output
        if output:
            write_report(output, report)
    else:
        cfg = experiment_config(args)
        report = run_experiment(cfg)
        output = cfg.output
    if output:
        s = report["summary"]
        auroc = "n/a" if s["auroc"] is None else f"{s['auroc']['mean']:.4f}"
        print(f"{output}: rmse {s['rmse']['mean']:.4f} wd {s['wd']['mean']:.4f} auroc {auroc} "
              f"over {len(report['runs'])} run(s)")
    else:
        print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def summarize_log(log: imputer.TrainingLog, rows: int = 10) -> str:
    if not log.entries:
        return "empty training log"
    losses = np.array(log.losses())
    best = int(np.argmin(losses))
    lines = [
        f"epochs      {len(log.entries)}",
        f"loss first  {losses[0]:.6f}",
        f"loss last   {losses[-1]:.6f}",
        f"loss best   {losses[best]:.6f} (epoch {log.entries[best].epoch})",
        f"lr range    {log.entries[0].lr:.3g} -> {log.entries[-1].lr:.3g}",
    ]
    cka = [(e.epoch, e.cka) for e in log.entries if e.cka is not None]
    if cka:
        lines.append("cka         " + ", ".join(f"{ep}:{v:.4f}" for ep, v in cka))
    n = len(log.entries)
    picks = sorted({int(round(i)) for i in np.linspace(0, n - 1, min(rows, n))})
    lines.append("")
    lines.append(f"{'epoch':>6} {'loss':>12} {'lr':>10}")
    for i in picks:
        e = log.entries[i]
        lines.append(f"{e.epoch:>6} {e.loss:>12.6f} {e.lr:>10.3g}")
    return "\n".join(lines)


def cmd_inspect_log(args: argparse.Namespace) -> int:
    try:
        log = imputer.TrainingLog.load(args.input)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ExperimentError("load", f"{args.input}: not a training log ({exc})") from None
    print(summarize_log(log, args.rows))
    return 0


class _UsageError(Exception):
    pass


COMMANDS = {"impute": cmd_impute, "simulate": cmd_simulate, "bench": cmd_bench,
            "inspect-log": cmd_inspect_log}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except _UsageError as exc:
        parser.error(str(exc))
    except (ExperimentError, IngestionError, CalibrationError, imputer.TrainingError,
            imputer.NotFittedError, ValueError, OSError) as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
