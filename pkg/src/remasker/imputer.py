"""Masked-autoencoder imputer trained by re-masking observed values.

Fitting: every epoch, each row's observed cells are split at random into a
visible set and a hidden ("re-masked") set. The encoder sees only the
visible cells; the decoder receives their latents at their feature
positions, the shared mask token everywhere else, and predicts every
feature. The loss is the MSE on the re-masked and/or visible cells,
depending on ``loss_mode``.

Imputation: the encoder sees every observed cell, no re-masking, and
decoder predictions fill only the missing cells.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import nn
from .data import TabularDataset
from .masking import remask_batch, triples_to_arrays, MaskTriple
from .metrics import cka
from .tensor import (
    AdamState, LrSchedule, Tensor, adam_step, clip_global_norm, cosine_lr,
    flatten_parameters, mse, no_grad, parameter, tune_allocator,
)

LOSS_MODES = ("remask_and_unmask", "remask_only", "unmask_only")

_STREAM_INIT = 0
_STREAM_SHUFFLE = 1
_STREAM_REMASK = 2


class NotFittedError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class RemaskerConfig:
    encoder_depth: int = 8
    decoder_depth: int = 4
    width: int = 64
    heads: int = 4
    masking_ratio: float = 0.5
    max_epochs: int = 600
    batch_size: int = 64
    base_lr: float = 1e-3
    min_lr: float = 0.0
    clip_threshold: float = 5.0
    loss_mode: str = "remask_and_unmask"
    seed: int = 0

    def __post_init__(self):
        if self.encoder_depth < 0 or self.decoder_depth < 0:
            raise ValueError("depths must be non-negative")
        if self.width <= 0 or self.heads <= 0 or self.batch_size <= 0:
            raise ValueError("width, heads and batch_size must be positive")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.width % 2:
            raise ValueError("width must be even for sinusoidal positions")
        if not 0.0 <= self.masking_ratio < 1.0:
            raise ValueError("masking_ratio must lie in [0, 1)")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be non-negative")
        if self.clip_threshold <= 0:
            raise ValueError("clip_threshold must be positive")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RemaskerConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown RemaskerConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    cka: float | None = None


@dataclass
class TrainingLog:
    entries: list[EpochRecord] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [e.loss for e in self.entries]

    def to_json(self) -> str:
        rows = []
        for e in self.entries:
            row = {"epoch": e.epoch, "loss": e.loss, "lr": e.lr}
            if e.cka is not None:
                row["cka"] = e.cka
            rows.append(row)
        return json.dumps(rows, indent=2)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> TrainingLog:
        rows = json.loads(Path(path).read_text())
        if not isinstance(rows, list):
            raise ValueError(f"{path}: expected a JSON array of epoch records")
        return cls(entries=[EpochRecord(int(r["epoch"]), float(r["loss"]), float(r["lr"]), r.get("cka"))
                            for r in rows])


class RemaskerModel:
    def __init__(self, n_features: int, config: RemaskerConfig):
        if n_features < 1:
            raise ValueError("need at least one feature")
        self.config = config
        self.n_features = n_features
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((config.seed, _STREAM_INIT))))
        w, h = config.width, config.heads
        self.embedder = nn.ValueEmbedder(n_features, w, rng)
        self.encoder = [nn.TransformerBlock(w, h, rng) for _ in range(config.encoder_depth)]
        self.decoder = [nn.TransformerBlock(w, h, rng) for _ in range(config.decoder_depth)]
        self.mask_token = nn.MaskToken(w, rng)
        self.head_w = parameter(nn.truncated_normal(rng, (w, 1)))
        self.head_b = parameter(np.zeros(1))
        self.flat = flatten_parameters(self.parameters())
        self.fitted = False

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = self.embedder.named_parameters("embedder.")
        for i, b in enumerate(self.encoder):
            out += b.named_parameters(f"encoder.{i}.")
        for i, b in enumerate(self.decoder):
            out += b.named_parameters(f"decoder.{i}.")
        out += self.mask_token.named_parameters("mask_token.")
        out += [("head.weight", self.head_w), ("head.bias", self.head_b)]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        self.flat.grad.fill(0.0)

    # -- forward -------------------------------------------------------
    def encode(self, batch: nn.TokenBatch) -> Tensor:
        return nn.encode(batch, self.encoder, self.embedder)

    def decode(self, latents: Tensor, batch: nn.TokenBatch) -> Tensor:
        return nn.decode(latents, batch, self.n_features, self.decoder, self.mask_token,
                         self.head_w, self.head_b, self.embedder.pe)

    def forward(self, values: np.ndarray, visible: np.ndarray) -> Tensor:
        """Predict all features for rows that each have at least one visible cell."""
        batch = nn.TokenBatch.from_selection(values, visible)
        return self.decode(self.encode(batch), batch)

    def predict(self, values: np.ndarray, visible: np.ndarray) -> np.ndarray:
        """Gradient-free predictions; rows with no visible cell decode from mask tokens alone."""
        values = np.nan_to_num(np.asarray(values, dtype=np.float64))
        visible = np.asarray(visible, dtype=bool)
        out = np.empty(visible.shape)
        has = visible.any(axis=1)
        with no_grad():
            if has.any():
                out[has] = self.forward(values[has], visible[has]).data
            if (~has).any():
                empty = nn.TokenBatch.from_selection(values[~has], visible[~has])
                z = Tensor(np.zeros((int((~has).sum()), 0, self.config.width)))
                out[~has] = self.decode(z, empty).data
        return out

    # -- persistence ---------------------------------------------------
    def save(self, path: str | Path) -> None:
        arrays = {name: p.data for name, p in self.named_parameters()}
        meta = {"config": self.config.to_dict(), "n_features": self.n_features, "fitted": self.fitted}
        nn.save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path: str | Path) -> RemaskerModel:
        arrays, meta = nn.load_checkpoint(path)
        model = cls(meta["n_features"], RemaskerConfig.from_dict(meta["config"]))
        params = dict(model.named_parameters())
        if set(params) != set(arrays):
            raise ValueError(f"{path}: parameter names do not match the configured architecture")
        for name, arr in arrays.items():
            if arr.shape != params[name].shape:
                raise ValueError(f"{path}: {name} has shape {arr.shape}, expected {params[name].shape}")
            params[name].data[...] = arr
        model.fitted = bool(meta["fitted"])
        return model


def loss_weights(sets: dict[str, np.ndarray], mode: str) -> np.ndarray:
    if mode == "remask_and_unmask":
        return sets["remasked"] | sets["unmasked"]
    if mode == "remask_only":
        return sets["remasked"].copy()
    if mode == "unmask_only":
        return sets["unmasked"].copy()
    raise ValueError(f"unknown loss mode {mode!r}")


def reconstruction_loss(pred, target, triple: MaskTriple, mode: str) -> float:
    """Per-row MSE over the cells selected by ``mode``; 0.0 if none are selected."""
    sets = {k: triple.indicator(k)[None, :] for k in ("masked", "remasked", "unmasked")}
    w = loss_weights(sets, mode)[0]
    if not w.any():
        return 0.0
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    return mse(pred, np.asarray(target, dtype=np.float64), w.astype(np.float64)).item()


Callback = Callable[[int, RemaskerModel], "float | None"]


def _check_fit_input(data: TabularDataset) -> tuple[np.ndarray, np.ndarray]:
    values = np.asarray(data.values, dtype=np.float64)
    mask = np.asarray(data.mask).astype(bool)
    if values.ndim != 2:
        raise ValueError("data must be n x d")
    n, d = values.shape
    if n < 1 or d < 2:
        raise ValueError(f"need n >= 1 rows and d >= 2 features, got {n} x {d}")
    if not np.isfinite(values[mask]).all():
        raise ValueError("observed values must be finite")
    return values, mask


def fit(data: TabularDataset, config: RemaskerConfig | None = None,
        callback: Callback | None = None) -> tuple[RemaskerModel, TrainingLog]:
    """Train a model on ``data`` (already normalised).

    ``callback(epoch, model)`` runs after each completed epoch (1-based);
    a float it returns is stored as that epoch's CKA sample.
    """
    config = config or RemaskerConfig()
    values, mask = _check_fit_input(data)
    n, d = values.shape
    filled = np.where(mask, values, 0.0)
    model = RemaskerModel(d, config)
    log = TrainingLog()
    for j in np.flatnonzero(~mask.any(axis=0)):
        msg = f"feature {j} is missing in every row; it is only ever decoded from the mask token"
        warnings.warn(msg, RuntimeWarning)
        log.warnings.append(msg)
    if config.max_epochs == 0:
        model.fitted = True
        return model, log

    tune_allocator()
    trainable = np.flatnonzero(mask.any(axis=1))
    if trainable.size == 0:
        raise ValueError("every row is fully missing; nothing to fit")
    flat = [model.flat]
    state = AdamState.create(flat)
    schedule = LrSchedule(config.max_epochs, config.base_lr, config.min_lr)

    for epoch in range(config.max_epochs):
        lr = cosine_lr(schedule, epoch)
        shuffle = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence((config.seed, _STREAM_SHUFFLE, epoch))))
        order = shuffle.permutation(trainable)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, order.size, config.batch_size)):
            rows = order[start:start + config.batch_size]
            triples = remask_batch(mask[rows], config.masking_ratio, config.seed,
                                   row_ids=rows, stream=_STREAM_REMASK + epoch)
            sets = triples_to_arrays(triples)
            weights = loss_weights(sets, config.loss_mode)
            selected = int(weights.sum())
            if selected == 0:
                continue
            model.zero_grad()
            pred = model.forward(filled[rows], sets["unmasked"])
            loss = mse(pred, filled[rows], weights.astype(np.float64))
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch + 1}, batch {b}, lr {lr:.3g}")
            loss.backward()
            norm = clip_global_norm(flat, config.clip_threshold)
            if not np.isfinite(norm):
                raise TrainingError(f"non-finite gradient norm at epoch {epoch + 1}, batch {b}")
            adam_step(flat, [model.flat.grad], state, lr)
            total += value * selected
            count += selected
        record = EpochRecord(epoch + 1, total / count if count else float("nan"), lr)
        if callback is not None:
            sample = callback(epoch + 1, model)
            if sample is not None:
                record.cka = float(sample)
        log.entries.append(record)

    model.fitted = True
    return model, log


def impute(model: RemaskerModel, data: TabularDataset, batch_size: int = 256) -> np.ndarray:
    """Return ``data.values`` with missing cells replaced by model predictions."""
    if not model.fitted:
        raise NotFittedError("model has not been fitted")
    values = np.asarray(data.values, dtype=np.float64)
    mask = np.asarray(data.mask).astype(bool)
    if values.ndim != 2 or values.shape[1] != model.n_features:
        raise ValueError(f"data has {values.shape[-1]} features, model expects {model.n_features}")
    out = values.copy()
    for start in range(0, len(values), batch_size):
        sl = slice(start, start + batch_size)
        rows_mask = mask[sl]
        if rows_mask.all():
            continue
        pred = model.predict(values[sl], rows_mask)
        out[sl] = np.where(rows_mask, values[sl], pred)
    return out


def encode_representations(model: RemaskerModel, data: TabularDataset, batch_size: int = 256,
                           return_flags: bool = False):
    """Mean-pooled encoder output per row over its observed cells, shape (n, width).

    Fully-missing rows get a zero vector; ``return_flags=True`` also returns a
    boolean array marking them.
    """
    values = np.nan_to_num(np.asarray(data.values, dtype=np.float64))
    mask = np.asarray(data.mask).astype(bool)
    if values.shape[1] != model.n_features:
        raise ValueError(f"data has {values.shape[1]} features, model expects {model.n_features}")
    out = np.zeros((len(values), model.config.width))
    empty = ~mask.any(axis=1)
    with no_grad():
        for start in range(0, len(values), batch_size):
            idx = np.arange(start, min(start + batch_size, len(values)))
            idx = idx[~empty[idx]]
            if idx.size == 0:
                continue
            batch = nn.TokenBatch.from_selection(values[idx], mask[idx])
            z = model.encode(batch).data
            v = batch.valid[..., None]
            out[idx] = (z * v).sum(axis=1) / batch.counts[:, None]
    return (out, empty) if return_flags else out


def cka_probe(complete: TabularDataset, incomplete: TabularDataset,
              epochs: set[int] | None = None) -> Callback:
    """Callback measuring CKA between latents of ``complete`` and ``incomplete`` rows.

    Rows that are fully missing in ``incomplete`` are left out.
    """
    def probe(epoch: int, model: RemaskerModel) -> float | None:
        if epochs is not None and epoch not in epochs:
            return None
        za = encode_representations(model, complete)
        zb, empty = encode_representations(model, incomplete, return_flags=True)
        return cka(za[~empty], zb[~empty])

    return probe
