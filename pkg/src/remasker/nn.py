"""Transformer building blocks for the masked tabular autoencoder.

Tokens are one per feature value. A row's tokens are gathered into a
padded ``(batch, tokens, width)`` array; a boolean ``valid`` mask keeps
pad slots out of every attention softmax, and pad slots are never copied
into the decoder input, so they receive no gradient.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import (
    Tensor, ShapeError, concat, gelu, layer_norm, linear, matmul, mul, parameter,
    softmax, take,
)

CHECKPOINT_FORMAT = "remasker-checkpoint"
CHECKPOINT_VERSION = 1
INIT_STD = 0.02


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD,
                     bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall inside +/- bound*std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def positional_encoding(k: int, width: int) -> np.ndarray:
    """Sinusoidal encoding of position ``k``: sin on even entries, cos on odd."""
    if width % 2:
        raise ValueError("positional encoding width must be even")
    if k < 0:
        raise ValueError("position must be non-negative")
    i = np.arange(width // 2, dtype=np.float64)
    angle = k / np.power(10000.0, 2.0 * i / width)
    out = np.empty(width)
    out[0::2] = np.sin(angle)
    out[1::2] = np.cos(angle)
    return out


def positional_table(n_positions: int, width: int) -> np.ndarray:
    return np.stack([positional_encoding(k, width) for k in range(n_positions)])


class Module:
    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


class ValueEmbedder(Module):
    """Per-feature linear encoding ``w[j] * x + b[j]``."""

    def __init__(self, n_features: int, width: int, rng: np.random.Generator):
        # a Linear(1, width) per feature: Xavier-uniform weight, zero bias
        limit = math.sqrt(6.0 / (1 + width))
        self.weight = parameter(rng.uniform(-limit, limit, size=(n_features, width)), "weight")
        self.bias = parameter(np.zeros((n_features, width)), "bias")
        self.pe = positional_table(n_features, width)

    @property
    def n_features(self) -> int:
        return self.weight.shape[0]

    @property
    def width(self) -> int:
        return self.weight.shape[1]

    def named_parameters(self, prefix=""):
        return [(prefix + "weight", self.weight), (prefix + "bias", self.bias)]


class MaskToken(Module):
    def __init__(self, width: int, rng: np.random.Generator):
        self.embedding = parameter(truncated_normal(rng, (width,)), "mask_token")

    def named_parameters(self, prefix=""):
        return [(prefix + "embedding", self.embedding)]


class TransformerBlock(Module):
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator,
                 mlp_ratio: int = 4, eps: float = 1e-5):
        if width % heads:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.width = width
        self.heads = heads
        self.eps = eps
        hidden = mlp_ratio * width
        self.ln1_gain = parameter(np.ones(width))
        self.ln1_bias = parameter(np.zeros(width))
        self.query_w = parameter(truncated_normal(rng, (width, width)))
        self.query_b = parameter(np.zeros(width))
        self.key_w = parameter(truncated_normal(rng, (width, width)))
        self.key_b = parameter(np.zeros(width))
        self.value_w = parameter(truncated_normal(rng, (width, width)))
        self.value_b = parameter(np.zeros(width))
        self.out_w = parameter(truncated_normal(rng, (width, width)))
        self.out_b = parameter(np.zeros(width))
        self.ln2_gain = parameter(np.ones(width))
        self.ln2_bias = parameter(np.zeros(width))
        self.fc1_w = parameter(truncated_normal(rng, (width, hidden)))
        self.fc1_b = parameter(np.zeros(hidden))
        self.fc2_w = parameter(truncated_normal(rng, (hidden, width)))
        self.fc2_b = parameter(np.zeros(width))
        self.last_attention: np.ndarray | None = None

    _NAMES = ("ln1_gain", "ln1_bias", "query_w", "query_b", "key_w", "key_b",
              "value_w", "value_b", "out_w", "out_b", "ln2_gain", "ln2_bias",
              "fc1_w", "fc1_b", "fc2_w", "fc2_b")

    def named_parameters(self, prefix=""):
        return [(prefix + n, getattr(self, n)) for n in self._NAMES]

    def __call__(self, x: Tensor, valid: np.ndarray | None = None) -> Tensor:
        return self_attention(x, self, valid)


def self_attention(tokens: Tensor, block: TransformerBlock,
                   valid: np.ndarray | None = None) -> Tensor:
    """Run one transformer block over ``(batch, t, width)`` (or ``(t, width)``) tokens.

    ``valid`` is a ``(batch, t)`` boolean array; invalid slots are excluded
    as attention keys. Their own outputs are computed but meaningless.
    """
    squeeze = tokens.ndim == 2
    x = tokens.reshape(1, *tokens.shape) if squeeze else tokens
    b, t, w = x.shape
    h, dh = block.heads, w // block.heads

    def heads(z: Tensor) -> Tensor:
        return z.reshape(b, t, h, dh).transpose(0, 2, 1, 3)

    n1 = layer_norm(x, block.ln1_gain, block.ln1_bias, block.eps)
    q = heads(linear(n1, block.query_w, block.query_b))
    k = heads(linear(n1, block.key_w, block.key_b))
    v = heads(linear(n1, block.value_w, block.value_b))
    scores = mul(matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / math.sqrt(dh))
    key_mask = None if valid is None else np.asarray(valid, dtype=bool)[:, None, None, :]
    attn = softmax(scores, axis=-1, mask=key_mask)
    block.last_attention = attn.data
    ctx = matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, t, w)
    x = x + linear(ctx, block.out_w, block.out_b)
    n2 = layer_norm(x, block.ln2_gain, block.ln2_bias, block.eps)
    x = x + linear(gelu(linear(n2, block.fc1_w, block.fc1_b)), block.fc2_w, block.fc2_b)
    return x.reshape(t, w) if squeeze else x


@dataclass
class TokenBatch:
    """Padded per-row token positions and values.

    ``positions`` are ascending within each row over the valid prefix;
    pad slots hold position 0 and value 0.
    """

    values: np.ndarray      # (B, T) float
    positions: np.ndarray   # (B, T) int
    valid: np.ndarray       # (B, T) bool

    @property
    def counts(self) -> np.ndarray:
        return self.valid.sum(axis=1)

    def __len__(self) -> int:
        return self.values.shape[0]

    @classmethod
    def from_selection(cls, values: np.ndarray, selected: np.ndarray) -> TokenBatch:
        """Gather ``values[i, j]`` for every ``selected[i, j]`` into padded rows."""
        selected = np.asarray(selected, dtype=bool)
        counts = selected.sum(axis=1)
        t = int(counts.max()) if counts.size else 0
        order = np.argsort(~selected, axis=1, kind="stable")[:, :t]
        valid = np.arange(t)[None, :] < counts[:, None]
        vals = np.take_along_axis(np.asarray(values, dtype=np.float64), order, axis=1)
        return cls(values=np.where(valid, vals, 0.0),
                   positions=np.where(valid, order, 0),
                   valid=valid)

    @classmethod
    def from_rows(cls, rows: Sequence[tuple[Sequence[float], Sequence[int]]]) -> TokenBatch:
        t = max((len(p) for _, p in rows), default=0)
        values = np.zeros((len(rows), t))
        positions = np.zeros((len(rows), t), dtype=np.intp)
        valid = np.zeros((len(rows), t), dtype=bool)
        for r, (vals, pos) in enumerate(rows):
            vals = np.asarray(vals, dtype=np.float64)
            pos = np.asarray(pos, dtype=np.intp)
            if len(vals) != len(pos):
                raise ShapeError("row values and positions differ in length")
            order = np.argsort(pos, kind="stable")
            n = len(pos)
            values[r, :n] = vals[order]
            positions[r, :n] = pos[order]
            valid[r, :n] = True
        return cls(values, positions, valid)


def embed_tokens(batch: TokenBatch, embedder: ValueEmbedder) -> Tensor:
    """``w[pos] * x + b[pos] + pe(pos)`` for every slot, shape (B, T, width)."""
    pos = batch.positions
    if pos.size and (pos.min() < 0 or pos.max() >= embedder.n_features):
        raise IndexError("token position outside the feature range")
    w = take(embedder.weight, pos)
    b = take(embedder.bias, pos)
    x = Tensor(batch.values[..., None])
    return w * x + b + embedder.pe[pos]


def embed_values(row_values: Sequence[float], positions: Sequence[int],
                 embedder: ValueEmbedder) -> Tensor:
    """Embed one row's values at ``positions``; rows come out in ascending position order."""
    positions = np.asarray(positions, dtype=np.intp)
    if positions.size and (positions.min() < 0 or positions.max() >= embedder.n_features):
        raise IndexError("token position outside the feature range")
    batch = TokenBatch.from_rows([(row_values, positions)])
    return embed_tokens(batch, embedder).reshape(len(positions), embedder.width)


def encode(batch: TokenBatch, blocks: Sequence[TransformerBlock],
           embedder: ValueEmbedder) -> Tensor:
    """Embed the batch's tokens and run them through the encoder stack."""
    if len(batch) and (batch.counts == 0).any():
        raise ValueError("every encoded row needs at least one token")
    x = embed_tokens(batch, embedder)
    for block in blocks:
        x = block(x, batch.valid)
    return x


def unpad(latents: Tensor | np.ndarray, batch: TokenBatch) -> list[np.ndarray]:
    data = latents.data if isinstance(latents, Tensor) else latents
    return [data[r, :c] for r, c in enumerate(batch.counts)]


def decoder_index(batch: TokenBatch, n_features: int) -> np.ndarray:
    """Row index into ``[latents.reshape(B*T, W); mask_token]`` for each (row, feature)."""
    b, t = batch.positions.shape
    idx = np.full((b, n_features), b * t, dtype=np.intp)
    rows, slots = np.nonzero(batch.valid)
    cols = batch.positions[rows, slots]
    if len(rows) and np.unique(rows * n_features + cols).size != len(rows):
        raise ValueError("duplicate positions within a row")
    idx[rows, cols] = rows * t + slots
    return idx


def decode(latents: Tensor, batch: TokenBatch, n_features: int,
           blocks: Sequence[TransformerBlock], mask_token: MaskToken,
           head_w: Tensor, head_b: Tensor, pe: np.ndarray) -> Tensor:
    """Scatter latents to their feature positions, fill the rest with the mask token,
    add positional encodings, run the decoder stack and project each token to a scalar.

    Returns predictions of shape (B, n_features).
    """
    b, t = batch.positions.shape
    if latents.shape[:2] != (b, t):
        raise ShapeError(f"latents {latents.shape[:2]} do not match token layout {(b, t)}")
    w = mask_token.embedding.shape[0]
    source = concat([latents.reshape(b * t, w), mask_token.embedding.reshape(1, w)], axis=0)
    x = take(source, decoder_index(batch, n_features)) + pe
    for block in blocks:
        x = block(x)
    return linear(x, head_w, head_b).reshape(b, n_features)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write named float64 buffers plus a JSON metadata block to an ``.npz`` file."""
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "meta": meta,
              "names": list(arrays)}
    blob = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    payload = {f"p{i}": np.ascontiguousarray(a, dtype=np.float64) for i, a in enumerate(arrays.values())}
    with open(path, "wb") as fh:
        np.savez(fh, __header__=blob, **payload)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a checkpoint file")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        arrays = {name: z[f"p{i}"].copy() for i, name in enumerate(header["names"])}
    return arrays, header["meta"]


def count_parameters(modules: Iterable[Module]) -> int:
    return sum(p.size for m in modules for p in m.parameters())
