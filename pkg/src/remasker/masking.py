"""Observation masks, re-mask sampling and the masked/re-masked/unmasked split.

Mask convention: 1 = observed, 0 = missing. A re-mask hides a further
subset of a row's observed cells; the row's columns then split into

* ``masked``   - missing in the data,
* ``remasked`` - observed but hidden from the encoder,
* ``unmasked`` - observed and visible to the encoder.

Randomness comes from numpy's PCG64 generator seeded through
``SeedSequence((seed, stream, row))``, so a row's sample does not depend on
which other rows share its batch or on evaluation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class MaskTriple:
    masked: tuple[int, ...]
    remasked: tuple[int, ...]
    unmasked: tuple[int, ...]
    n_features: int

    def __post_init__(self):
        m, r, u = set(self.masked), set(self.remasked), set(self.unmasked)
        total = len(self.masked) + len(self.remasked) + len(self.unmasked)
        if len(m | r | u) != total:
            raise MaskError("mask triple sets overlap")
        if total != self.n_features or (total and (min(m | r | u) < 0 or max(m | r | u) >= self.n_features)):
            raise MaskError("mask triple does not cover every feature exactly once")

    @property
    def observed(self) -> tuple[int, ...]:
        return tuple(sorted(self.remasked + self.unmasked))

    def indicator(self, which: str) -> np.ndarray:
        out = np.zeros(self.n_features, dtype=bool)
        out[list(getattr(self, which))] = True
        return out


def _as_bits(row: Sequence[int] | np.ndarray) -> np.ndarray:
    bits = np.asarray(row)
    if bits.ndim != 1:
        raise MaskError("mask row must be one-dimensional")
    if not np.isin(bits, (0, 1)).all():
        raise MaskError("mask entries must be 0 or 1")
    return bits.astype(bool)


def remask_count(n_observed: int, ratio: float) -> int:
    """How many observed cells to hide: round-half-up of ``ratio * n``,
    keeping at least one observed cell visible."""
    if not 0.0 <= ratio < 1.0:
        raise MaskError(f"masking ratio {ratio} outside [0, 1)")
    if n_observed <= 0:
        return 0
    # the epsilon absorbs binary representation error in products like 0.3 * 5
    k = math.floor(ratio * n_observed + 0.5 + 1e-9)
    return min(k, n_observed - 1)


def partition(mask, remask_bits) -> MaskTriple:
    m = _as_bits(mask)
    mp = _as_bits(remask_bits)
    if m.shape != mp.shape:
        raise MaskError("mask and re-mask lengths differ")
    idx = np.arange(m.size)
    return MaskTriple(
        masked=tuple(idx[~m].tolist()),
        remasked=tuple(idx[m & ~mp].tolist()),
        unmasked=tuple(idx[m & mp].tolist()),
        n_features=m.size,
    )


def sample_remask(mask, masking_ratio: float, rng: np.random.Generator) -> MaskTriple:
    """Hide a uniform without-replacement sample of a row's observed cells.

    Uses a partial Fisher-Yates shuffle of the observed indices.
    """
    m = _as_bits(mask)
    observed = np.flatnonzero(m)
    n = observed.size
    k = remask_count(n, masking_ratio)
    pool = observed.copy()
    if k:
        u = rng.random(k)
        for i in range(k):
            j = i + int(u[i] * (n - i))
            pool[i], pool[j] = pool[j], pool[i]
    hidden = np.zeros_like(m)
    hidden[pool[:k]] = True
    idx = np.arange(m.size)
    return MaskTriple(
        masked=tuple(idx[~m].tolist()),
        remasked=tuple(idx[hidden].tolist()),
        unmasked=tuple(idx[m & ~hidden].tolist()),
        n_features=m.size,
    )


def row_rng(seed: int, row: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, stream, row))))


def remask_batch(masks: np.ndarray, ratio: float, seed: int, *,
                 row_ids: Sequence[int] | None = None, stream: int = 0) -> list[MaskTriple]:
    """Independent re-mask per row. ``row_ids`` default to ``0..n-1``."""
    masks = np.asarray(masks)
    if masks.ndim != 2:
        raise MaskError("masks must be an n x d matrix")
    ids = range(len(masks)) if row_ids is None else row_ids
    return [sample_remask(row, ratio, row_rng(seed, int(r), stream)) for row, r in zip(masks, ids)]


def triples_to_arrays(triples: Sequence[MaskTriple]) -> dict[str, np.ndarray]:
    """Boolean (n, d) indicator matrices for each of the three sets."""
    n = len(triples)
    d = triples[0].n_features if triples else 0
    out = {k: np.zeros((n, d), dtype=bool) for k in ("masked", "remasked", "unmasked")}
    for i, t in enumerate(triples):
        for key in out:
            out[key][i, list(getattr(t, key))] = True
    return out
