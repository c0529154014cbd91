"""Simulate MCAR, MAR and MNAR missingness on complete data.

All simulators return a 0/1 observation mask (1 = observed) and never
modify the data. Randomness is PCG64 seeded via ``SeedSequence``; every
feature gets its own derived stream so results do not depend on
evaluation order.

MAR: a random subset of ``ceil(observable_fraction * d)`` features stays
fully observed. Each remaining feature ``j`` goes missing with probability
``sigmoid(z_O @ w_j + c_j)``, where ``z_O`` are the standardised observable
columns, ``w_j ~ N(0, I)``, and the intercept ``c_j`` is found by bisection
on [-20, 20] so that the mean probability over the sample equals the
target ratio.

MNAR: the MAR mask, united with an independent Bernoulli(target_ratio)
mask over every cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

MECHANISMS = ("MCAR", "MAR", "MNAR")

_STREAM_MCAR = 1
_STREAM_SUBSET = 2
_STREAM_WEIGHTS = 3
_STREAM_DRAW = 4
_STREAM_EXTRA = 5


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class MissingnessSpec:
    mechanism: str
    target_ratio: float
    observable_fraction: float = 0.3
    seed: int = 0

    def __post_init__(self):
        mech = self.mechanism.upper()
        if mech not in MECHANISMS:
            raise ValueError(f"unknown mechanism {self.mechanism!r}; expected one of {MECHANISMS}")
        object.__setattr__(self, "mechanism", mech)
        if not 0.0 < self.target_ratio < 1.0:
            raise ValueError("target_ratio must lie in (0, 1)")
        if not 0.0 < self.observable_fraction < 1.0:
            raise ValueError("observable_fraction must lie in (0, 1)")

    def with_seed(self, seed: int) -> MissingnessSpec:
        return replace(self, seed=seed)


def _rng(spec: MissingnessSpec, stream: int, sub: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((spec.seed, stream, sub))))


def _shape(data) -> tuple[int, int]:
    shape = np.shape(data)
    if len(shape) != 2:
        raise ValueError("data must be an n x d matrix")
    return shape


def apply_mcar(data, spec: MissingnessSpec) -> np.ndarray:
    """Each cell missing independently with probability ``target_ratio``.

    Only the shape of ``data`` is read.
    """
    n, d = _shape(data)
    draws = _rng(spec, _STREAM_MCAR).random((n, d))
    return (draws >= spec.target_ratio).astype(np.uint8)


def observable_features(d: int, spec: MissingnessSpec) -> np.ndarray:
    k = math.ceil(spec.observable_fraction * d - 1e-12)
    if k < 1:
        raise ValueError("observable_fraction leaves no observable feature")
    if k >= d:
        raise ValueError("observable_fraction leaves no feature to mask")
    chosen = _rng(spec, _STREAM_SUBSET).choice(d, size=k, replace=False)
    return np.sort(chosen)


def _standardise(cols: np.ndarray) -> np.ndarray:
    mu = cols.mean(axis=0)
    sd = cols.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (cols - mu) / sd


def calibrate_intercept(logits: np.ndarray, target: float, lo: float = -20.0, hi: float = 20.0,
                        tol: float = 1e-10, max_iter: int = 200) -> float:
    """Intercept ``c`` with ``mean(sigmoid(logits + c)) == target``, by bisection."""
    f_lo = expit(logits + lo).mean() - target
    f_hi = expit(logits + hi).mean() - target
    if f_lo > 0 or f_hi < 0:
        raise CalibrationError(
            f"cannot bracket target {target}: mean probability spans "
            f"[{f_lo + target:.4g}, {f_hi + target:.4g}] over intercepts [{lo}, {hi}]")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f_mid = expit(logits + mid).mean() - target
        if abs(f_mid) < tol or hi - lo < tol:
            return mid
        if f_mid < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def mar_probabilities(data, spec: MissingnessSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell missing probabilities under MAR, and the observable feature indices.

    Observable columns get probability 0.
    """
    x = np.asarray(data, dtype=np.float64)
    n, d = _shape(x)
    obs = observable_features(d, spec)
    if not np.isfinite(x[:, obs]).all():
        raise ValueError("observable features must be fully observed and finite")
    z = _standardise(x[:, obs])
    probs = np.zeros((n, d))
    for j in range(d):
        if j in obs:
            continue
        w = _rng(spec, _STREAM_WEIGHTS, j).standard_normal(len(obs))
        logits = z @ w
        try:
            c = calibrate_intercept(logits, spec.target_ratio)
        except CalibrationError as exc:
            raise CalibrationError(f"feature {j}: {exc}") from None
        probs[:, j] = expit(logits + c)
    return probs, obs


def apply_mar(data, spec: MissingnessSpec) -> np.ndarray:
    probs, _ = mar_probabilities(data, spec)
    n, d = probs.shape
    draws = np.column_stack([_rng(spec, _STREAM_DRAW, j).random(n) for j in range(d)])
    return (draws >= probs).astype(np.uint8)


def mnar_components(data, spec: MissingnessSpec) -> tuple[np.ndarray, np.ndarray]:
    """The MAR mask and the extra Bernoulli mask whose union forms the MNAR mask."""
    mar = apply_mar(data, spec)
    n, d = mar.shape
    extra = (_rng(spec, _STREAM_EXTRA).random((n, d)) >= spec.target_ratio).astype(np.uint8)
    return mar, extra


def apply_mnar(data, spec: MissingnessSpec) -> np.ndarray:
    mar, extra = mnar_components(data, spec)
    return (mar & extra).astype(np.uint8)


def simulate(data, spec: MissingnessSpec) -> np.ndarray:
    return {"MCAR": apply_mcar, "MAR": apply_mar, "MNAR": apply_mnar}[spec.mechanism](data, spec)
