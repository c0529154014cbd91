from __future__ import annotations

import numpy as np
import pytest

from remasker.tensor import Tensor, no_grad, tsum, mul

FD_STEP = 1e-5


def numeric_grad(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of the scalar function ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_error(a, b, floor: float = 1e-6) -> float:
    """Norm-wise relative error; ``floor`` keeps gradients that are zero
    in exact arithmetic (e.g. key biases, which softmax ignores) from
    turning rounding noise into a relative error of 1."""
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def check_op_grad(op, inputs: list[np.ndarray], rng: np.random.Generator) -> float:
    """Relative error of autodiff vs finite differences for ``sum(op(*inputs) * G)``.

    ``G`` is a fixed random cotangent so every output element matters.
    Returns the worst error over all inputs.
    """
    tensors = [Tensor(x, requires_grad=True) for x in inputs]
    out = op(*tensors)
    cot = rng.standard_normal(out.shape)
    tsum(mul(out, cot)).backward()
    worst = 0.0
    for k, x in enumerate(inputs):
        def f(xk, k=k):
            args = [Tensor(xk if j == k else inputs[j]) for j in range(len(inputs))]
            with no_grad():
                return float((op(*args).data * cot).sum())
        worst = max(worst, rel_error(tensors[k].grad, numeric_grad(f, x)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdict lines at the end of the run."""
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
