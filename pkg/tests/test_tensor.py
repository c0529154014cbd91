from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import check_op_grad, numeric_grad, rel_error
from remasker.tensor import (
    AdamState, EmptyLossError, LrSchedule, ShapeError, Tensor, adam_step, add, clip_global_norm,
    concat, cosine_lr, flatten_parameters, gelu, global_grad_norm, layer_norm, linear, matmul, mse,
    mul, no_grad, parameter, reshape, softmax, take, transpose, tsum, tmean,
)

N_INSTANCES = 20


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity(rng):
    x = rng.standard_normal((3, 3))
    assert np.array_equal(matmul(Tensor(np.eye(3)), Tensor(x)).data, x)


def test_matmul_hand_example():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_sum_gradient_fd(rng):
    a = rng.standard_normal((4, 5))
    b = rng.standard_normal((5, 3))
    ta = Tensor(a, requires_grad=True)
    tsum(matmul(ta, Tensor(b))).backward()
    num = numeric_grad(lambda x: float((x @ b).sum()), a)
    assert rel_error(ta.grad, num) <= 1e-4
    # closed form: dL/dA = 1 . B^T
    assert np.allclose(ta.grad, np.ones((4, 3)) @ b.T)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_matmul_batched_fd(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 2))
    assert check_op_grad(matmul, [a, b], rng) <= 1e-4
    assert check_op_grad(matmul, [a, rng.standard_normal((4, 2))], rng) <= 1e-4


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_linear_fd(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5)), rng.standard_normal(5)
    assert check_op_grad(linear, [x, w, b], rng) <= 1e-4


def test_linear_matches_matmul(rng):
    x, w, b = rng.standard_normal((6, 4)), rng.standard_normal((4, 3)), rng.standard_normal(3)
    assert np.allclose(linear(Tensor(x), Tensor(w), Tensor(b)).data, x @ w + b)


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def test_softmax_uniform():
    assert np.allclose(softmax(Tensor(np.zeros(4))).data, 0.25)


def test_softmax_stable():
    out = softmax(Tensor([1000.0, 0.0])).data
    assert np.isfinite(out).all()
    assert out[0] == pytest.approx(1.0)
    assert out[1] < 1e-300 or out[1] == 0.0


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_softmax_fd(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 5)) * 3
    assert check_op_grad(lambda t: softmax(t, axis=-1), [x], rng) <= 1e-4
    assert check_op_grad(lambda t: softmax(t, axis=0), [x], rng) <= 1e-4


def test_softmax_mask_zero_weight_and_grad(rng):
    x = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    mask = np.array([[True, True, False, True], [True, False, False, False]])
    y = softmax(x, mask=mask)
    assert np.all(y.data[~mask] == 0.0)
    assert np.allclose(y.data.sum(axis=1), 1.0)
    tsum(mul(y, rng.standard_normal((2, 4)))).backward()
    assert np.all(x.grad[~mask] == 0.0)


@given(arrays(np.float64, (4, 7), elements=st.floats(-50, 50)))
@settings(max_examples=100, deadline=None)
def test_softmax_rows_sum_to_one(x):
    y = softmax(Tensor(x)).data
    assert np.all(y >= 0)
    assert np.all(np.abs(y.sum(axis=-1) - 1.0) <= 1e-12)


# ---------------------------------------------------------------------------
# layer norm
# ---------------------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    out = layer_norm(Tensor(np.full((1, 6), 3.7)), Tensor(np.ones(6)), Tensor(np.zeros(6)))
    assert np.allclose(out.data, 0.0)


def test_layer_norm_closed_form():
    out = layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-9)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_layer_norm_fd(seed):
    rng = np.random.default_rng(seed)
    x, g, b = rng.standard_normal((2, 3, 6)), rng.standard_normal(6), rng.standard_normal(6)
    assert check_op_grad(layer_norm, [x, g, b], rng) <= 1e-4


@given(arrays(np.float64, (5, 8), elements=st.floats(-1e3, 1e3)))
@settings(max_examples=100, deadline=None)
def test_layer_norm_pre_affine_mean_zero(x):
    y = layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    assert np.all(np.abs(y.mean(axis=-1)) < 1e-9)


def test_layer_norm_shape_error():
    with pytest.raises(ShapeError):
        layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(3)))


# ---------------------------------------------------------------------------
# gelu
# ---------------------------------------------------------------------------

def test_gelu_zero_and_asymptote():
    assert gelu(Tensor([0.0])).data[0] == 0.0
    assert abs(gelu(Tensor([10.0])).data[0] - 10.0) < 1e-6
    assert gelu(Tensor([-40.0])).data[0] == pytest.approx(0.0, abs=1e-300)


def test_gelu_matches_tanh_formula(rng):
    x = np.concatenate([rng.standard_normal(200) * 4, [-800.0, 800.0]])
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    assert np.allclose(gelu(Tensor(x)).data, ref, rtol=1e-13, atol=1e-15)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_gelu_fd(seed):
    rng = np.random.default_rng(seed)
    assert check_op_grad(gelu, [rng.standard_normal((3, 4)) * 2], rng) <= 1e-4


# ---------------------------------------------------------------------------
# elementwise, shape and gather ops
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_elementwise_and_shape_fd(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4,))
    assert check_op_grad(add, [a, b], rng) <= 1e-4
    assert check_op_grad(mul, [a, rng.standard_normal((3, 1))], rng) <= 1e-4
    assert check_op_grad(lambda t: reshape(t, (4, 3)), [a], rng) <= 1e-4
    assert check_op_grad(lambda t: transpose(t, (1, 0)), [a], rng) <= 1e-4
    assert check_op_grad(lambda t: tsum(t, 0), [a], rng) <= 1e-4
    assert check_op_grad(lambda t: tmean(t, 1), [a], rng) <= 1e-4
    idx = rng.integers(0, 3, size=(2, 5))
    assert check_op_grad(lambda t: take(t, idx), [a], rng) <= 1e-4
    assert check_op_grad(lambda s, t: concat([s, t], axis=0), [a, rng.standard_normal((2, 4))], rng) <= 1e-4


def test_take_out_of_range():
    with pytest.raises(IndexError):
        take(Tensor(np.ones((2, 3))), [0, 2])


# ---------------------------------------------------------------------------
# mse and backward
# ---------------------------------------------------------------------------

def test_mse_examples():
    assert mse(Tensor([1.0, 2.0]), [1.0, 2.0], [1, 1]).item() == 0.0
    assert mse(Tensor([1.0, 0.0]), [0.0, 0.0], [1, 1]).item() == 0.5
    assert mse(Tensor([1.0, 9.0]), [0.0, 0.0], [1, 0]).item() == 1.0


def test_mse_empty_mask():
    with pytest.raises(EmptyLossError):
        mse(Tensor([1.0]), [0.0], [0])


def test_mse_ignores_nan_targets_under_zero_weight():
    p = Tensor([1.0, 2.0], requires_grad=True)
    loss = mse(p, [0.0, np.nan], [1, 0])
    loss.backward()
    assert loss.item() == 1.0
    assert p.grad.tolist() == [2.0, 0.0]


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_mse_fd(seed):
    rng = np.random.default_rng(seed)
    t = rng.standard_normal(6)
    w = (rng.random(6) < 0.6).astype(float)
    w[0] = 1.0
    assert check_op_grad(lambda p: mse(p, t, w), [rng.standard_normal(6)], rng) <= 1e-4


def test_backward_sum_gives_ones(rng):
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    tsum(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    tsum(mul(x, x)).backward()
    assert x.grad == 6.0


def test_backward_accumulates_until_zeroed():
    x = Tensor([1.0, 2.0], requires_grad=True)
    tsum(mul(x, x)).backward()
    tsum(mul(x, x)).backward()
    assert x.grad.tolist() == [4.0, 8.0]
    x.zero_grad()
    assert x.grad.tolist() == [0.0, 0.0]


def test_backward_reused_node_accumulates():
    x = Tensor([2.0], requires_grad=True)
    y = mul(x, 3.0)
    tsum(add(y, mul(y, y))).backward()
    # d/dx (3x + 9x^2) = 3 + 18x
    assert x.grad.tolist() == [39.0]


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        mul(x, 2.0).backward()


def test_backward_rejects_nonfinite_loss():
    x = Tensor([np.inf], requires_grad=True)
    with pytest.raises(FloatingPointError):
        tsum(x).backward()


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = mul(x, 2.0)
    assert not y.requires_grad


def test_grad_shape_matches_data(rng):
    x = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    assert x.grad.shape == x.data.shape
    assert Tensor([1.0]).grad is None


def test_runs_are_bit_identical():
    def run():
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
        w = Tensor(rng.standard_normal((6, 6)), requires_grad=True)
        y = layer_norm(gelu(linear(x, w)), Tensor(np.ones(6)), Tensor(np.zeros(6)))
        tsum(mul(softmax(y), y)).backward()
        return y.data.copy(), x.grad.copy(), w.grad.copy()
    a, b = run(), run()
    assert all(np.array_equal(p, q) for p, q in zip(a, b))


# ---------------------------------------------------------------------------
# clipping, Adam, schedule
# ---------------------------------------------------------------------------

def _with_grad(g):
    p = parameter(np.zeros(np.shape(g)))
    p.grad[...] = g
    return p


def test_clip_unchanged_below_threshold():
    p = _with_grad([0.6, 0.8])
    assert clip_global_norm([p], 5.0) == pytest.approx(1.0)
    assert p.grad.tolist() == [0.6, 0.8]


def test_clip_three_four_five():
    p = _with_grad([3.0, 4.0])
    assert clip_global_norm([p], 1.0) == 5.0
    assert np.allclose(p.grad, [0.6, 0.8])


@given(st.lists(arrays(np.float64, st.integers(1, 6), elements=st.floats(-1e4, 1e4)), min_size=1, max_size=4),
       st.floats(1e-3, 1e3))
@settings(max_examples=200, deadline=None)
def test_clip_bounds_norm_and_is_idempotent(grads, threshold):
    params = [_with_grad(g) for g in grads]
    clip_global_norm(params, threshold)
    assert global_grad_norm(params) <= threshold + 1e-9
    once = [p.grad.copy() for p in params]
    clip_global_norm(params, threshold)
    for a, p in zip(once, params):
        assert np.allclose(a, p.grad, rtol=1e-12, atol=0)


def test_clip_rejects_nonpositive_threshold():
    with pytest.raises(ValueError):
        clip_global_norm([_with_grad([1.0])], 0.0)


def test_adam_zero_gradient_leaves_params():
    p = parameter([1.0, -2.0])
    state = AdamState.create([p])
    for _ in range(5):
        adam_step([p], [np.zeros(2)], state, 1e-2)
    assert p.data.tolist() == [1.0, -2.0]
    assert state.step_count == 5


def test_adam_first_step_is_signed_lr():
    p = parameter([0.0, 0.0, 0.0])
    state = AdamState.create([p])
    adam_step([p], [np.array([0.3, -7.0, 1e-2])], state, 1e-3)
    assert np.allclose(p.data, [-1e-3, 1e-3, -1e-3], rtol=1e-5)


def test_adam_converges_on_quadratic():
    w = parameter([0.0])
    state = AdamState.create([w])
    for _ in range(200):
        w.zero_grad()
        diff = add(w, -2.0)
        tsum(mul(diff, diff)).backward()
        adam_step([w], [w.grad], state, 0.1)
    assert abs(w.data[0] - 2.0) < 0.05


def test_adam_moments_congruent():
    params = [parameter(np.zeros((2, 3))), parameter(np.zeros(4))]
    state = AdamState.create(params)
    assert [m.shape for m in state.first_moment] == [(2, 3), (4,)]
    assert [v.shape for v in state.second_moment] == [(2, 3), (4,)]


def test_adam_flat_buffer_equals_per_parameter(rng):
    a = [parameter(rng.standard_normal((3, 2))), parameter(rng.standard_normal(5))]
    b = [parameter(p.data) for p in a]
    flat = flatten_parameters(b)
    sa, sb = AdamState.create(a), AdamState.create([flat])
    for _ in range(3):
        grads = [rng.standard_normal(p.shape) for p in a]
        adam_step(a, grads, sa, 1e-2)
        for p, g in zip(b, grads):
            p.grad[...] = g
        adam_step([flat], [flat.grad], sb, 1e-2)
    for p, q in zip(a, b):
        assert np.allclose(p.data, q.data, rtol=1e-14, atol=1e-16)


def test_cosine_schedule_points():
    s = LrSchedule(max_epochs=600)
    assert cosine_lr(s, 0) == 1e-3
    assert cosine_lr(s, 600) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(s, 300) == pytest.approx(0.5e-3)
    s2 = LrSchedule(max_epochs=10, base_lr=0.2, min_lr=0.02)
    assert cosine_lr(s2, 5) == pytest.approx(0.11)
    assert cosine_lr(s2, 10) == pytest.approx(0.02)


@given(st.integers(1, 1000), st.floats(1e-6, 1.0), st.floats(0.0, 1.0))
@settings(max_examples=100, deadline=None)
def test_cosine_schedule_monotone(max_epochs, base, frac):
    s = LrSchedule(max_epochs, base, base * frac)
    lrs = [cosine_lr(s, t) for t in range(max_epochs + 1)]
    assert all(b <= a + 1e-18 for a, b in zip(lrs, lrs[1:]))


def test_cosine_schedule_out_of_range():
    with pytest.raises(ValueError):
        cosine_lr(LrSchedule(10), 11)
    with pytest.raises(ValueError):
        cosine_lr(LrSchedule(10), -1)
