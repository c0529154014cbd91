"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: it covers the operations a pre-norm
transformer encoder/decoder needs (batched matmul, fused linear layers,
layer norm, masked softmax, GELU, gather/concat) plus the optimisation
stack used to train it (Adam, global-norm clipping, cosine annealing).

Every op records a closure that maps the output gradient to parent
gradients. ``Tensor.backward`` walks the graph in reverse topological
order and accumulates into ``.grad``; gradients are never zeroed
implicitly.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


_grad_enabled = True
_allocator_tuned = False


def tune_allocator() -> bool:
    """Keep glibc from returning mid-sized buffers to the OS after every free.

    Training allocates and frees the same ~1 MB activation buffers thousands
    of times per epoch; with glibc's defaults each one is a fresh mmap and a
    round of page faults. Raising the mmap and trim thresholds lets the heap
    recycle them. A no-op (returns False) on other C libraries.
    """
    global _allocator_tuned
    if _allocator_tuned:
        return True
    try:
        import ctypes
        libc = ctypes.CDLL("libc.so.6")
        # M_TRIM_THRESHOLD, M_TOP_PAD, M_MMAP_THRESHOLD
        ok = all(libc.mallopt(opt, 32 << 20) == 1 for opt in (-1, -2, -3))
    except (OSError, AttributeError):
        return False
    _allocator_tuned = ok
    return ok


@contextmanager
def no_grad():
    """Run ops without recording the graph (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class EmptyLossError(ValueError):
    """Raised when a masked loss has no contributing entries."""


class Tensor:
    """A node in the gradient graph.

    Leaf tensors created with ``requires_grad=True`` carry a zero-initialised
    ``grad`` buffer of the same shape. Derived tensors get a buffer lazily
    during ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, copy=True)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence[Tensor],
                backward: Callable[[np.ndarray], None]) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.name = None
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def zero_grad(self) -> None:
        if self.requires_grad:
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            else:
                self.grad.fill(0.0)

    def _accumulate(self, g: np.ndarray) -> None:
        if self._backward is None:
            # leaves own a writable buffer; optimisers modify it in place
            if self.grad is None:
                self.grad = np.array(g, dtype=DTYPE, copy=True)
            else:
                self.grad += g
        elif self.grad is None:
            # interior nodes may alias the incoming array; never mutate it
            self.grad = g
        else:
            self.grad = self.grad + g

    # -- autodiff ------------------------------------------------------
    def backward(self) -> None:
        """Back-propagate from a scalar tensor."""
        if self.data.size != 1 or self.data.ndim > 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss is not connected to any tensor requiring grad")
        if not np.isfinite(self.data).all():
            raise FloatingPointError(f"non-finite loss {self.data!r}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        # interior buffers are rebuilt on every call; leaves accumulate
        for node in order:
            if node._backward is not None:
                node.grad = None
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------
    def __add__(self, other) -> Tensor:
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other) -> Tensor:
        return add(as_tensor(other), neg(self))

    def __mul__(self, other) -> Tensor:
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return neg(self)

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def sum(self, axis=None) -> Tensor:
        return tsum(self, axis)

    def mean(self, axis=None) -> Tensor:
        return tmean(self, axis)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._result(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._result(a.data * b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g)

    return Tensor._result(-a.data, (a,), backward)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).

    Evaluated through the identity 0.5 (1 + tanh(u)) = sigmoid(2u), which
    needs one exp instead of one tanh per element.
    """
    xd = x.data
    sq = xd * xd
    # e = exp(-2u)
    e = sq * (-2.0 * _SQRT_2_OVER_PI * _GELU_C)
    e -= 2.0 * _SQRT_2_OVER_PI
    e *= xd
    with np.errstate(over="ignore"):
        np.exp(e, out=e)
    e += 1.0
    s = np.divide(1.0, e, out=e)
    out = xd * s

    def backward(g):
        # d/dx = s + x s (1 - s) 2 u'(x), u'(x) = sqrt(2/pi) (1 + 3c x^2)
        local = sq * (6.0 * _SQRT_2_OVER_PI * _GELU_C)
        local += 2.0 * _SQRT_2_OVER_PI
        local *= out
        one_minus = np.subtract(1.0, s)
        local *= one_minus
        local += s
        local *= g
        x._accumulate(local)

    return Tensor._result(out, (x,), backward)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def backward(g):
        x._accumulate(g.reshape(src))

    return Tensor._result(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        x._accumulate(g.transpose(inverse))

    return Tensor._result(x.data.transpose(axes), (x,), backward)


def tsum(x: Tensor, axis=None) -> Tensor:
    src = x.shape

    def backward(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, src))
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), src))

    return Tensor._result(np.asarray(x.data.sum(axis=axis)), (x,), backward)


def tmean(x: Tensor, axis=None) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis), 1.0 / float(count))


def take(x: Tensor, index) -> Tensor:
    """Gather rows along axis 0; ``index`` may have any integer shape."""
    idx = np.asarray(index, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"take index out of range for axis of size {x.shape[0]}")

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        x._accumulate(gx)

    return Tensor._result(x.data[idx], (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis),
                          tensors, backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, batching over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            b._accumulate(gb)

    return Tensor._result(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Fused ``x @ weight + bias`` for a 2-d weight of shape (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    k, n = weight.shape
    x2 = x.data.reshape(-1, k)
    out2 = x2 @ weight.data
    if bias is not None:
        out2 += bias.data
    out = out2.reshape(x.shape[:-1] + (n,))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, n)
        if x.requires_grad:
            x._accumulate((g2 @ weight.data.T).reshape(x.shape))
        if weight.requires_grad:
            weight._accumulate(x2.T @ g2)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))

    return Tensor._result(out, parents, backward)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax.

    ``mask`` (broadcastable to ``x``) marks entries allowed to receive
    probability mass; masked-out entries get exactly zero weight and zero
    gradient. Every softmax slice must keep at least one allowed entry.
    """
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return Tensor._result(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis with population variance, then scale and shift."""
    w = x.shape[-1]
    if gain.shape != (w,) or bias.shape != (w,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({w},)")
    xd = x.data
    xc = xd - xd.mean(axis=-1, keepdims=True)
    var = np.einsum("...i,...i->...", xc, xc)[..., None]
    var /= w
    var += eps
    inv = 1.0 / np.sqrt(var)
    xhat = xc
    xhat *= inv
    out = xhat * gain.data
    out += bias.data

    def backward(g):
        g2 = g.reshape(-1, w)
        if gain.requires_grad:
            gain._accumulate(np.einsum("ni,ni->i", g2, xhat.reshape(-1, w)))
        if bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = np.einsum("...i,...i->...", dxhat, xhat)[..., None]
            m2 /= w
            dx = xhat * m2
            dx += m1
            np.subtract(dxhat, dx, out=dx)
            dx *= inv
            x._accumulate(dx)

    return Tensor._result(out, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse(pred: Tensor, target, weight_mask) -> Tensor:
    """``sum(w * (pred - target)^2) / sum(w)`` for a 0/1 weight mask."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=DTYPE)
    w = np.asarray(weight_mask.data if isinstance(weight_mask, Tensor) else weight_mask,
                   dtype=DTYPE)
    if pred.shape != target.shape or pred.shape != w.shape:
        raise ShapeError(f"mse: shapes differ {pred.shape}, {target.shape}, {w.shape}")
    total = w.sum()
    if total <= 0:
        raise EmptyLossError("mse weight mask selects no entries")
    # masked-out targets may be NaN; never let them leak into the product
    diff = np.where(w > 0, pred.data - np.nan_to_num(target), 0.0)
    value = np.asarray((w * diff * diff).sum() / total)

    def backward(g):
        pred._accumulate(g * 2.0 * w * diff / total)

    return Tensor._result(value, (pred,), backward)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

def flatten_parameters(params: Sequence[Tensor]) -> Tensor:
    """Move every parameter's data and grad into views of two contiguous buffers.

    Returns a tensor over the whole buffer, so optimiser and clipping code can
    treat the model as one array.
    """
    total = sum(p.size for p in params)
    data = np.empty(total, dtype=DTYPE)
    grad = np.zeros(total, dtype=DTYPE)
    offset = 0
    for p in params:
        n = p.size
        data[offset:offset + n] = p.data.ravel()
        p.data = data[offset:offset + n].reshape(p.shape)
        p.grad = grad[offset:offset + n].reshape(p.shape)
        offset += n
    flat = Tensor.__new__(Tensor)
    flat.data, flat.grad, flat.requires_grad = data, grad, True
    flat._parents, flat._backward, flat.name = (), None, "flat"
    return flat


def global_grad_norm(params: Iterable[Tensor]) -> float:
    return math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params if p.grad is not None))


def clip_global_norm(params: Sequence[Tensor], threshold: float) -> float:
    """Rescale all gradients in place so their joint L2 norm is at most ``threshold``.

    Returns the norm measured before clipping.
    """
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    norm = global_grad_norm(params)
    if norm > threshold:
        scale = threshold / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def create(cls, params: Sequence[Tensor], **kwargs) -> AdamState:
        return cls(first_moment=[np.zeros_like(p.data) for p in params],
                   second_moment=[np.zeros_like(p.data) for p in params], **kwargs)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState,
              lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError("adam_step: params, grads and state differ in length")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        gg = g * g
        gg *= 1.0 - b2
        v += gg
        # update = lr * (m / c1) / (sqrt(v / c2) + eps)
        denom = np.sqrt(v, out=gg)
        denom *= 1.0 / math.sqrt(c2)
        denom += state.epsilon
        step = np.divide(m, denom, out=denom)
        step *= lr / c1
        p.data -= step


@dataclass(frozen=True)
class LrSchedule:
    max_epochs: int
    base_lr: float = 1e-3
    min_lr: float = 0.0

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be positive")


def cosine_lr(schedule: LrSchedule, epoch: int) -> float:
    """Cosine annealing from ``base_lr`` at epoch 0 to ``min_lr`` at ``max_epochs``."""
    if not 0 <= epoch <= schedule.max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.max_epochs}]")
    frac = epoch / schedule.max_epochs
    return schedule.min_lr + 0.5 * (schedule.base_lr - schedule.min_lr) * (1.0 + math.cos(math.pi * frac))


__all__ = [
    "DTYPE", "Tensor", "ShapeError", "EmptyLossError", "AdamState", "LrSchedule",
    "add", "mul", "neg", "gelu", "reshape", "transpose", "tsum", "tmean", "take",
    "concat", "matmul", "linear", "softmax", "layer_norm", "mse", "parameter",
    "as_tensor", "no_grad", "tune_allocator", "flatten_parameters", "clip_global_norm", "global_grad_norm", "adam_step", "cosine_lr",
]
