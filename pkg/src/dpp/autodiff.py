"""Reverse-mode automatic differentiation over dense float64 tensors.

A :class:`Tape` records executed operations while active; calling
``tape.backward(loss)`` walks the record once in reverse, accumulating
gradients into every tensor that requires them. The tape is rebuilt on every
forward pass, so the recorded graph can change shape with the routing
decisions taken on each batch.

Design points:

* float64 everywhere; gradient checks are expected to be crisp.
* Any op producing NaN/Inf from finite inputs raises ``FloatingPointError``
  (overflow is an error, never a silent value).
* ``abs`` uses subgradient 0 at exactly 0; ``minimum``/``maximum`` send the
  gradient to the first argument on ties; ``clamp`` passes gradient through
  on the boundary. All three choices are deterministic.
* Binary ops broadcast like numpy; the backward pass sums gradients over
  broadcast axes.
* Traversal and accumulation order are fixed, so repeated backward passes
  over identical graphs are bit-identical.

Every op charges the active :class:`dpp.flops.FlopCounter` (if any) using
the cost rules in :mod:`dpp.flops`; data movement is free.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import flops


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")


class Tensor:
    """Dense float64 array with optional participation in gradient taping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars are lifted to constant tensors
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of executed ops for one forward/backward pass.

    Parents always precede children in ``nodes`` because recording happens
    at execution time, so the reversed list is a valid reverse-topological
    order and each node is visited exactly once during backward.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            grad_out = node.out.grad
            if grad_out is None:
                continue
            for parent, grad in zip(node.parents, node.backward(grad_out)):
                if grad is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += grad


def _record(op: str, out_data: np.ndarray, parents: tuple[Tensor, ...],
            backward: Callable) -> Tensor:
    _check_finite(out_data, op)
    requires = any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=requires)
    if _TAPES and requires:
        _TAPES[-1].nodes.append(_Node(out, parents, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    out = a.data @ b.data
    flops.charge("matmul", flops.matmul(m, k, n))
    a_data, b_data = a.data, b.data

    def backward(g):
        return g @ b_data.T, a_data.T @ g

    return _record("matmul", out, (a, b), backward)


def row_matmul(vectors: Tensor, matrices: Tensor) -> Tensor:
    """Per-row matrix product: out[i] = vectors[i] @ matrices[i].

    vectors is (n, d), matrices is (n, d, h); the result is (n, h). This is
    the primitive behind input-dependent (generated) weight matrices.
    """
    if vectors.ndim != 2 or matrices.ndim != 3:
        raise ValueError("row_matmul needs (n,d) vectors and (n,d,h) matrices")
    n, d = vectors.shape
    if matrices.shape[0] != n or matrices.shape[1] != d:
        raise ValueError(
            f"row_matmul shapes disagree: {vectors.shape} vs {matrices.shape}")
    h = matrices.shape[2]
    out = np.einsum("nd,ndh->nh", vectors.data, matrices.data)
    flops.charge("row_matmul", flops.row_matmul(n, d, h))
    v_data, m_data = vectors.data, matrices.data

    def backward(g):
        dv = np.einsum("nh,ndh->nd", g, m_data)
        dm = np.einsum("nd,nh->ndh", v_data, g)
        return dv, dm

    return _record("row_matmul", out, (vectors, matrices), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    return _record("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _record("reshape", a.data.reshape(shape), (a,),
                   lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# data movement


def index_select(a: Tensor, idx) -> Tensor:
    """Gather rows (axis 0). Backward scatter-adds, so repeats are allowed."""
    idx = np.asarray(idx, dtype=np.intp)
    out = a.data[idx]
    in_shape = a.shape

    def backward(g):
        da = np.zeros(in_shape)
        np.add.at(da, idx, g)
        return (da,)

    return _record("index_select", out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    split_points = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, split_points, axis=axis))

    return _record("concat", out, tuple(tensors), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    in_shape = a.shape

    def backward(g):
        da = np.zeros(in_shape)
        da[index] = g
        return (da,)

    return _record("narrow", a.data[index].copy(), (a,), backward)


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data, requires_grad=False)


# ---------------------------------------------------------------------------
# elementwise


def _binary(op: str, a: Tensor, b: Tensor, out_data, da_fn, db_fn) -> Tensor:
    flops.charge(op, flops.elementwise(out_data.size))
    a_shape, b_shape = a.shape, b.shape

    def backward(g):
        return (_unbroadcast(da_fn(g), a_shape), _unbroadcast(db_fn(g), b_shape))

    return _record(op, out_data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary("add", a, b, a.data + b.data, lambda g: g, lambda g: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary("sub", a, b, a.data - b.data, lambda g: g, lambda g: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a_data, b_data = a.data, b.data
    return _binary("mul", a, b, a_data * b_data,
                   lambda g: g * b_data, lambda g: g * a_data)


def div(a: Tensor, b: Tensor) -> Tensor:
    a_data, b_data = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a_data / b_data
    return _binary("div", a, b, out,
                   lambda g: g / b_data,
                   lambda g: -g * a_data / (b_data * b_data))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    # ties route gradient to the first argument
    take_a = a.data <= b.data
    return _binary("minimum", a, b, np.minimum(a.data, b.data),
                   lambda g: g * take_a, lambda g: g * ~take_a)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    take_a = a.data >= b.data
    return _binary("maximum", a, b, np.maximum(a.data, b.data),
                   lambda g: g * take_a, lambda g: g * ~take_a)


def neg(a: Tensor) -> Tensor:
    flops.charge("neg", flops.elementwise(a.size))
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    flops.charge("scale", flops.elementwise(a.size))
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    flops.charge("relu", flops.elementwise(a.size))
    return _record("relu", a.data * mask, (a,), lambda g: (g * mask,))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)  # 0 at exactly 0: documented subgradient choice
    flops.charge("abs", flops.elementwise(a.size))
    return _record("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    flops.charge("exp", flops.elementwise(a.size))
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log of a non-positive value")
    out = np.log(a.data)
    flops.charge("log", flops.elementwise(a.size))
    a_data = a.data
    return _record("log", out, (a,), lambda g: (g / a_data,))


def sigmoid(a: Tensor) -> Tensor:
    # two-branch form stays finite for arbitrarily large |x|
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    flops.charge("sigmoid", flops.elementwise(a.size))
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    # gradient passes through on the closed interval [lo, hi]
    inside = (a.data >= lo) & (a.data <= hi)
    flops.charge("clamp", flops.elementwise(a.size))
    return _record("clamp", np.clip(a.data, lo, hi), (a,),
                   lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions


def _reduced_shape(shape, axis, keepdims):
    if axis is None:
        return () if not keepdims else (1,) * len(shape)
    out = list(shape)
    if keepdims:
        out[axis] = 1
        return tuple(out)
    del out[axis]
    return tuple(out)


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    if a.size == 0 or (axis is not None and a.shape[axis] == 0):
        raise ValueError("sum over an empty reduction")
    out = a.data.sum(axis=axis, keepdims=keepdims)
    flops.charge("sum", flops.reduce_sum(a.size, int(np.size(out))))
    in_shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, in_shape).copy(),)

    return _record("sum", out, (a,), backward)


def tmean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    if a.size == 0 or (axis is not None and a.shape[axis] == 0):
        raise ValueError("mean over an empty reduction")
    out = a.data.mean(axis=axis, keepdims=keepdims)
    flops.charge("mean", flops.reduce_mean(a.size, int(np.size(out))))
    in_shape = a.shape
    count = a.size if axis is None else a.shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, in_shape).copy() / count,)

    return _record("mean", out, (a,), backward)


# ---------------------------------------------------------------------------
# structured ops


def softmax(a: Tensor, temperature: float = 1.0) -> Tensor:
    """Max-stabilized softmax along the last axis, with temperature."""
    if temperature <= 0:
        raise ValueError("softmax temperature must be positive")
    z = a.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    rows = a.size // a.shape[-1]
    flops.charge("softmax", flops.softmax(rows, a.shape[-1]))

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out / temperature,)

    return _record("softmax", out, (a,), backward)


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    rows = a.size // a.shape[-1]
    flops.charge("log_softmax", flops.log_softmax(rows, a.shape[-1]))
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", out, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row of the last axis to zero mean/unit variance, then
    apply the affine transform gain * xhat + bias."""
    d = a.shape[-1]
    if d < 2:
        raise ValueError("layer_norm needs a normalized axis of width >= 2")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data
    rows = a.size // d
    flops.charge("layer_norm", flops.layer_norm(rows, d))
    gain_data = gain.data

    def backward(g):
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        dxhat = g * gain_data
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _record("layer_norm", out, (a, gain, bias), backward)


def argmax_last(data: np.ndarray) -> np.ndarray:
    """Argmax along the last axis with ties broken toward the HIGHEST index.

    numpy's argmax prefers the lowest index; reversing first flips that.
    """
    w = data.shape[-1]
    return (w - 1) - np.argmax(data[..., ::-1], axis=-1)


def straight_through_onehot(soft: Tensor) -> Tensor:
    """One-hot of the row argmax in the forward pass; identity backward.

    The forward output is exactly one-hot (ties toward the highest index);
    the backward pass hands the incoming gradient to the soft distribution
    unchanged, which is the straight-through estimator.
    """
    idx = argmax_last(soft.data)
    out = np.zeros_like(soft.data)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return _record("straight_through", out, (soft,), lambda g: (g,))


# ---------------------------------------------------------------------------
# verification


def finite_difference_check(f: Callable[[Tensor], Tensor], theta: Tensor,
                            h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps the parameter tensor to a scalar Tensor. Error per coordinate
    is |analytic - numeric| / max(1, |analytic|); the max over coordinates is
    returned. Non-finite evaluations raise ``FloatingPointError``.
    """
    theta.grad = None
    with Tape() as tape:
        out = f(theta)
        if out.size != 1:
            raise ValueError("finite_difference_check needs a scalar function")
        tape.backward(out)
    analytic = (np.zeros_like(theta.data) if theta.grad is None
                else theta.grad.copy())

    flat = theta.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(f(theta).data)
        flat[i] = orig - h
        f_minus = float(f(theta).data)
        flat[i] = orig
        numeric[i] = (f_plus - f_minus) / (2.0 * h)
    if not np.all(np.isfinite(numeric)):
        raise FloatingPointError("non-finite function value in difference stencil")
    numeric = numeric.reshape(theta.shape)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max())


def check_gradients(f: Callable[[], Tensor], params: Iterable[Tensor],
                    h: float = 1e-5) -> float:
    """finite_difference_check over several parameter tensors of a closure."""
    worst = 0.0
    for p in params:
        worst = max(worst, finite_difference_check(lambda _t: f(), p, h=h))
    return worst
