"""Dense N-dimensional tensors with reverse-mode automatic differentiation.

Values are stored as row-major numpy arrays (float64 for training, float32
allowed on the inference path). Every op records its parents and a closure
that maps the output gradient to parent-gradient contributions; ``backward``
replays those closures in reverse topological order, summing contributions
so a tensor used twice receives both.

The module also provides a central-finite-difference gradient checker used
throughout the test suite.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DimensionError, NumericError, ParameterError, UsageError

# Additive attention-mask value. Large enough that exp() underflows to an
# exact 0.0 after max-subtraction, which keeps masked positions bitwise
# inert, yet finite so MSE between two masked score tensors stays finite.
MASK_ADDITIVE = -1.0e9

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A dense array plus the bookkeeping needed for backpropagation.

    ``data`` is always a numpy float array; ``grad`` is populated (same
    shape) by ``backward`` for tensors with ``requires_grad=True``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self.name = name

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    """Build an op output; graph edges are recorded only if needed."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


def topo_order(root: Tensor) -> list[Tensor]:
    """Reverse-topological list of all grad-requiring nodes under ``root``.

    Iterative so that deep training graphs do not hit the recursion limit;
    each node appears exactly once.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every grad-requiring tensor reachable from ``loss``.

    ``loss`` must be scalar. Contributions from repeated uses of a tensor are
    summed. Gradients accumulate across calls until ``zero_grad``.
    """
    if loss.size != 1:
        raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            # grad-requiring leaf: write through to .grad, accumulating
            g = np.asarray(g, dtype=node.data.dtype).reshape(node.shape)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, contrib in zip(node._parents, node._vjp(g)):
            if contrib is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + contrib
            else:
                grads[pid] = contrib


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(out, (a, b), vjp)


def pow_const(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent

    def vjp(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _make(out, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports stacked (batched) operands via numpy rules.

    Gradients: d/da = g @ b^T and d/db = a^T @ g, summed over broadcast
    batch dims.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul requires >=2-d operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dims differ: {a.shape} vs {b.shape}"
        )
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), vjp)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def vjp(g):
        return (g.transpose(inverse),)

    return _make(out, (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise UsageError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes[:-1])

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, vjp)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows along axis 0; the embedding-lookup primitive.

    Backward scatter-adds, so repeated indices accumulate correctly.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise DimensionError(
            f"row index out of range for shape {a.shape}: "
            f"[{idx.min()}, {idx.max()}]"
        )
    out = a.data[idx]

    def vjp(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        return (acc,)

    return _make(out, (a,), vjp)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    out = a.data[start:stop]

    def vjp(g):
        acc = np.zeros_like(a.data)
        acc[start:stop] = g
        return (acc,)

    return _make(out, (a,), vjp)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())

    def vjp(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), vjp)


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    out = np.asarray(a.data.mean())

    def vjp(g):
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(out, (a,), vjp)


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make(out, (a,), vjp)


def mean_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    n = a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.shape).copy(),)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def vjp(g):
        return (g * (a.data > 0.0),)

    return _make(out, (a,), vjp)


def _gelu_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    out = _gelu_np(a.data)

    def vjp(g):
        x = a.data
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(out, (a,), vjp)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), vjp)


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x) computed without overflow; derivative is sigmoid."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def vjp(g):
        return (g * _sigmoid_np(x),)

    return _make(out, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _make(out, (a,), vjp)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def _softmax_lastdim_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_lastdim(a: Tensor) -> Tensor:
    """Row softmax over the last dim, max-subtracted for stability.

    Rejects non-finite inputs; rows of the result sum to 1 within 1e-12.
    """
    if not np.isfinite(a.data).all():
        raise NumericError("softmax input contains non-finite values")
    if a.shape[-1] < 1:
        raise DimensionError("softmax requires a non-empty last dim")
    y = _softmax_lastdim_np(a.data)

    def vjp(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return ((g - inner) * y,)

    return _make(y, (a,), vjp)


def _log_softmax_lastdim_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_softmax_lastdim(a: Tensor) -> Tensor:
    if not np.isfinite(a.data).all():
        raise NumericError("log-softmax input contains non-finite values")
    y = _log_softmax_lastdim_np(a.data)

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _make(y, (a,), vjp)


# ---------------------------------------------------------------------------
# normalization and losses
# ---------------------------------------------------------------------------


def _layer_norm_np(x, gain, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv * gain + bias


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Per-row standardization over the last dim, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match "
            f"feature dim {d}"
        )
    if eps <= 0:
        raise ParameterError("layer_norm eps must be > 0")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        reduce_axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=reduce_axes) if g.ndim > 1 else g * xhat
        dbias = g.sum(axis=reduce_axes) if g.ndim > 1 else g
        gg = g * gain.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (gg - m1 - xhat * m2)
        return dx, dgain.reshape(gain.shape), dbias.reshape(bias.shape)

    return _make(out, (x, gain, bias), vjp)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference over all elements."""
    if a.shape != b.shape:
        raise DimensionError(f"mse shapes differ: {a.shape} vs {b.shape}")
    diff = sub(a, b)
    return mean_all(mul(diff, diff))


def cross_entropy_soft(student_logits: Tensor, teacher_logits: Tensor, tau: float) -> Tensor:
    """Soft-target cross entropy at temperature ``tau``, averaged over rows.

    CE(softmax(teacher/tau), log_softmax(student/tau)); the gradient with
    respect to the student logits is (p_S - p_T)/tau per row, divided by
    the row count.
    """
    if student_logits.shape != teacher_logits.shape:
        raise DimensionError(
            f"logit shapes differ: {student_logits.shape} vs {teacher_logits.shape}"
        )
    if tau <= 0:
        raise ParameterError(f"temperature must be > 0, got {tau}")
    inv = 1.0 / tau
    p_teacher = softmax_lastdim(mul(teacher_logits, Tensor(inv)))
    log_p_student = log_softmax_lastdim(mul(student_logits, Tensor(inv)))
    per_row = neg(sum_axis(mul(p_teacher, log_p_student), axis=-1))
    return mean_all(per_row)


# ---------------------------------------------------------------------------
# linear layer helper
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight (+ bias). ``weight`` is stored input-major: [d_in, d_out]."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


def gradient_check(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-8,
    raise_on_fail: bool = True,
) -> float:
    """Compare analytic gradients of ``fn()`` against central differences.

    ``fn`` must rebuild the graph from the current ``.data`` of each param
    on every call. Every element of every param is perturbed by ``+-h``.
    An element passes when |analytic - numeric| <= atol or
    <= rtol * max(|analytic|, |numeric|). Returns the worst normalized
    error |analytic - numeric| / max(scale, atol/rtol), which is <= rtol
    exactly when every element passed.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise UsageError("gradient_check requires float64 parameters")
        p.zero_grad()
    loss = fn()
    backward(loss)
    analytic = [
        np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params
    ]
    worst = 0.0
    for p, got in zip(params, analytic):
        for idx in np.ndindex(p.data.shape):
            keep = p.data[idx]
            p.data[idx] = keep + h
            up = float(fn().data)
            p.data[idx] = keep - h
            down = float(fn().data)
            p.data[idx] = keep
            numeric = (up - down) / (2.0 * h)
            a = float(got[idx])
            err = abs(a - numeric)
            scale = max(abs(a), abs(numeric))
            normalized = err / max(scale, atol / rtol)
            worst = max(worst, normalized)
            if err > atol and normalized > rtol and raise_on_fail:
                raise AssertionError(
                    f"gradient mismatch in {p.name or 'param'}{list(idx)}: "
                    f"analytic {a:.6e} vs numeric {numeric:.6e} "
                    f"(normalized err {normalized:.3e})"
                )
    return worst
