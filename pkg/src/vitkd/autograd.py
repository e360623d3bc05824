"""Minimal reverse-mode autodiff over dense float64 tensors of rank <= 4.

Every op records a node on a tape when any input requires grad; ``backward``
on a scalar loss replays the tape in reverse topological order and accumulates
gradients into the ``grad`` buffer of each requires-grad leaf.

Broadcasting is deliberately restricted: elementwise ops accept operands of
identical shape, or a smaller operand whose shape is a trailing suffix of the
larger one (bias-style broadcast over leading batch axes). Anything else is a
shape error, not a silent numpy broadcast.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

MAX_RANK = 4
LAYER_NORM_EPS = 1e-6

# Registered forward op names; the test suite asserts gradient-check coverage
# for every entry.
OP_REGISTRY: list[str] = []


class AutogradError(Exception):
    """Base class for engine errors."""


class ShapeError(AutogradError):
    """Operand shapes do not conform for the requested op."""


class NonFiniteError(AutogradError):
    """An op received an input containing NaN or Inf."""


class NonScalarLossError(AutogradError):
    """backward() was called on a tensor that is not a scalar."""


class GraphConsumedError(AutogradError):
    """backward() was called twice on the same recorded graph."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    """One recorded operation: inputs and the vector-Jacobian product."""

    __slots__ = ("name", "inputs", "vjp")

    def __init__(self, name: str, inputs: tuple["Tensor", ...], vjp: Callable):
        self.name = name
        self.inputs = inputs
        self.vjp = vjp


class Tensor:
    """Dense float64 tensor with optional gradient tracking.

    ``data`` is always a C-contiguous float64 ndarray of rank <= 4. ``grad``
    is filled by ``backward`` for requires-grad leaves and has the same shape
    as ``data``. Tensors are treated as immutable once they appear in a
    recorded graph; parameter updates happen between graphs.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "_consumed")

    def __init__(self, data, requires_grad: bool = False, node: Node | None = None):
        arr = np.asarray(data, dtype=np.float64, order="C")
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds maximum {MAX_RANK}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node = node
        self._consumed = False

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
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; all routing goes through the registered ops below.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), _as_tensor(-1.0)))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _check_finite(name: str, *inputs: Tensor) -> None:
    for t in inputs:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"op '{name}' received a non-finite input")


def _register(name: str) -> str:
    OP_REGISTRY.append(name)
    return name


def _make(name: str, out: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    requires = _grad_enabled and any(t.requires_grad for t in inputs)
    node = Node(name, inputs, vjp) if requires else None
    return Tensor(out, requires_grad=requires, node=node)


def _suffix_broadcast_check(name: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(small) == len(big) or (small and big[len(big) - len(small):] != small):
        raise ShapeError(f"op '{name}': shapes {sa} and {sb} do not conform "
                         "(broadcast allowed on leading axes only)")
    # rank-0 scalars and true suffixes pass


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the leading axes that were broadcast to reach it."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

_ADD = _register("add")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_finite(_ADD, a, b)
    _suffix_broadcast_check(_ADD, a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(_ADD, out, (a, b), vjp)


_MUL = _register("mul")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_finite(_MUL, a, b)
    _suffix_broadcast_check(_MUL, a, b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(_MUL, out, (a, b), vjp)


_MATMUL = _register("matmul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Ranks >= 2 only. When ranks differ, the lower-rank operand (typically a
    weight matrix) is broadcast over the leading batch axes of the other; when
    ranks match, leading axes must be equal.
    """
    _check_finite(_MATMUL, a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"op '{_MATMUL}': operands must have rank >= 2, "
                         f"got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"op '{_MATMUL}': inner dimensions differ for shapes "
                         f"{a.shape} and {b.shape}")
    if a.ndim == b.ndim and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"op '{_MATMUL}': leading batch axes differ for shapes "
                         f"{a.shape} and {b.shape}")
    if abs(a.ndim - b.ndim) > 0 and min(a.ndim, b.ndim) != 2:
        raise ShapeError(f"op '{_MATMUL}': rank mismatch for shapes {a.shape} and "
                         f"{b.shape} (lower-rank operand must be a plain matrix)")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        ga = np.matmul(g, bt)
        gb = np.matmul(at, g)
        return _unbroadcast_matmul(ga, a.shape), _unbroadcast_matmul(gb, b.shape)

    return _make(_MATMUL, out, (a, b), vjp)


def _unbroadcast_matmul(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(extra)))


_COS = _register("cos")


def cos(x: Tensor) -> Tensor:
    _check_finite(_COS, x)
    out = np.cos(x.data)

    def vjp(g):
        return (-np.sin(x.data) * g,)

    return _make(_COS, out, (x,), vjp)


_GELU = _register("gelu")

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with the Gaussian CDF (erf form, no tanh fit)."""
    _check_finite(_GELU, x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (cdf + x.data * pdf),)

    return _make(_GELU, out, (x,), vjp)


_RESHAPE = _register("reshape")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    _check_finite(_RESHAPE, x)
    shape = tuple(int(s) for s in shape)
    if len(shape) > MAX_RANK:
        raise ShapeError(f"op '{_RESHAPE}': target rank {len(shape)} exceeds {MAX_RANK}")
    target = int(np.prod(shape)) if shape else 1
    if target != x.size:
        raise ShapeError(f"op '{_RESHAPE}': cannot reshape {x.shape} into {shape}")
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.shape),)

    return _make(_RESHAPE, out, (x,), vjp)


_TRANSPOSE = _register("transpose")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    _check_finite(_TRANSPOSE, x)
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"op '{_TRANSPOSE}': axes {axes} are not a permutation "
                         f"for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _make(_TRANSPOSE, out, (x,), vjp)


_SLICE = _register("slice")


def slice_(x: Tensor, key) -> Tensor:
    """Basic slicing with per-axis slices or integers (integers drop the axis)."""
    _check_finite(_SLICE, x)
    if not isinstance(key, tuple):
        key = (key,)
    if len(key) > x.ndim:
        raise ShapeError(f"op '{_SLICE}': key {key} has more axes than shape {x.shape}")
    for k in key:
        if not isinstance(k, (slice, int)):
            raise ShapeError(f"op '{_SLICE}': unsupported index {k!r}")
    out = x.data[key]

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _make(_SLICE, out, (x,), vjp)


_CONCAT = _register("concat")


def concat(tensors: Iterable[Tensor], axis: int) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ShapeError(f"op '{_CONCAT}': empty input list")
    _check_finite(_CONCAT, *ts)
    base = ts[0].shape
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            i != axis % ts[0].ndim and t.shape[i] != base[i] for i in range(t.ndim)
        ):
            raise ShapeError(f"op '{_CONCAT}': shapes {base} and {t.shape} do not "
                             f"conform along axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis % ts[0].ndim] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(_CONCAT, out, tuple(ts), vjp)


_REPEAT = _register("repeat_leading")


def repeat_leading(x: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of ``x`` along a new leading axis (shared weights
    expanded across a batch). Gradient sums over the copies."""
    _check_finite(_REPEAT, x)
    if n < 1:
        raise ShapeError(f"op '{_REPEAT}': repeat count must be positive, got {n}")
    if x.ndim + 1 > MAX_RANK:
        raise ShapeError(f"op '{_REPEAT}': result rank would exceed {MAX_RANK}")
    out = np.broadcast_to(x.data, (n,) + x.shape).copy()

    def vjp(g):
        return (g.sum(axis=0),)

    return _make(_REPEAT, out, (x,), vjp)


_GATHER = _register("gather_rows")


def gather_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows along the second-to-last axis.

    For x of shape (N, D) indices is a 1-D int array; for x of shape
    (B, N, D) indices is (B, K) with one index row per batch element.
    Gradient scatter-adds back into the source rows.
    """
    _check_finite(_GATHER, x)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"op '{_GATHER}': indices must be integers")
    if x.ndim == 2:
        if idx.ndim != 1:
            raise ShapeError(f"op '{_GATHER}': need 1-D indices for shape {x.shape}")
        if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
            raise ShapeError(f"op '{_GATHER}': index out of range for shape {x.shape}")
        out = x.data[idx]

        def vjp(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            return (gx,)

    elif x.ndim == 3:
        if idx.ndim != 2 or idx.shape[0] != x.shape[0]:
            raise ShapeError(f"op '{_GATHER}': indices shape {idx.shape} does not "
                             f"match batch of {x.shape}")
        if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
            raise ShapeError(f"op '{_GATHER}': index out of range for shape {x.shape}")
        batch = np.arange(x.shape[0])[:, None]
        out = x.data[batch, idx]

        def vjp(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, (batch, idx), g)
            return (gx,)

    else:
        raise ShapeError(f"op '{_GATHER}': rank {x.ndim} not supported")

    return _make(_GATHER, out, (x,), vjp)


# ---------------------------------------------------------------------------
# normalization / activation over the last axis
# ---------------------------------------------------------------------------

_SOFTMAX = _register("softmax_lastdim")


def softmax_lastdim(x: Tensor) -> Tensor:
    _check_finite(_SOFTMAX, x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(_SOFTMAX, out, (x,), vjp)


_LAYER_NORM = _register("layer_norm")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    _check_finite(_LAYER_NORM, x, gamma, beta)
    d = x.shape[-1] if x.ndim else 0
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"op '{_LAYER_NORM}': scale/shift shapes {gamma.shape}, "
                         f"{beta.shape} do not match last axis of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gg = g * gamma.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        gx = (gg - m1 - xhat * m2) * inv
        axes = tuple(range(x.ndim - 1))
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        return gx, ggamma, gbeta

    return _make(_LAYER_NORM, out, (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# reductions / losses
# ---------------------------------------------------------------------------

_MEAN = _register("mean")


def mean(x: Tensor) -> Tensor:
    _check_finite(_MEAN, x)
    out = np.asarray(x.data.mean())

    def vjp(g):
        return (np.full_like(x.data, float(g) / x.size),)

    return _make(_MEAN, out, (x,), vjp)


_MSE = _register("mse")


def mse(pred: Tensor, target: Tensor) -> Tensor:
    _check_finite(_MSE, pred, target)
    if pred.shape != target.shape:
        raise ShapeError(f"op '{_MSE}': shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    out = np.asarray(np.mean(diff * diff))

    def vjp(g):
        scale = 2.0 * float(g) / pred.size
        gd = scale * diff
        return gd, -gd

    return _make(_MSE, out, (pred, target), vjp)


_CROSS_ENTROPY = _register("cross_entropy")


def cross_entropy(logits: Tensor, targets: Tensor) -> Tensor:
    """Softmax cross-entropy against soft target distributions.

    logits and targets are both (B, C); each target row should sum to 1.
    Returns the batch-mean loss; the gradient to logits is the usual
    (softmax - target) / B. Targets receive no gradient.
    """
    _check_finite(_CROSS_ENTROPY, logits, targets)
    if logits.ndim != 2 or logits.shape != targets.shape:
        raise ShapeError(f"op '{_CROSS_ENTROPY}': shapes {logits.shape} and "
                         f"{targets.shape} must be equal rank-2")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    b = logits.shape[0]
    out = np.asarray(-(targets.data * logp).sum() / b)

    def vjp(g):
        p = np.exp(logp)
        row = targets.data.sum(axis=-1, keepdims=True)
        gl = float(g) * (p * row - targets.data) / b
        return gl, None

    return _make(_CROSS_ENTROPY, out, (logits, targets), vjp)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf into every requires-grad leaf under ``loss``.

    The recorded graph is single-use: a second call on the same loss raises
    ``GraphConsumedError``. Gradients accumulate across separate graphs, so
    backward(a); backward(b) equals backward(a + b) on shared leaves.
    """
    if loss.size != 1:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("backward() already ran on this graph")
    loss._consumed = True
    if not loss.requires_grad:
        return
    if loss.node is None:
        if loss.grad is None:
            loss.grad = np.zeros_like(loss.data)
        loss.grad += np.ones_like(loss.data)
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen or t.node is None:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for inp in t.node.inputs:
            if inp.node is not None or inp.requires_grad:
                stack.append((inp, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        input_grads = t.node.vjp(g)
        for inp, ig in zip(t.node.inputs, input_grads):
            if ig is None:
                continue
            if inp.node is None:
                if inp.requires_grad:
                    if inp.grad is None:
                        inp.grad = np.zeros_like(inp.data)
                    inp.grad += ig
            else:
                acc = grads.get(id(inp))
                grads[id(inp)] = ig if acc is None else acc + ig
