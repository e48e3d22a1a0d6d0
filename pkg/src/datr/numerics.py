"""Dense tensors with define-by-run reverse-mode differentiation.

Every op here takes :class:`Tensor` inputs, computes its forward value with
numpy and, when any input requires a gradient, records a closure that maps
the output gradient to per-input gradients. :func:`backward` walks the
recorded graph once in reverse topological order.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "DimensionError", "ContractError", "NumericError",
    "tensor", "as_tensor", "get_dtype", "set_dtype", "precision", "no_grad",
    "add", "sub", "mul", "div", "neg", "matmul", "sum", "mean", "reshape",
    "transpose", "concat", "roll", "take", "exp", "log", "tanh", "relu",
    "gelu", "sigmoid", "softmax", "interp2d", "backward", "grad_check",
    "grad_check_report", "GradCheckReport",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition of an operation does not hold."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True
_KINKS: list | None = None  # ReLU sign patterns, recorded while a grad check probes kinks


def get_dtype() -> np.dtype:
    return _DTYPE


def set_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float precision (float32 or float64)."""
    previous = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """An n-d float array that may take part in differentiation.

    ``data`` is never modified in place after creation; only ``grad`` is
    accumulated by :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __radd__ = lambda self, other: add(other, self)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __rsub__ = lambda self, other: sub(other, self)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __rmul__ = lambda self, other: mul(other, self)  # noqa: E731
    __truediv__ = lambda self, other: div(self, other)  # noqa: E731
    __rtruediv__ = lambda self, other: div(other, self)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.name = None
    if _GRAD_ENABLED and any(p.requires_grad or p._backward is not None for p in parents):
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Wrap operands; a plain number takes the dtype of the tensor operand."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(a, dtype=b.dtype), b
    return as_tensor(a), as_tensor(b)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), _bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), _bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def _bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if _tracked(a) else None
        gb = _unbroadcast(g * a.data, b.shape) if _tracked(b) else None
        return ga, gb

    return _make(a.data * b.data, (a, b), _bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def _bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if _tracked(a) else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if _tracked(b) else None
        return ga, gb

    return _make(out, (a, b), _bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    if _KINKS is not None:
        _KINKS.append(np.packbits(mask).tobytes())
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1 + t)

    def _bw(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

    return _make(out.astype(a.dtype), (a,), _bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1 - out),))


# ---------------------------------------------------------------- reductions / shape

def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), _bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, _bw)


def roll(a, shifts, axes) -> Tensor:
    a = as_tensor(a)
    back = tuple(-s for s in shifts)
    return _make(np.roll(a.data, shifts, axes), (a,), lambda g: (np.roll(g, back, axes),))


def take(a, index: np.ndarray) -> Tensor:
    """Gather rows of ``a`` (first axis) by an integer index array."""
    a = as_tensor(a)
    index = np.asarray(index)

    def _bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return _make(a.data[index], (a,), _bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul batch extents not broadcastable: {a.shape} x {b.shape}") from exc

    def _bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if _tracked(a) else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if _tracked(b) else None
        return ga, gb

    return _make(out, (a, b), _bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), _bw)


def interp2d(a, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Apply separable linear resampling ``rows @ x @ cols.T`` per channel.

    ``a`` is ``[B, H, W, C]``; ``rows`` is ``[H', H]`` and ``cols`` ``[W', W]``.
    """
    a = as_tensor(a)
    rows = rows.astype(a.dtype, copy=False)
    cols = cols.astype(a.dtype, copy=False)
    tmp = np.einsum("oh,bhwc->bowc", rows, a.data, optimize=True)
    out = np.einsum("pw,bowc->bopc", cols, tmp, optimize=True)

    def _bw(g):
        gt = np.einsum("pw,bopc->bowc", cols, g, optimize=True)
        return (np.einsum("oh,bowc->bhwc", rows, gt, optimize=True),)

    return _make(out, (a,), _bw)


# ---------------------------------------------------------------- backward

def _topological(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    ``params`` (a ParamStore or iterable of tensors) additionally receive a
    zero gradient when the loss does not depend on them, so that after the
    call every listed parameter has a populated ``grad``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not _tracked(parent):
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if params is not None:
        values = params.values() if hasattr(params, "values") else params
        for p in values:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


@dataclass
class GradCheckReport:
    max_error: float
    checked: int
    skipped: int  # coordinates whose perturbation crossed a ReLU kink


@contextlib.contextmanager
def _kink_log():
    global _KINKS
    previous, _KINKS = _KINKS, []
    try:
        yield _KINKS
    finally:
        _KINKS = previous


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-4,
               sample: int | None = None, seed: int = 0) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f`` is re-evaluated with perturbed parameter values; parameters are
    restored afterwards. Error per coordinate is
    ``|analytic - numeric| / max(1e-8, |numeric|)``. With ``sample`` set, at
    most that many randomly chosen coordinates per parameter are checked.
    """
    return grad_check_report(f, params, eps, sample, seed).max_error


def grad_check_report(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-4,
                      sample: int | None = None, seed: int = 0,
                      skip_kinks: bool = False) -> GradCheckReport:
    """:func:`grad_check` with coordinate counts.

    With ``skip_kinks``, a coordinate is left out when some ReLU input changes
    sign between the ``+eps`` and ``-eps`` evaluations: the difference
    quotient then straddles a non-differentiable point and estimates nothing.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    rng = np.random.default_rng(seed)
    params = list(params.values()) if hasattr(params, "values") else list(params)
    for p in params:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite at the check point")
    backward(loss, params)

    def probe(p, value):
        p.data = value
        if not skip_kinks:
            return float(f().data), None
        with _kink_log() as log:
            out = float(f().data)
        return out, log

    worst, checked, skipped = 0.0, 0, 0
    for p in params:
        analytic = p.grad
        base = p.data
        flat = base.reshape(-1)
        coords = range(flat.size)
        if sample is not None and flat.size > sample:
            coords = np.sort(rng.choice(flat.size, sample, replace=False))
        for i in coords:
            plus = flat.copy()
            plus[i] += eps
            fp, kp = probe(p, plus.reshape(base.shape))
            minus = flat.copy()
            minus[i] -= eps
            fm, km = probe(p, minus.reshape(base.shape))
            p.data = base
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite loss while perturbing {p.name or 'parameter'}[{i}]")
            if kp != km:
                skipped += 1
                continue
            numeric = (fp - fm) / (2 * eps)
            err = abs(float(analytic.reshape(-1)[i]) - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, err)
            checked += 1
    return GradCheckReport(worst, checked, skipped)
