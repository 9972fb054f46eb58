"""Dense reverse-mode automatic differentiation on float64 numpy arrays.

Every primitive records its parents and a backward rule on the output
tensor. ``Tensor.backward`` linearises the graph into a topological tape
and replays the rules in reverse. Only 1-D and 2-D tensors are used by the
models in this package; broadcasting is limited to scalar-vs-tensor, plus
the two explicit row/column helpers ``add_bias`` and ``scale_rows``.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Raised when an operation receives NaN input."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 2:
            raise DimensionError(f"only 0-, 1- and 2-D tensors are supported, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable t.

        Gradients for intermediate nodes are computed fresh on each call, so
        calling backward twice without zeroing exactly doubles every
        accumulated gradient.
        """
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(tape(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered list of nodes reachable from ``root``.

    Every node appears after all of its inputs.
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return _make(A @ B, (a, b), backward, "matmul")


def transpose(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got {x.shape}")
    return _make(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    src = x.shape
    if int(np.prod(shape)) != x.data.size:
        raise DimensionError(f"cannot reshape {src} to {shape}")
    return _make(x.data.reshape(shape).copy(), (x,), lambda g: (g.reshape(src),), "reshape")


def _binary_shapes(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise DimensionError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    A, B = a.data, b.data

    def backward(g):
        return _unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)

    return _make(A * B, (a, b), backward, "mul")


def scale(x, alpha: float) -> Tensor:
    x = _as_tensor(x)
    alpha = float(alpha)
    return _make(x.data * alpha, (x,), lambda g: (g * alpha,), "scale")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-K bias vector to every row of an N x K matrix."""
    x, b = _as_tensor(x), _as_tensor(b)
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias shape mismatch: {x.shape} + {b.shape}")
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)), "add_bias")


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Multiply row i of an N x K matrix by w[i]."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 1 or x.shape[0] != w.shape[0]:
        raise DimensionError(f"scale_rows shape mismatch: {x.shape} rows vs weights {w.shape}")
    X, W = x.data, w.data

    def backward(g):
        return g * W[:, None], (g * X).sum(axis=1)

    return _make(X * W[:, None], (x, w), backward, "scale_rows")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0  # subgradient 0 at exactly 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def elementwise(op: str, *args, alpha: float | None = None) -> Tensor:
    """Dispatch by name: relu, tanh, sigmoid, add, mul, scale."""
    unary = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}
    if op in unary:
        return unary[op](*args)
    if op == "add":
        return add(*args)
    if op == "mul":
        return mul(*args)
    if op == "scale":
        if alpha is None:
            (x, alpha) = args
        else:
            (x,) = args
        return scale(x, alpha)
    raise ValueError(f"unknown elementwise op {op!r}")


def _softmax_np(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction."""
    x = _as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax received NaN input")
    if x.data.ndim == 0:
        raise DimensionError("softmax needs at least one axis")
    y = _softmax_np(x.data, axis)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the non-singleton axis of an N x 1, 1 x N or length-N tensor."""
    x = _as_tensor(x)
    if x.data.ndim == 1:
        return softmax(x, axis=0)
    if x.data.ndim == 2 and x.shape[1] == 1:
        return softmax(x, axis=0)
    if x.data.ndim == 2 and x.shape[0] == 1:
        return softmax(x, axis=1)
    raise DimensionError(f"softmax_rows expects N x 1 or 1 x N, got {x.shape}")


def sum_axis(x: Tensor, axis: int) -> Tensor:
    x = _as_tensor(x)
    nd = x.data.ndim
    if not -nd <= axis < nd:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(x.data.sum(axis=axis), (x,), backward, "sum_axis")


def total(x: Tensor) -> Tensor:
    """Sum of every element, as a 0-D tensor."""
    x = _as_tensor(x)
    shape = x.shape
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "total")


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    m = z.max()
    return z - m - np.log(np.exp(z - m).sum())


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label] for a length-C logit vector."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 1:
        raise DimensionError(f"cross_entropy expects a length-C vector, got {logits.shape}")
    C = logits.shape[0]
    if not 0 <= int(label) < C:
        raise IndexError(f"label {label} out of range for {C} classes")
    if np.isnan(logits.data).any():
        raise NumericError("cross_entropy received NaN logits")
    lsm = log_softmax_np(logits.data)
    p = np.exp(lsm)

    def backward(g):
        d = p.copy()
        d[label] -= 1.0
        return (d * float(g),)

    return _make(np.array(-lsm[label]), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_error: float
    tol: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = bool(self.max_rel_error <= self.tol)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor) over elements."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numeric_grad(fn: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, probing x.data in place."""
    out = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn(x).item()
            flat[i] = orig - eps
            fm = fn(x).item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
    return out


def grad_check(fn: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5, tol: float = 1e-6) -> GradCheckReport:
    """Compare the analytic gradient of scalar ``fn`` at ``x`` with central differences."""
    probe = Tensor(x.data.copy(), requires_grad=True)
    fn(probe).backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)
    numeric = numeric_grad(fn, probe, eps)
    return GradCheckReport(analytic, numeric, relative_error(analytic, numeric), tol)
