"""Dense 2-D float64 tensors with a reverse-mode gradient tape.

Every tensor wraps a C-order numpy array. Operations append nodes to a
thread-local tape in creation order, which is already a topological order, so
the backward pass is a single reverse sweep that visits each node once. The
tape is cleared when backward() returns. Gradients are only materialized for
tensors that participate in differentiation (leaves with requires_grad, or
intermediates on the tape); large constants never allocate gradient buffers.

All published operations verify their output is finite and raise NumericError
otherwise.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, NumericError, ShapeError, StateError

LOG_FLOOR = 1e-12
_SUM_TOL = 1e-6


class TapeNode:
    __slots__ = ("output", "backward_fn")

    def __init__(self, output: "Tensor", backward_fn: Callable[[np.ndarray], None]):
        self.output = output
        self.backward_fn = backward_fn


class GradTape:
    """Ordered list of recorded primitives; append order = topological order."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def record(self, output: "Tensor", backward_fn) -> None:
        node = TapeNode(output, backward_fn)
        output.tape_node = node
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()


_TLS = threading.local()


def active_tape() -> GradTape:
    tape = getattr(_TLS, "tape", None)
    if tape is None:
        tape = GradTape()
        _TLS.tape = tape
    return tape


def _recording() -> bool:
    return getattr(_TLS, "recording", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation paths)."""
    prev = _recording()
    _TLS.recording = False
    try:
        yield
    finally:
        _TLS.recording = prev


def _as_matrix(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"tensors are 2-D, got ndim={arr.ndim}")
    return np.ascontiguousarray(arr)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_matrix(data).copy()
        if not np.isfinite(self.data).all():
            raise NumericError("tensor constructed with non-finite entries")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape_node: TapeNode | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal fast path for op outputs: no copy, finiteness checked by the op
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = False
        out.grad = None
        out.tape_node = None
        return out

    @classmethod
    def zeros(cls, rows: int, cols: int, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros((rows, cols)), requires_grad=requires_grad)

    @classmethod
    def scalar(cls, value: float) -> "Tensor":
        return cls(np.array([[float(value)]]))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t.tape_node is not None


def _accum(t: Tensor, delta: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(delta, dtype=np.float64, copy=True)
    else:
        t.grad += delta


def _finish(op: str, inputs: Sequence[Tensor], raw: np.ndarray, backward_fn) -> Tensor:
    if not np.isfinite(raw).all():
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor._wrap(np.ascontiguousarray(raw))
    if _recording() and any(_tracked(t) for t in inputs):
        active_tape().record(out, backward_fn)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul mismatch: {a.shape} @ {b.shape}")
    raw = a.data @ b.data

    def backward_fn(g: np.ndarray) -> None:
        if _tracked(a):
            _accum(a, g @ b.data.T)
        if _tracked(b):
            _accum(b, a.data.T @ g)

    return _finish("matmul", (a, b), raw, backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may be a single row broadcast over a's rows."""
    broadcast = b.shape == (1, a.shape[1]) and a.shape[0] != 1
    if not broadcast and a.shape != b.shape:
        raise ShapeError(f"add mismatch: {a.shape} + {b.shape}")
    raw = a.data + b.data

    def backward_fn(g: np.ndarray) -> None:
        if _tracked(a):
            _accum(a, g)
        if _tracked(b):
            _accum(b, g.sum(axis=0, keepdims=True) if broadcast else g)

    return _finish("add", (a, b), raw, backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub mismatch: {a.shape} - {b.shape}")
    raw = a.data - b.data

    def backward_fn(g: np.ndarray) -> None:
        if _tracked(a):
            _accum(a, g)
        if _tracked(b):
            _accum(b, -g)

    return _finish("sub", (a, b), raw, backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul mismatch: {a.shape} * {b.shape}")
    raw = a.data * b.data

    def backward_fn(g: np.ndarray) -> None:
        if _tracked(a):
            _accum(a, g * b.data)
        if _tracked(b):
            _accum(b, g * a.data)

    return _finish("mul", (a, b), raw, backward_fn)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    raw = a.data * s

    def backward_fn(g: np.ndarray) -> None:
        if _tracked(a):
            _accum(a, g * s)

    return _finish("scale", (a,), raw, backward_fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    raw = np.where(mask, a.data, 0.0)

    def backward_fn(g: np.ndarray) -> None:
        if _tracked(a):
            _accum(a, g * mask)

    return _finish("relu", (a,), raw, backward_fn)


def transpose(a: Tensor) -> Tensor:
    raw = a.data.T.copy()

    def backward_fn(g: np.ndarray) -> None:
        if _tracked(a):
            _accum(a, g.T)

    return _finish("transpose", (a,), raw, backward_fn)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols row mismatch: {a.shape} vs {b.shape}")
    raw = np.hstack([a.data, b.data])
    split = a.shape[1]

    def backward_fn(g: np.ndarray) -> None:
        if _tracked(a):
            _accum(a, g[:, :split])
        if _tracked(b):
            _accum(b, g[:, split:])

    return _finish("concat_cols", (a, b), raw, backward_fn)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    if not (0 <= lo < hi <= a.shape[1]):
        raise ShapeError(f"slice_cols [{lo}:{hi}] out of range for {a.shape}")
    raw = a.data[:, lo:hi].copy()

    def backward_fn(g: np.ndarray) -> None:
        if _tracked(a):
            full = np.zeros_like(a.data)
            full[:, lo:hi] = g
            _accum(a, full)

    return _finish("slice_cols", (a,), raw, backward_fn)


def gather_rows(a: Tensor, ids: Sequence[int]) -> Tensor:
    idx = np.asarray(ids, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise ShapeError("gather_rows needs at least one row id")
    if idx.min() < 0 or idx.max() >= a.shape[0]:
        raise IndexError(f"row ids out of range for {a.shape[0]} rows")
    raw = a.data[idx]

    def backward_fn(g: np.ndarray) -> None:
        if _tracked(a):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            _accum(a, full)

    return _finish("gather_rows", (a,), raw, backward_fn)


def softmax_rows(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    raw = e / e.sum(axis=1, keepdims=True)
    sm = raw

    def backward_fn(g: np.ndarray) -> None:
        if _tracked(a):
            inner = (g * sm).sum(axis=1, keepdims=True)
            _accum(a, (g - inner) * sm)

    return _finish("softmax_rows", (a,), raw, backward_fn)


def dropout(a: Tensor, rate: float, rng) -> Tensor:
    """Inverted dropout; draws one uniform per entry from rng."""
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must be in [0,1), got {rate}")
    if rate == 0.0:
        return scale(a, 1.0)
    keep = rng.uniforms(a.data.size).reshape(a.shape) >= rate
    factor = keep / (1.0 - rate)
    raw = a.data * factor

    def backward_fn(g: np.ndarray) -> None:
        if _tracked(a):
            _accum(a, g * factor)

    return _finish("dropout", (a,), raw, backward_fn)


def sum_all(a: Tensor) -> Tensor:
    raw = np.array([[a.data.sum()]])

    def backward_fn(g: np.ndarray) -> None:
        if _tracked(a):
            _accum(a, np.full_like(a.data, g[0, 0]))

    return _finish("sum_all", (a,), raw, backward_fn)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def sum_sq(a: Tensor) -> Tensor:
    """Sum of squared entries (squared Frobenius norm)."""
    with np.errstate(over="ignore"):
        raw = np.array([[float((a.data * a.data).sum())]])

    def backward_fn(g: np.ndarray) -> None:
        if _tracked(a):
            _accum(a, 2.0 * a.data * g[0, 0])

    return _finish("sum_sq", (a,), raw, backward_fn)


def _check_rows_are_distributions(name: str, arr: np.ndarray) -> None:
    if arr.min() < -1e-9:
        raise DomainError(f"{name} has negative entries")
    sums = arr.sum(axis=1)
    if np.abs(sums - 1.0).max() > _SUM_TOL:
        raise DomainError(f"{name} rows must sum to 1 within {_SUM_TOL}")


def kl_div(p: Tensor, q: Tensor) -> Tensor:
    """Mean over rows of KL(p_row || q_row), entries clamped to [1e-12, 1].

    Rows must be probability distributions (sum to 1 within 1e-6). With a
    single row this is exactly sum_i p_i ln(p_i / q_i); with a batch it is the
    mean of the per-row divergences, so duplicating every row leaves the value
    unchanged.
    """
    if p.shape != q.shape:
        raise ShapeError(f"kl_div mismatch: {p.shape} vs {q.shape}")
    _check_rows_are_distributions("kl_div p", p.data)
    _check_rows_are_distributions("kl_div q", q.data)
    n = p.shape[0]
    ph = np.clip(p.data, LOG_FLOOR, 1.0)
    qh = np.clip(q.data, LOG_FLOOR, 1.0)
    log_ratio = np.log(ph) - np.log(qh)
    raw = np.array([[float((ph * log_ratio).sum() / n)]])
    p_active = (p.data > LOG_FLOOR) & (p.data <= 1.0)
    q_active = (q.data > LOG_FLOOR) & (q.data <= 1.0)

    def backward_fn(g: np.ndarray) -> None:
        s = g[0, 0] / n
        if _tracked(p):
            _accum(p, (log_ratio + 1.0) * p_active * s)
        if _tracked(q):
            _accum(q, -(ph / qh) * q_active * s)

    return _finish("kl_div", (p, q), raw, backward_fn)


def cross_entropy(probs: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer labels under row distributions."""
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = probs.shape
    if y.size != n:
        raise ShapeError(f"{y.size} labels for {n} rows")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise IndexError(f"labels out of range for {c} classes")
    _check_rows_are_distributions("cross_entropy probs", probs.data)
    picked = probs.data[np.arange(n), y]
    clamped = np.clip(picked, LOG_FLOOR, 1.0)
    raw = np.array([[float(-np.log(clamped).mean())]])
    active = picked > LOG_FLOOR

    def backward_fn(g: np.ndarray) -> None:
        if _tracked(probs):
            full = np.zeros_like(probs.data)
            full[np.arange(n), y] = -(active / clamped) / n * g[0, 0]
            _accum(probs, full)

    return _finish("cross_entropy", (probs,), raw, backward_fn)


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss; clears the active tape afterwards."""
    if loss.shape != (1, 1):
        raise ShapeError(f"backward needs a 1x1 loss, got {loss.shape}")
    tape = active_tape()
    if loss.tape_node is None:
        # constant loss: nothing depends on parameters, gradients stay zero
        tape.clear()
        return
    loss.grad = np.ones((1, 1))
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        node.backward_fn(g)
    tape.clear()


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """In-place theta <- theta - lr * grad; gradients are consumed (reset)."""
    for p in params:
        if p.grad is None:
            raise StateError("sgd_step on a parameter with no gradient")
        p.data -= lr * p.grad
        if not np.isfinite(p.data).all():
            raise NumericError("sgd_step produced non-finite parameters")
        p.grad = None


class Sgd:
    """Plain SGD with optional momentum; velocity is per-parameter state."""

    def __init__(self, lr: float, momentum: float = 0.0):
        if lr <= 0:
            raise DomainError("learning rate must be positive")
        if not 0.0 <= momentum < 1.0:
            raise DomainError("momentum must be in [0,1)")
        self.lr = lr
        self.momentum = momentum
        self._velocity: dict[int, np.ndarray] = {}

    def step(self, params: Sequence[Tensor]) -> None:
        if self.momentum == 0.0:
            sgd_step(params, self.lr)
            return
        for p in params:
            if p.grad is None:
                raise StateError("sgd_step on a parameter with no gradient")
            v = self._velocity.get(id(p))
            if v is None:
                v = np.zeros_like(p.data)
                self._velocity[id(p)] = v
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v
            if not np.isfinite(p.data).all():
                raise NumericError("sgd_step produced non-finite parameters")
            p.grad = None
