"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

The primitive set is deliberately small: exactly what the episodic
classification pipeline needs (matrix products, broadcast arithmetic, ELU,
set reductions, concatenation, a fused softmax cross-entropy, and a
differentiable symmetric-positive-definite solve). There is no graph
optimizer; per-episode graphs are small and fixed-shape.

Forward values are computed eagerly. When a :class:`Tape` is active on the
current thread, every primitive whose output requires a gradient is recorded;
``Tape.backward`` replays the records in reverse execution order and
accumulates vector-Jacobian products into ``Tensor.grad``. With no active
tape, the same functions act as plain numpy forward computations.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
import scipy.linalg


class ShapeMismatchError(ValueError):
    """Operand shapes do not conform for the attempted primitive."""


class NonFiniteError(FloatingPointError):
    """A primitive encountered NaN or infinity where finite values are required."""


class SPDFactorizationError(RuntimeError):
    """Cholesky factorization failed even after jitter escalation."""

    def __init__(self, message, jitters):
        super().__init__(f"{message} (attempted jitters: {jitters})")
        self.jitters = list(jitters)


class Tensor:
    """A dense float64 array plus gradient metadata.

    ``data`` is always a float64 ndarray; ``grad`` is populated by
    ``Tape.backward`` for tensors with ``requires_grad`` and has the same
    shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Operator sugar; all routing through the recorded primitives below.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def parameter(data, rng: np.random.Generator | None = None, scale: float | None = None) -> Tensor:
    """Create a trainable leaf tensor, optionally randomly initialized."""
    if rng is not None:
        fan_in = np.asarray(data).shape[0] if np.ndim(data) else 1
        std = scale if scale is not None else 1.0 / np.sqrt(max(fan_in, 1))
        data = rng.normal(0.0, std, size=np.shape(data))
    return Tensor(data, requires_grad=True)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class _TapeEntry:
    __slots__ = ("name", "inputs", "output", "backward")

    def __init__(self, name, inputs, output, backward):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward


_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed primitives for reverse-order replay.

    Use as a context manager around forward computation, then call
    ``backward(loss)``. Replay visits each recorded operation exactly once,
    in reverse execution order, so gradient accumulation is deterministic.
    """

    def __init__(self):
        self._entries: list[_TapeEntry] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self, "tape stack corrupted"

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, name: str, inputs: Sequence[Tensor], output: Tensor,
               backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> None:
        self._entries.append(_TapeEntry(name, tuple(inputs), output, backward))

    def _replay(self, loss: Tensor) -> dict[int, np.ndarray]:
        if loss.data.size != 1:
            raise ShapeMismatchError(
                f"backward requires a scalar loss, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for entry in reversed(self._entries):
            g_out = grads.pop(id(entry.output), None)
            if g_out is None:
                continue
            in_grads = entry.backward(g_out)
            if len(in_grads) != len(entry.inputs):
                raise RuntimeError(f"{entry.name}: backward arity mismatch")
            for tensor, gi in zip(entry.inputs, in_grads):
                if gi is None or not tensor.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=np.float64)
                acc = grads.get(id(tensor))
                if acc is None:
                    grads[id(tensor)] = gi.copy()
                else:
                    acc += gi
        return grads

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``grad`` for every leaf on the path."""
        grads = self._replay(loss)
        produced = {id(e.output) for e in self._entries}
        committed: set[int] = set()
        for entry in self._entries:
            for tensor in entry.inputs:
                key = id(tensor)
                if (key in produced or key in committed
                        or not tensor.requires_grad or key not in grads):
                    continue
                gi = grads[key].reshape(tensor.data.shape)
                if tensor.grad is None:
                    tensor.grad = gi.copy()
                else:
                    tensor.grad += gi
                committed.add(key)
        self._entries.clear()

    def gradients(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of ``loss`` for each tensor in ``wrt``, without writing
        to any ``grad`` buffer (safe when tensors are shared across threads)."""
        grads = self._replay(loss)
        out = []
        for tensor in wrt:
            gi = grads.get(id(tensor))
            if gi is None:
                out.append(np.zeros_like(tensor.data))
            else:
                out.append(gi.reshape(tensor.data.shape))
        self._entries.clear()
        return out


def _record(name: str, inputs: Sequence, output: Tensor, backward) -> Tensor:
    tape = _active_tape()
    if tape is not None and output.requires_grad:
        tape.record(name, inputs, output, backward)
    return output


def _requires(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise and broadcast arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, requires_grad=_requires(a, b))

    def backward(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _record("add", (a, b), out, backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data, requires_grad=_requires(a, b))

    def backward(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    return _record("sub", (a, b), out, backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, requires_grad=_requires(a, b))

    def backward(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _record("mul", (a, b), out, backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data, requires_grad=_requires(a, b))

    def backward(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _record("div", (a, b), out, backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data, requires_grad=a.requires_grad)

    def backward(g):
        return (-g,)

    return _record("neg", (a,), out, backward)


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar constant (no gradient w.r.t. ``c``)."""
    a = as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c, requires_grad=a.requires_grad)

    def backward(g):
        return (g * c,)

    return _record("scale", (a,), out, backward)


def elu(a) -> Tensor:
    """Exponential linear unit: x for x > 0, exp(x) - 1 otherwise."""
    a = as_tensor(a)
    pos = a.data > 0
    value = np.where(pos, a.data, np.expm1(a.data))
    out = Tensor(value, requires_grad=a.requires_grad)

    def backward(g):
        return (g * np.where(pos, 1.0, value + 1.0),)

    return _record("elu", (a,), out, backward)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.abs(a.data), requires_grad=a.requires_grad)

    def backward(g):
        return (g * np.sign(a.data),)

    return _record("abs", (a,), out, backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    value = np.sqrt(a.data)
    out = Tensor(value, requires_grad=a.requires_grad)

    def backward(g):
        return (g * 0.5 / value,)

    return _record("sqrt", (a,), out, backward)


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(
            f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatchError(
            f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data, requires_grad=_requires(a, b))

    def backward(g):
        return (g @ b.data.T, a.data.T @ g)

    return _record("matmul", (a, b), out, backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatchError(f"transpose expects a matrix, got {a.data.shape}")
    out = Tensor(a.data.T.copy(), requires_grad=a.requires_grad)

    def backward(g):
        return (g.T,)

    return _record("transpose", (a,), out, backward)


def outer(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or b.ndim != 1:
        raise ShapeMismatchError(
            f"outer expects vectors, got {a.data.shape} and {b.data.shape}")
    out = Tensor(np.outer(a.data, b.data), requires_grad=_requires(a, b))

    def backward(g):
        return (g @ b.data, g.T @ a.data)

    return _record("outer", (a, b), out, backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape), requires_grad=a.requires_grad)

    def backward(g):
        return (g.reshape(a.data.shape),)

    return _record("reshape", (a,), out, backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis),
                 requires_grad=any(p.requires_grad for p in parts))
    sizes = np.cumsum([p.data.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record("concat", parts, out, backward)


def gather_rows(a, indices) -> Tensor:
    """Select rows of a matrix; backward scatter-adds into the source."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(a.data[idx], requires_grad=a.requires_grad)

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        return (buf,)

    return _record("gather_rows", (a,), out, backward)


def tsum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims),
                 requires_grad=a.requires_grad)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _record("sum", (a,), out, backward)


def tmean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims),
                 requires_grad=a.requires_grad)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return _record("mean", (a,), out, backward)


def set_mean(a) -> Tensor:
    """Mean over rows with a canonical summation order.

    Rows are summed in lexicographic order so that the result is
    bit-identical for any permutation of the input rows; used where exact
    permutation invariance of a set representation is part of the contract.
    """
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatchError(f"set_mean expects a matrix, got {a.data.shape}")
    n = a.data.shape[0]
    order = np.lexsort(a.data.T[::-1])
    value = np.add.reduce(a.data[order], axis=0) / n
    out = Tensor(value, requires_grad=a.requires_grad)

    def backward(g):
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return _record("set_mean", (a,), out, backward)


# ---------------------------------------------------------------------------
# Softmax family


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not np.isfinite(a.data).all():
        raise NonFiniteError("softmax received non-finite logits")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p, requires_grad=a.requires_grad)

    def backward(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - inner),)

    return _record("softmax", (a,), out, backward)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Summed cross-entropy of row-wise softmax against integer labels.

    Returns a scalar tensor equal to sum_i [logsumexp(z_i) - z_i[y_i]];
    the caller divides by the query count if a mean is wanted.
    """
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2:
        raise ShapeMismatchError(
            f"cross-entropy expects (n, classes) logits, got {logits.data.shape}")
    if y.shape != (logits.data.shape[0],):
        raise ShapeMismatchError(
            f"labels shape {y.shape} does not match {logits.data.shape[0]} rows")
    if not np.isfinite(logits.data).all():
        raise NonFiniteError("cross-entropy received non-finite logits")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    loss = float((lse - z[np.arange(z.shape[0]), y]).sum())
    out = Tensor(loss, requires_grad=logits.requires_grad)

    def backward(g):
        p = np.exp(z - zmax)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(z.shape[0]), y] -= 1.0
        return (float(g) * p,)

    return _record("softmax_cross_entropy", (logits,), out, backward)


# ---------------------------------------------------------------------------
# SPD solve

_JITTER_BASE = 1e-10
_JITTER_RETRIES = 5


def _cholesky_with_jitter(a: np.ndarray):
    """Factor a symmetric matrix, escalating a diagonal jitter on failure."""
    d = a.shape[0]
    trace_scale = np.trace(a) / d
    base = _JITTER_BASE * (trace_scale if trace_scale > 0 else 1.0)
    attempted = []
    jitter = 0.0
    for attempt in range(_JITTER_RETRIES + 1):
        attempted.append(jitter)
        target = a if jitter == 0.0 else a + jitter * np.eye(d)
        try:
            return np.linalg.cholesky(target), jitter
        except np.linalg.LinAlgError:
            jitter = base * (10.0 ** attempt)
    raise SPDFactorizationError(
        f"matrix of size {d}x{d} is not positive definite", attempted)


def cholesky_factor(a: np.ndarray) -> np.ndarray:
    """Lower-triangular Cholesky factor of a symmetric matrix (value-level)."""
    sym = 0.5 * (a + a.T)
    chol, _ = _cholesky_with_jitter(sym)
    return chol


def _chol_solve(chol: np.ndarray, b: np.ndarray) -> np.ndarray:
    y = scipy.linalg.solve_triangular(chol, b, lower=True, check_finite=False)
    return scipy.linalg.solve_triangular(chol.T, y, lower=False, check_finite=False)


def spd_solve(a, b) -> Tensor:
    """Solve A X = B for symmetric positive definite A without forming A^-1.

    A is symmetrized before factorization, so the gradient w.r.t. A is the
    symmetrized closed form -(A^-1 G X^T + X G^T A^-1)/2, computed with one
    extra triangular solve rather than by differentiating the factorization.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or a.data.shape[0] != a.data.shape[1]:
        raise ShapeMismatchError(f"spd_solve expects a square matrix, got {a.data.shape}")
    vector_rhs = b.ndim == 1
    b_mat = b.data[:, None] if vector_rhs else b.data
    if b_mat.ndim != 2 or b_mat.shape[0] != a.data.shape[0]:
        raise ShapeMismatchError(
            f"spd_solve right-hand side {b.data.shape} does not match {a.data.shape}")
    if not np.isfinite(a.data).all() or not np.isfinite(b.data).all():
        raise NonFiniteError("spd_solve received non-finite input")
    # Tolerance admits finite-difference probes of single entries (~1e-5)
    # while rejecting grossly asymmetric matrices; the solve always acts on
    # the symmetrized value, so small asymmetry only shifts the probe point.
    scale_ref = np.abs(a.data).max()
    if np.abs(a.data - a.data.T).max() > 1e-4 * (1.0 + scale_ref):
        raise ShapeMismatchError("spd_solve requires a symmetric matrix")
    sym = 0.5 * (a.data + a.data.T)
    chol, _ = _cholesky_with_jitter(sym)
    x_mat = _chol_solve(chol, b_mat)
    out_data = x_mat[:, 0] if vector_rhs else x_mat
    out = Tensor(out_data, requires_grad=_requires(a, b))

    def backward(g):
        g_mat = g[:, None] if vector_rhs else g
        w = _chol_solve(chol, g_mat)
        grad_a = -0.5 * (w @ x_mat.T + x_mat @ w.T)
        grad_b = w[:, 0] if vector_rhs else w
        return (grad_a, grad_b)

    return _record("spd_solve", (a, b), out, backward)


# ---------------------------------------------------------------------------
# Gradient verification


def finite_difference_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                            step: float = 1e-5, floor: float = 1e-6) -> float:
    """Compare reverse-mode gradients against central differences.

    ``loss_fn`` rebuilds the scalar loss from the current parameter values.
    Returns the worst relative error over every coordinate of ``params``,
    with relative error |ad - fd| / max(|ad|, |fd|, floor).
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
        if not np.isfinite(loss.data).all():
            raise NonFiniteError("loss is non-finite at the linearization point")
        tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    worst = 0.0
    for p, ad in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
            fd = (up - down) / (2.0 * step)
            a = ad.reshape(-1)[i]
            err = abs(a - fd) / max(abs(a), abs(fd), floor)
            if err > worst:
                worst = err
    return worst
