"""Minimal dense-fp64 reverse-mode automatic differentiation.

Everything is a rank-2 matrix: vectors are 1 x D rows, scalars are 1 x 1.
Operations run as plain numpy when no tape is active; inside a ``with Tape()``
block they additionally push a backward closure whenever an input requires
gradients. ``Tape.backward`` replays the closures once, newest first, which is
a valid reverse topological order because nodes are appended as they are
created.

Broadcasting is deliberately narrow: for add / sub / elementwise_mul the
right-hand operand may be a single row broadcast over the left operand's rows
(bias-over-matrix), nothing else.

A tensor holding a scipy CSR matrix is allowed as a gradient-free constant
operand on the left side of matmul; this keeps large graph-adjacency products
sparse without widening the primitive set.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .errors import NonFiniteValue, NotScalar, ShapeMismatch

LEAKY_RELU_SLOPE = 0.01

_local = threading.local()
_checked = False


def set_checked(on: bool) -> None:
    """Toggle per-op finiteness validation (slow; intended for tests)."""
    global _checked
    _checked = on


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A (rows, cols) fp64 value, optionally participating in gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        if sp.issparse(data):
            if requires_grad:
                raise ShapeMismatch("sparse tensors must be gradient-free constants")
            self.data = data.tocsr()
        else:
            arr = np.asarray(data, dtype=np.float64)
            if arr.ndim == 0:
                arr = arr.reshape(1, 1)
            elif arr.ndim == 1:
                arr = arr.reshape(1, -1)
            elif arr.ndim != 2:
                raise ShapeMismatch(f"rank {arr.ndim} tensor not supported")
            self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def value(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise NotScalar(f"item() on shape {self.data.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _accumulate(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    """Add g into t.grad. own=True donates g (caller guarantees no other
    tensor will be handed the same buffer); otherwise the first touch copies."""
    if t.grad is None:
        t.grad = g if own else g.copy()
    else:
        t.grad += g


class Tape:
    """Append-only record of differentiable operations.

    Nodes are (output tensor, backward closure) pairs. The closure receives
    d(loss)/d(output) and accumulates into the ``grad`` of each input that
    requires it.
    """

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_stack().pop()

    def record(self, out: Tensor, back: Callable[[np.ndarray], None]) -> None:
        self.nodes.append((out, back))

    def backward(self, loss: Tensor, params: Sequence[Tensor] = ()) -> None:
        """Accumulate d(loss)/dt into t.grad for every reachable tensor.

        Parameters listed in ``params`` that the loss never touched end up
        with explicit zero gradients instead of None.
        """
        if loss.shape != (1, 1):
            raise NotScalar(f"loss must be 1x1, got {loss.shape}")
        _accumulate(loss, np.ones((1, 1)))
        for out, back in reversed(self.nodes):
            if out.grad is not None:
                back(out.grad)
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor] = ()) -> None:
    tape.backward(loss, params)


def _finish(out_data: np.ndarray, back_builder, *inputs: Tensor) -> Tensor:
    """Wrap an op result, recording a backward closure if gradients flow."""
    if _checked and not np.isfinite(out_data).all():
        raise NonFiniteValue("non-finite value produced")
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor.__new__(Tensor)
        out.data = out_data
        out.requires_grad = True
        out.grad = None
        tape.record(out, back_builder(out))
        return out
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.grad = None
    return out


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    out_data = a.data @ b.data
    if sp.issparse(out_data):  # sparse @ sparse is never wanted here
        out_data = np.asarray(out_data.todense())

    def build(out):
        a_sparse = sp.issparse(a.data)

        def back(g):
            if a.requires_grad:
                _accumulate(a, g @ b.data.T, own=True)
            if b.requires_grad:
                if a_sparse:
                    _accumulate(b, np.asarray(a.data.T @ g), own=True)
                else:
                    _accumulate(b, a.data.T @ g, own=True)

        return back

    return _finish(out_data, build, a, b)


def _check_addlike(a: Tensor, b: Tensor, op: str) -> bool:
    """Validate shapes; returns True when b is a broadcast row."""
    if a.shape == b.shape:
        return False
    if b.shape == (1, a.shape[1]):
        return True
    raise ShapeMismatch(f"{op} {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    b_row = _check_addlike(a, b, "add")
    out_data = a.data + b.data

    def build(out):
        def back(g):
            # g may be donated to at most one of the two inputs
            if a.requires_grad:
                _accumulate(a, g, own=not b.requires_grad)
            if b.requires_grad:
                if b_row:
                    _accumulate(b, g.sum(axis=0, keepdims=True), own=True)
                else:
                    _accumulate(b, g, own=not a.requires_grad)

        return back

    return _finish(out_data, build, a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    b_row = _check_addlike(a, b, "sub")
    out_data = a.data - b.data

    def build(out):
        def back(g):
            if a.requires_grad:
                _accumulate(a, g, own=not b.requires_grad)
            if b.requires_grad:
                _accumulate(b, -g.sum(axis=0, keepdims=True) if b_row else -g,
                            own=True)

        return back

    return _finish(out_data, build, a, b)


def scalar_mul(c: float, a: Tensor) -> Tensor:
    c = float(c)
    out_data = c * a.data

    def build(out):
        def back(g):
            if a.requires_grad:
                _accumulate(a, c * g, own=True)

        return back

    return _finish(out_data, build, a)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    b_row = _check_addlike(a, b, "elementwise_mul")
    out_data = a.data * b.data

    def build(out):
        def back(g):
            if a.requires_grad:
                _accumulate(a, g * b.data, own=True)
            if b.requires_grad:
                gb = g * a.data
                _accumulate(b, gb.sum(axis=0, keepdims=True) if b_row else gb,
                            own=True)

        return back

    return _finish(out_data, build, a, b)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeMismatch("concat_rows of nothing")
    cols = parts[0].shape[1]
    for p in parts:
        if p.shape[1] != cols:
            raise ShapeMismatch("concat_rows column mismatch")
    out_data = np.concatenate([p.data for p in parts], axis=0)
    parts = tuple(parts)

    def build(out):
        def back(g):
            row = 0
            for p in parts:
                n = p.shape[0]
                if p.requires_grad:
                    # disjoint row views of a dead buffer are safe to donate
                    _accumulate(p, g[row:row + n], own=True)
                row += n

        return back

    return _finish(out_data, build, *parts)


def slice_row(a: Tensor, start: int, stop: int | None = None) -> Tensor:
    if stop is None:
        stop = start + 1
    if not (0 <= start < stop <= a.shape[0]):
        raise ShapeMismatch(f"slice_row [{start}:{stop}] of {a.shape}")
    out_data = a.data[start:stop]

    def build(out):
        def back(g):
            if a.requires_grad:
                if a.grad is None:
                    a.grad = np.zeros_like(a.data)
                a.grad[start:stop] += g

        return back

    return _finish(out_data, build, a)


def mean_rows(a: Tensor) -> Tensor:
    n = a.shape[0]
    out_data = a.data.mean(axis=0, keepdims=True)

    def build(out):
        def back(g):
            if a.requires_grad:
                _accumulate(a, np.repeat(g / n, n, axis=0), own=True)

        return back

    return _finish(out_data, build, a)


def sum_rows(a: Tensor) -> Tensor:
    n = a.shape[0]
    out_data = a.data.sum(axis=0, keepdims=True)

    def build(out):
        def back(g):
            if a.requires_grad:
                _accumulate(a, np.repeat(g, n, axis=0), own=True)

        return back

    return _finish(out_data, build, a)


def inner_product(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != 1 or a.shape != b.shape:
        raise ShapeMismatch(f"inner_product {a.shape} . {b.shape}")
    out_data = np.array([[float(a.data.ravel() @ b.data.ravel())]])

    def build(out):
        def back(g):
            s = g[0, 0]
            if a.requires_grad:
                _accumulate(a, s * b.data, own=True)
            if b.requires_grad:
                _accumulate(b, s * a.data, own=True)

        return back

    return _finish(out_data, build, a, b)


def sigmoid(a: Tensor) -> Tensor:
    out_data = expit(a.data)

    def build(out):
        y = out_data

        def back(g):
            if a.requires_grad:
                _accumulate(a, g * y * (1.0 - y), own=True)

        return back

    return _finish(out_data, build, a)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def build(out):
        y = out_data

        def back(g):
            if a.requires_grad:
                _accumulate(a, g * (1.0 - y * y), own=True)

        return back

    return _finish(out_data, build, a)


def leaky_relu(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.where(x > 0, x, LEAKY_RELU_SLOPE * x)

    def build(out):
        def back(g):
            if a.requires_grad:
                _accumulate(a, g * np.where(x > 0, 1.0, LEAKY_RELU_SLOPE),
                            own=True)

        return back

    return _finish(out_data, build, a)


def softplus(a: Tensor) -> Tensor:
    x = a.data
    # log(1 + e^x) computed without overflow for large |x|
    out_data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def build(out):
        def back(g):
            if a.requires_grad:
                _accumulate(a, g * expit(x), own=True)

        return back

    return _finish(out_data, build, a)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def build(out):
        def back(g):
            if a.requires_grad:
                _accumulate(a, g / a.data, own=True)

        return back

    return _finish(out_data, build, a)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    out_data = np.clip(x, lo, hi)

    def build(out):
        # pass-through gradient inside [lo, hi], boundary points included
        mask = (x >= lo) & (x <= hi)

        def back(g):
            if a.requires_grad:
                _accumulate(a, g * mask, own=True)

        return back

    return _finish(out_data, build, a)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def zeros(rows: int, cols: int) -> Tensor:
    return Tensor(np.zeros((rows, cols)), requires_grad=False)


# ---------------------------------------------------------------------------
# numeric gradient checking
# ---------------------------------------------------------------------------

def grad_check(f, points: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Compare tape gradients of scalar-valued ``f`` against central differences.

    ``f`` takes len(points) tensors and must return a 1x1 tensor. Returns the
    maximum elementwise relative error |analytic - numeric| /
    max(|analytic|, |numeric|, 1e-8).
    """
    leaves = [Tensor(np.array(p, dtype=np.float64, copy=True), requires_grad=True)
              for p in points]
    with Tape() as tape:
        out = f(*leaves)
    tape.backward(out, params=leaves)

    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad
        numeric = np.zeros_like(leaf.data)
        flat = leaf.data.ravel()
        nflat = numeric.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(*leaves).item()
            flat[i] = orig - h
            down = f(*leaves).item()
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst
