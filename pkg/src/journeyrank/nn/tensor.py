"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: rank-0/1/2 arrays, a flat operation tape,
and exactly the operators the ranking model needs (dense layers, stable
logistic primitives, per-search segment reductions). Recording happens only
while a :class:`Tape` is active and at least one operand requires a
gradient, so inference-mode forward passes carry no bookkeeping cost.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError, ShapeError

_ACTIVE_TAPE: "Tape | None" = None


class Tensor:
    """A dense float64 array plus an optional accumulated gradient."""

    __slots__ = ("values", "grad", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"tensors are rank 0..2, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ShapeError("input tensor contains NaN or Inf")
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, values: np.ndarray) -> "Tensor":
        # Internal results skip the finiteness check; divergence is caught
        # where losses are consumed.
        out = cls.__new__(cls)
        out.values = values
        out.grad = None
        out.requires_grad = False
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def clear_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Arithmetic sugar. Python scalars are treated as constants.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return total_sum(self)

    def mean(self):
        return total_mean(self)


class _Node:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...],
                 backward_fn: Callable[[np.ndarray], None]):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations for one backward pass.

    Use as a context manager; nesting is rejected because a training run
    owns exactly one live tape at a time.
    """

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def __len__(self) -> int:
        return len(self._nodes)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE


def _record(out: Tensor, inputs: tuple[Tensor, ...],
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    tape = _ACTIVE_TAPE
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._nodes.append(_Node(out, inputs, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate d(loss)/d(x) to every tensor on the tape.

    ``loss`` must be a scalar. Tensors that require a gradient but sit on
    no path to the loss end up with an exact-zero gradient rather than
    ``None``, so downstream consumers can treat them uniformly.
    """
    if loss.values.shape != ():
        raise ContractError(f"loss must be a scalar, got shape {loss.values.shape}")
    loss._accumulate(np.ones((), dtype=np.float64))
    for node in reversed(tape._nodes):
        g = node.output.grad
        if g is None:
            continue
        node.backward_fn(g)
    for node in tape._nodes:
        for t in node.inputs:
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.values)


def stop_gradient(t: Tensor) -> Tensor:
    """Identical values, but the backward pass treats it as a constant."""
    return Tensor._wrap(t.values)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.values.shape != b.values.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out = Tensor._wrap(a.values + b.values)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _record(out, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    out = Tensor._wrap(a.values - b.values)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _record(out, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    out = Tensor._wrap(a.values * b.values)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g * b.values)
        if b.requires_grad:
            b._accumulate(g * a.values)

    return _record(out, (a, b), backward_fn)


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor._wrap(a.values * c)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g * c)

    return _record(out, (a,), backward_fn)


def shift(a: Tensor, c: float) -> Tensor:
    out = Tensor._wrap(a.values + c)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g)

    return _record(out, (a,), backward_fn)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError("matmul expects rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = Tensor._wrap(a.values @ b.values)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g @ b.values.T)
        if b.requires_grad:
            b._accumulate(a.values.T @ g)

    return _record(out, (a, b), backward_fn)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast bias: x[m, n] + b[n]."""
    if x.values.ndim != 2 or b.values.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: {x.shape} + {b.shape}")
    out = Tensor._wrap(x.values + b.values)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return _record(out, (x, b), backward_fn)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    """Column-wise concatenation of two [m, ·] matrices."""
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: {a.shape} vs {b.shape}")
    na = a.shape[1]
    out = Tensor._wrap(np.concatenate([a.values, b.values], axis=1))

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g[:, :na])
        if b.requires_grad:
            b._accumulate(g[:, na:])

    return _record(out, (a, b), backward_fn)


def column(x: Tensor, j: int) -> Tensor:
    """Extract column j of a matrix as a vector."""
    if x.values.ndim != 2:
        raise ShapeError("column expects a rank-2 tensor")
    if not 0 <= j < x.shape[1]:
        raise ShapeError(f"column {j} out of range for shape {x.shape}")
    out = Tensor._wrap(x.values[:, j].copy())

    def backward_fn(g):
        if x.requires_grad:
            gx = np.zeros_like(x.values)
            gx[:, j] = g
            x._accumulate(gx)

    return _record(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x: Tensor) -> Tensor:
    out = Tensor._wrap(np.maximum(x.values, 0.0))

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * (x.values > 0.0))

    return _record(out, (x,), backward_fn)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.values)
    out = Tensor._wrap(t)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * (1.0 - t * t))

    return _record(out, (x,), backward_fn)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Piecewise form avoids overflow in exp for large |x|.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.values)
    out = Tensor._wrap(s)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * s * (1.0 - s))

    return _record(out, (x,), backward_fn)


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) = -log(1 + exp(-x)), stable for |x| up to 1e3 and beyond."""
    out = Tensor._wrap(-np.logaddexp(0.0, -x.values))

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * _sigmoid(-x.values))

    return _record(out, (x,), backward_fn)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), the positive-constrained link used for coefficients."""
    out = Tensor._wrap(np.logaddexp(0.0, x.values))

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * _sigmoid(x.values))

    return _record(out, (x,), backward_fn)


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.values)
    out = Tensor._wrap(e)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * e)

    return _record(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# gather / segment reductions (ranking losses operate per search segment)


def _as_index(idx) -> np.ndarray:
    out = np.asarray(idx, dtype=np.int64)
    if out.ndim != 1:
        raise ShapeError("index arrays must be one-dimensional")
    return out


def gather(x: Tensor, idx) -> Tensor:
    """Pick elements of a vector: out[i] = x[idx[i]]."""
    if x.values.ndim != 1:
        raise ShapeError("gather expects a rank-1 tensor")
    idx = _as_index(idx)
    out = Tensor._wrap(x.values[idx])

    def backward_fn(g):
        if x.requires_grad:
            gx = np.zeros_like(x.values)
            np.add.at(gx, idx, g)
            x._accumulate(gx)

    return _record(out, (x,), backward_fn)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Pick rows of a matrix: out[i, :] = x[idx[i], :]."""
    if x.values.ndim != 2:
        raise ShapeError("gather_rows expects a rank-2 tensor")
    idx = _as_index(idx)
    out = Tensor._wrap(x.values[idx])

    def backward_fn(g):
        if x.requires_grad:
            gx = np.zeros_like(x.values)
            np.add.at(gx, idx, g)
            x._accumulate(gx)

    return _record(out, (x,), backward_fn)


def _segment_starts(seg: np.ndarray, n_segments: int) -> np.ndarray:
    if seg.ndim != 1:
        raise ShapeError("segment ids must be one-dimensional")
    if seg.size == 0:
        raise ContractError("segment reduction over an empty vector")
    if np.any(np.diff(seg) < 0):
        raise ContractError("segment ids must be sorted ascending")
    starts = np.flatnonzero(np.r_[True, seg[1:] != seg[:-1]])
    if starts.size != n_segments or seg[0] != 0 or seg[-1] != n_segments - 1:
        raise ContractError("segment ids must cover 0..n_segments-1 with no empty segment")
    return starts


def segment_sum(x: Tensor, seg, n_segments: int) -> Tensor:
    if x.values.ndim != 1:
        raise ShapeError("segment_sum expects a rank-1 tensor")
    seg = _as_index(seg)
    starts = _segment_starts(seg, n_segments)
    out = Tensor._wrap(np.add.reduceat(x.values, starts))

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g[seg])

    return _record(out, (x,), backward_fn)


def segment_logsumexp(x: Tensor, seg, n_segments: int) -> Tensor:
    """Per-segment log-sum-exp over a contiguous, sorted segment layout."""
    if x.values.ndim != 1:
        raise ShapeError("segment_logsumexp expects a rank-1 tensor")
    seg = _as_index(seg)
    starts = _segment_starts(seg, n_segments)
    seg_max = np.maximum.reduceat(x.values, starts)
    shifted = np.exp(x.values - seg_max[seg])
    lse = np.log(np.add.reduceat(shifted, starts)) + seg_max
    out = Tensor._wrap(lse)

    def backward_fn(g):
        if x.requires_grad:
            # d lse_s / d x_i = softmax weight of i within its segment
            x._accumulate(g[seg] * np.exp(x.values - lse[seg]))

    return _record(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# full reductions


def total_sum(x: Tensor) -> Tensor:
    out = Tensor._wrap(np.asarray(x.values.sum()))

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(np.full_like(x.values, float(g)))

    return _record(out, (x,), backward_fn)


def total_mean(x: Tensor) -> Tensor:
    n = x.values.size
    if n == 0:
        raise ContractError("mean of an empty tensor")
    out = Tensor._wrap(np.asarray(x.values.mean()))

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(np.full_like(x.values, float(g) / n))

    return _record(out, (x,), backward_fn)


def constant(values) -> Tensor:
    """A tensor that never requires a gradient (labels, masks, raw features)."""
    return Tensor(values, requires_grad=False)
