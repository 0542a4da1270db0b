"""Tape-based reverse-mode autodiff over dense numpy arrays.

A :class:`Tape` is built fresh for every example; each operation appends one
record whose inputs are either parameters (leaf tensors) or outputs of
earlier records, so the record list is topologically ordered by
construction. :meth:`Tape.backward` walks it in reverse and accumulates into
the ``grad`` slot of every leaf that requires a gradient.

Vectors are 1-D arrays (read as column vectors), matrices are 2-D, and the
affine map is always ``W @ x + b``.
"""

from __future__ import annotations

import os
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32 if os.environ.get("SATLSTM_FLOAT32") else np.float64


class ShapeError(ValueError):
    pass


class Tensor:
    """Dense array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


def param(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


def zeros(n: int) -> Tensor:
    return Tensor(np.zeros(n, dtype=DTYPE))


class _RowGrad:
    """Sparse gradient for a single row of an embedding matrix."""

    __slots__ = ("index", "value")

    def __init__(self, index: int, value: np.ndarray):
        self.index = index
        self.value = value


class Record:
    __slots__ = ("op", "inputs", "out", "ctx")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], out: Tensor, ctx):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.ctx = ctx


# Backward rules: (record, grad_of_output) -> one gradient (or None) per input.
BACKWARD: dict[str, Callable[[Record, np.ndarray], Sequence]] = {}


def _rule(op: str):
    def register(fn):
        BACKWARD[op] = fn
        return fn

    return register


def _require_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


class Tape:
    """Append-only record of operations for one forward pass."""

    def __init__(self):
        self.records: list[Record] = []

    def __len__(self) -> int:
        return len(self.records)

    def _emit(self, op: str, inputs: tuple[Tensor, ...], value: np.ndarray, ctx=None) -> Tensor:
        out = Tensor.__new__(Tensor)
        out.data = value
        out.grad = None
        out.requires_grad = False
        out.name = None
        out._tape = self
        self.records.append(Record(op, inputs, out, ctx))
        return out

    # -- linear algebra -------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
            raise ShapeError(f"matmul: only vectors and matrices, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
        return self._emit("matmul", (a, b), a.data @ b.data)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        _require_same("add", a, b)
        return self._emit("add", (a, b), a.data + b.data)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        _require_same("sub", a, b)
        return self._emit("sub", (a, b), a.data - b.data)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        """Hadamard product."""
        _require_same("mul", a, b)
        return self._emit("mul", (a, b), a.data * b.data)

    def scale(self, a: Tensor, s: float) -> Tensor:
        return self._emit("scale", (a,), a.data * s, s)

    def add_n(self, parts: Sequence[Tensor]) -> Tensor:
        if not parts:
            raise ShapeError("add_n: empty operand list")
        for p in parts[1:]:
            _require_same("add_n", parts[0], p)
        value = parts[0].data.copy()
        for p in parts[1:]:
            value += p.data
        return self._emit("add_n", tuple(parts), value)

    def add_col(self, m: Tensor, v: Tensor) -> Tensor:
        """Add column vector ``v`` to every column of matrix ``m``."""
        if m.data.ndim != 2 or v.data.ndim != 1 or m.shape[0] != v.shape[0]:
            raise ShapeError(f"add_col: cannot add {v.shape} to columns of {m.shape}")
        return self._emit("add_col", (m, v), m.data + v.data[:, None])

    # -- pointwise nonlinearities ---------------------------------------

    def tanh(self, a: Tensor) -> Tensor:
        return self._emit("tanh", (a,), np.tanh(a.data))

    def sigmoid(self, a: Tensor) -> Tensor:
        x = a.data
        # split by sign so exp never overflows
        ex = np.exp(-np.abs(x))
        value = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
        return self._emit("sigmoid", (a,), value)

    # -- structural -----------------------------------------------------

    def concat(self, parts: Sequence[Tensor]) -> Tensor:
        if not parts:
            raise ShapeError("concat: empty part list")
        for p in parts:
            if p.data.ndim != 1:
                raise ShapeError(f"concat: parts must be vectors, got {p.shape}")
        sizes = [p.size for p in parts]
        return self._emit("concat", tuple(parts), np.concatenate([p.data for p in parts]), sizes)

    def slice(self, a: Tensor, start: int, stop: int) -> Tensor:
        if a.data.ndim != 1 or not 0 <= start < stop <= a.size:
            raise ShapeError(f"slice: [{start}:{stop}] out of range for {a.shape}")
        return self._emit("slice", (a,), a.data[start:stop], (start, stop))

    def stack_cols(self, vectors: Sequence[Tensor]) -> Tensor:
        """Stack equal-length vectors as the columns of a matrix."""
        if not vectors:
            raise ShapeError("stack_cols: empty operand list")
        for v in vectors:
            if v.data.ndim != 1 or v.shape != vectors[0].shape:
                raise ShapeError(f"stack_cols: expected vectors of {vectors[0].shape}, got {v.shape}")
        return self._emit("stack_cols", tuple(vectors), np.stack([v.data for v in vectors], axis=1))

    def row(self, table: Tensor, index: int) -> Tensor:
        """Embedding lookup; the gradient flows back sparsely."""
        if table.data.ndim != 2 or not 0 <= index < table.shape[0]:
            raise ShapeError(f"row: index {index} out of range for {table.shape}")
        return self._emit("row", (table,), table.data[index].copy(), index)

    # -- reductions and losses ------------------------------------------

    def sum(self, a: Tensor) -> Tensor:
        return self._emit("sum", (a,), np.asarray(a.data.sum()))

    def dot(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim != 1:
            raise ShapeError(f"dot: expected vectors, got {a.shape}")
        _require_same("dot", a, b)
        return self._emit("matmul", (a, b), np.asarray(a.data @ b.data))

    def sum_squares(self, a: Tensor) -> Tensor:
        return self._emit("sum_squares", (a,), np.asarray(np.sum(a.data * a.data)))

    def softmax(self, scores: Tensor) -> Tensor:
        if scores.data.ndim != 1 or scores.size == 0:
            raise ShapeError(f"softmax: expected a nonempty vector, got {scores.shape}")
        z = np.exp(scores.data - scores.data.max())
        return self._emit("softmax", (scores,), z / z.sum())

    def cross_entropy(self, logits: Tensor, gold: int, floor: float = 1e-30) -> Tensor:
        """``-log(softmax(logits)[gold])`` computed in log space, capped at ``-log(floor)``."""
        if logits.data.ndim != 1 or not 0 <= gold < logits.size:
            raise ShapeError(f"cross_entropy: gold {gold} out of range for {logits.shape}")
        x = logits.data
        shifted = x - x.max()
        log_z = np.log(np.exp(shifted).sum())
        nll = log_z - shifted[gold]
        cap = -np.log(floor)
        capped = nll > cap
        value = np.asarray(min(nll, cap), dtype=x.dtype)
        return self._emit("cross_entropy", (logits,), value, (gold, np.exp(shifted - log_z), capped))

    # -- reverse pass ---------------------------------------------------

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every leaf's ``grad`` slot.

        Repeated calls accumulate; intermediate gradients are local to the call.
        """
        if loss._tape is not self:
            raise ValueError("backward: loss was not produced by this tape")
        if loss.size != 1:
            raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = BACKWARD[rec.op](rec, g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None:
                    continue
                if t._tape is self:
                    if isinstance(gi, _RowGrad):
                        gi = _densify(gi, t.shape)
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
                elif t.requires_grad:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    if isinstance(gi, _RowGrad):
                        t.grad[gi.index] += gi.value
                    else:
                        t.grad += gi


def _densify(rg: _RowGrad, shape) -> np.ndarray:
    dense = np.zeros(shape, dtype=rg.value.dtype)
    dense[rg.index] = rg.value
    return dense


@_rule("matmul")
def _matmul_back(rec, g):
    a, b = (t.data for t in rec.inputs)
    if a.ndim == 2 and b.ndim == 2:
        return g @ b.T, a.T @ g
    if a.ndim == 2:  # matrix @ vector
        return np.outer(g, b), a.T @ g
    if b.ndim == 2:  # vector @ matrix
        return b @ g, np.outer(a, g)
    return g * b, g * a  # vector . vector


@_rule("add")
def _add_back(rec, g):
    return g, g


@_rule("sub")
def _sub_back(rec, g):
    return g, -g


@_rule("mul")
def _mul_back(rec, g):
    a, b = rec.inputs
    return g * b.data, g * a.data


@_rule("scale")
def _scale_back(rec, g):
    return (g * rec.ctx,)


@_rule("add_n")
def _add_n_back(rec, g):
    return [g] * len(rec.inputs)


@_rule("add_col")
def _add_col_back(rec, g):
    return g, g.sum(axis=1)


@_rule("tanh")
def _tanh_back(rec, g):
    y = rec.out.data
    return (g * (1.0 - y * y),)


@_rule("sigmoid")
def _sigmoid_back(rec, g):
    y = rec.out.data
    return (g * y * (1.0 - y),)


@_rule("concat")
def _concat_back(rec, g):
    return np.split(g, np.cumsum(rec.ctx)[:-1])


@_rule("slice")
def _slice_back(rec, g):
    start, stop = rec.ctx
    full = np.zeros(rec.inputs[0].shape, dtype=g.dtype)
    full[start:stop] = g
    return (full,)


@_rule("stack_cols")
def _stack_cols_back(rec, g):
    return [g[:, k] for k in range(g.shape[1])]


@_rule("row")
def _row_back(rec, g):
    return (_RowGrad(rec.ctx, g),)


@_rule("sum")
def _sum_back(rec, g):
    return (np.full(rec.inputs[0].shape, g, dtype=g.dtype),)


@_rule("sum_squares")
def _sum_squares_back(rec, g):
    return (2.0 * g * rec.inputs[0].data,)


@_rule("softmax")
def _softmax_back(rec, g):
    y = rec.out.data
    return (y * (g - np.dot(g, y)),)


@_rule("cross_entropy")
def _cross_entropy_back(rec, g):
    gold, probs, capped = rec.ctx
    if capped:
        return (None,)
    d = probs.copy()
    d[gold] -= 1.0
    return (g * d,)


def numeric_grad(f: Callable[[], float], t: Tensor, step: float = 1e-5, index=None) -> np.ndarray:
    """Central finite-difference gradient of ``f`` w.r.t. ``t`` (in place perturbation).

    ``index`` restricts the check to a subset of flat coordinates; the other
    entries of the returned array are left at zero.
    """
    flat = t.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    coords = range(flat.size) if index is None else index
    for k in coords:
        orig = flat[k]
        flat[k] = orig + step
        fp = f()
        flat[k] = orig - step
        fm = f()
        flat[k] = orig
        out[k] = (fp - fm) / (2.0 * step)
    return out.reshape(t.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, 1e-8)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
