"""Dense float64 tensors with a reverse-mode gradient tape.

Every op validates shapes at its boundary; the only implicit broadcast allowed
anywhere is adding a vector bias over the last axis. Ops record onto the
thread-local active ``Tape`` only when an input requires grad, so inference
code pays no recording cost. Tensors are treated as immutable while a tape
that references them is alive; only ``grad`` accumulates.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the only randomness source in the package."""
    return np.random.Generator(np.random.PCG64(seed))


class Tensor:
    """A dense float64 array, optionally participating in gradient taping.

    ``grad`` is lazily allocated and accumulates across backward passes until
    cleared by the owner.
    """

    __slots__ = ("data", "requires_grad", "grad", "_leaf")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return self.__mul__(other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


# One active tape per thread; independent tapes may run in parallel threads.
_STATE = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_STATE, "tape", None)


class Tape:
    """Ordered record of executed differentiable ops (a Wengert list).

    Ops are appended in execution order, so the list is already topologically
    sorted; ``backward`` replays it once in reverse.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a Tape is already active in this thread")
        _STATE.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _STATE.tape = None

    def __len__(self) -> int:
        return len(self._nodes)


@contextmanager
def pause_tape():
    """Suspend recording, e.g. for frozen-teacher forward passes."""
    prev = _active_tape()
    _STATE.tape = None
    try:
        yield
    finally:
        _STATE.tape = prev


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    Leaf gradients accumulate (sum) across calls; intermediate gradients live
    only in per-call scratch so repeated backward passes scale leaf grads
    exactly linearly.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    scratch: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, backward_fn in reversed(tape._nodes):
        g = scratch.pop(id(out), None)
        if g is None:
            continue
        for t, contrib in zip(inputs, backward_fn(g)):
            if contrib is None or not t.requires_grad:
                continue
            if t._leaf:
                t.grad = contrib.copy() if t.grad is None else t.grad + contrib
            else:
                key = id(t)
                prev = scratch.get(key)
                # never mutate stored arrays in place: contributions may alias g
                scratch[key] = contrib if prev is None else prev + contrib


def check_finite(arr: np.ndarray, op: str) -> None:
    # NaN/Inf propagate through the sum; cheaper than isfinite over the array
    if not math.isfinite(float(np.sum(arr))):
        raise NonFiniteError(f"{op} produced non-finite values")


_check_finite = check_finite


def _result(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._leaf = False
        tape._nodes.append((out, inputs, backward_fn))
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a vector bias added over the last axis."""
    if a.shape == b.shape:
        def back(g):
            return g, g
        return _result("add", a.data + b.data, (a, b), back)
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        def back(g):
            return g, g.reshape(-1, b.shape[0]).sum(axis=0)
        return _result("add", a.data + b.data, (a, b), back)
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        return g, -g

    return _result("sub", a.data - b.data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    def back(g):
        return (-g,)

    return _result("neg", -a.data, (a,), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        return g * b.data, g * a.data

    return _result("mul", a.data * b.data, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    def back(g):
        return (g * c,)

    return _result("scale", a.data * c, (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over 1-D/2-D operands with numpy's vector semantics."""
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeError(f"matmul: only 1-D/2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents disagree, {a.shape} x {b.shape}")
    a2 = a.data if a.data.ndim == 2 else a.data.reshape(1, -1)
    b2 = b.data if b.data.ndim == 2 else b.data.reshape(-1, 1)
    out = a2 @ b2
    if a.data.ndim == 1:
        out = out.reshape(out.shape[1:]) if b.data.ndim == 2 else out.reshape(())
    elif b.data.ndim == 1:
        out = out.reshape(out.shape[:1])

    def back(g):
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        da = (g2 @ b2.T).reshape(a.data.shape)
        db = (a2.T @ g2).reshape(b.data.shape)
        return da, db

    return _result("matmul", out, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: need a matrix, got {a.shape}")

    def back(g):
        return (g.T,)

    return _result("transpose", a.data.T, (a,), back)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    def back(g):
        return (g.reshape(a.data.shape),)

    return _result("reshape", a.data.reshape(shape), (a,), back)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat: empty input list")
    out = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([p.data.shape[axis] for p in parts])[:-1]

    def back(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _result("concat", out, tuple(parts), back)


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous range along one axis (a copying slice)."""
    if not (0 <= start <= stop <= a.shape[axis]):
        raise ShapeError(f"narrow: range [{start}:{stop}] outside extent {a.shape[axis]}")
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def back(g):
        da = np.zeros_like(a.data)
        da[index] = g
        return (da,)

    return _result("narrow", a.data[index].copy(), (a,), back)


def sum_all(a: Tensor) -> Tensor:
    def back(g):
        return (np.full_like(a.data, float(g)),)

    return _result("sum_all", np.sum(a.data), (a,), back)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def back(g):
        return (np.full_like(a.data, float(g) / n),)

    return _result("mean_all", np.sum(a.data) / n, (a,), back)


def mean_tensors(parts: Sequence[Tensor]) -> Tensor:
    """Mean of same-shape tensors (batch reduction helper)."""
    total = parts[0]
    for p in parts[1:]:
        total = add(total, p)
    return scale(total, 1.0 / len(parts))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient at 0 is 0

    def back(g):
        return (g * mask,)

    return _result("relu", np.maximum(a.data, 0.0), (a,), back)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def back(g):
        return (g * (1.0 - y * y),)

    return _result("tanh", y, (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
    y = np.where(a.data >= 0, y, 1.0 - y)  # stable for large |x|

    def back(g):
        return (g * y * (1.0 - y),)

    return _result("sigmoid", y, (a,), back)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Exponentiate-and-normalize along ``axis`` with max subtraction."""
    if not (-a.data.ndim <= axis < a.data.ndim):
        raise ShapeError(f"softmax: axis {axis} out of range for shape {a.shape}")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def back(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _result("softmax", y, (a,), back)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not (-a.data.ndim <= axis < a.data.ndim):
        raise ShapeError(f"log_softmax: axis {axis} out of range for shape {a.shape}")
    mx = np.max(a.data, axis=axis, keepdims=True)
    shifted = a.data - mx
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse

    def back(g):
        p = np.exp(out)
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _result("log_softmax", out, (a,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance over the last axis, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} must match last axis ({d},)")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        gx = g * gain.data
        dx = inv * (gx - np.mean(gx, axis=-1, keepdims=True)
                    - xhat * np.mean(gx * xhat, axis=-1, keepdims=True))
        dgain = np.sum((g * xhat).reshape(-1, d), axis=0)
        dbias = np.sum(g.reshape(-1, d), axis=0)
        return dx, dgain, dbias

    return _result("layer_norm", out, (x, gain, bias), back)


def masked_fill(a: Tensor, allowed: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``allowed`` is False with ``value``."""
    allowed = np.asarray(allowed, dtype=bool)
    if allowed.shape != a.shape:
        raise ShapeError(f"masked_fill: mask {allowed.shape} must match {a.shape}")

    def back(g):
        return (g * allowed,)

    return _result("masked_fill", np.where(allowed, a.data, value), (a,), back)


def gather_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Row gather; the gradient scatter-adds into the gathered rows."""
    idx = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got {table.shape}")
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError("gather_rows: ids must be a non-empty 1-D sequence")
    if idx.min() < 0 or idx.max() >= table.shape[0]:
        raise IndexError(f"gather_rows: id out of range for table with {table.shape[0]} rows")

    def back(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, idx, g)
        return (dt,)

    return _result("gather_rows", table.data[idx], (table,), back)


def cross_entropy(logits: Tensor, targets: Sequence[int], ignore_id: int | None = None) -> Tensor:
    """Mean over positions of -log softmax(logits)[t, target_t].

    Positions whose target equals ``ignore_id`` are excluded from the mean and
    receive zero gradient.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be [T x V], got {logits.shape}")
    idx = np.asarray(targets, dtype=np.int64)
    n_pos, vocab = logits.shape
    if idx.shape != (n_pos,):
        raise ShapeError(f"cross_entropy: {n_pos} logit rows vs {idx.shape} targets")
    keep = np.ones(n_pos, dtype=bool) if ignore_id is None else idx != ignore_id
    if not keep.any():
        raise ValueError("cross_entropy: every position is ignored")
    checked = idx[keep]
    if checked.min() < 0 or checked.max() >= vocab:
        raise IndexError(f"cross_entropy: target id out of range for vocab {vocab}")
    n_kept = int(keep.sum())

    mx = np.max(logits.data, axis=-1, keepdims=True)
    shifted = logits.data - mx
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    log_probs = shifted - lse
    safe_idx = np.where(keep, idx, 0)
    picked = log_probs[np.arange(n_pos), safe_idx]
    loss = -np.sum(picked[keep]) / n_kept

    def back(g):
        d = np.exp(log_probs)
        d[np.arange(n_pos), safe_idx] -= 1.0
        d *= keep[:, None]
        return (d * (float(g) / n_kept),)

    return _result("cross_entropy", np.asarray(loss), (logits,), back)
