"""
Tape-based reverse-mode differentiation over numpy arrays.

Every differentiable operation in the package is a function that takes
`Tensor` inputs, computes its output with numpy and, when a `Tape` is active
and at least one input requires a gradient, appends a `Record` holding the
vector-Jacobian product closure. `backward` replays the records in reverse.

Only first-order reverse mode is implemented. Gradients returned by
`backward` are detached constants; the `create_graph` flag is accepted so
callers can request second-order mode once it exists.
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEBUG = os.environ.get("TRUSTCNN_DEBUG", "") not in ("", "0")

_ids = itertools.count(1)
_tape_stack: list["Tape"] = []


class AutodiffError(RuntimeError):
    pass


class Tensor:
    """n-dimensional float array with an optional gradient slot.

    Float arrays keep their dtype (float32 normally; float64 only inside
    finite-difference oracles), anything else is converted to float32.
    """

    __slots__ = ("data", "requires_grad", "grad", "id", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # arithmetic sugar; all of it routes through the recorded ops below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)


def _not_scalar(t: Tensor):
    raise AutodiffError(f"item() needs a single-element tensor, got shape {t.shape}")


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    saved: dict = field(default_factory=dict)


class Tape:
    """Ordered record of executed operations; use as a context manager."""

    def __init__(self):
        self.records: list[Record] = []
        self._known: set[int] = set()
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack.pop()
        assert popped is self
        return False

    def push(self, record: Record) -> None:
        self.records.append(record)
        self._known.add(record.output.id)
        self._produced.add(record.output.id)
        self._known.update(t.id for t in record.inputs)

    def __contains__(self, tensor: Tensor) -> bool:
        return tensor.id in self._known

    def __len__(self):
        return len(self.records)


def active_tape() -> Optional[Tape]:
    return _tape_stack[-1] if _tape_stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_output(
    op: str,
    data: np.ndarray,
    inputs: Sequence[Tensor],
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    **saved,
) -> Tensor:
    """Wrap `data` as the output of `op` and record it if it is differentiable."""
    if DEBUG and not np.all(np.isfinite(data)):
        raise AutodiffError(f"{op} produced non-finite values")
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.push(Record(op, tuple(inputs), out, vjp, saved))
    return out


def backward(
    tape: Tape,
    seed: Tensor,
    wrt: Iterable[Tensor],
    create_graph: bool = False,
    relu_rule: str = "standard",
    accumulate: bool = True,
) -> list[Tensor]:
    """Reverse pass from a scalar `seed`; returns one gradient per `wrt` tensor.

    `relu_rule="guided"` swaps every ReLU backward for the guided rule: the
    gradient passes only where the forward input was positive and the
    incoming gradient is positive. With `accumulate`, leaf tensors in `wrt`
    that require gradients also have the result added to their `.grad`.
    """
    if create_graph:
        raise NotImplementedError("second-order (create_graph=True) mode is not implemented")
    if relu_rule not in ("standard", "guided"):
        raise ValueError(f"unknown relu_rule {relu_rule!r}")
    wrt = list(wrt)
    if seed.data.size != 1:
        raise AutodiffError(f"backward seed must be a scalar, got shape {seed.shape}")
    if seed not in tape:
        raise AutodiffError("backward seed is not on the tape")
    for t in wrt:
        if t not in tape or not t.requires_grad:
            raise AutodiffError(f"wrt tensor {t!r} does not appear on the tape")

    grads: dict[int, np.ndarray] = {seed.id: np.ones_like(seed.data)}
    for rec in reversed(tape.records):
        g = grads.get(rec.output.id)
        if g is None:
            continue
        if relu_rule == "guided" and rec.op == "relu":
            x = rec.saved["x"]
            in_grads = (np.where((x > 0) & (g > 0), g, 0).astype(g.dtype),)
        else:
            in_grads = rec.vjp(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            grads[t.id] = grads[t.id] + gi if t.id in grads else gi

    out = []
    for t in wrt:
        g = grads.get(t.id)
        if g is None:
            g = np.zeros_like(t.data)
        if accumulate and t.requires_grad and _is_leaf(tape, t):
            t.grad = g.copy() if t.grad is None else t.grad + g
        out.append(Tensor(g))
    return out


def _is_leaf(tape: Tape, t: Tensor) -> bool:
    return t.id not in tape._produced


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_output(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_output(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_output(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a python constant (kept out of the graph)."""
    f = a.data.dtype.type(factor)
    return make_output("scale", a.data * f, (a,), lambda g: (g * f,))


def take(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return make_output("take", np.array(out), (a,), vjp)


def pick(a: Tensor, columns: Sequence[int]) -> Tensor:
    """Row-wise gather: out[i] = a[i, columns[i]] for a 2-D tensor."""
    rows = np.arange(a.shape[0])
    cols = np.asarray(columns, dtype=np.int64)
    return take(a, (rows, cols))


def reshape(a: Tensor, shape) -> Tensor:
    return make_output("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def tsum(a: Tensor, axis=None) -> Tensor:
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(a.data.dtype),)

    return make_output("sum", np.asarray(a.data.sum(axis=axis)), (a,), vjp)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[x] for x in np.atleast_1d(axis)]))
    inv = a.data.dtype.type(1.0 / n)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g * inv, a.shape).astype(a.data.dtype),)
        return (np.broadcast_to(np.expand_dims(g * inv, axis), a.shape).astype(a.data.dtype),)

    return make_output("mean", np.asarray(a.data.mean(axis=axis)), (a,), vjp)


def log(a: Tensor) -> Tensor:
    return make_output("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi]; the gradient is zero wherever the bound is active."""
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return make_output("clamp", out, (a,), lambda g: (np.where(inside, g, 0).astype(g.dtype),))


def relu(a: Tensor) -> Tensor:
    x = a.data
    return make_output(
        "relu",
        np.maximum(x, 0).astype(x.dtype),
        (a,),
        lambda g: (np.where(x > 0, g, 0).astype(g.dtype),),
        x=x,
    )
