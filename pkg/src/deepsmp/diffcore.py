"""Minimal reverse-mode differentiation over batched 2-D float64 matrices.

Every value lives on a :class:`Tape`.  Operations evaluate eagerly and, when
the tape records, append a node holding the parent indices and a closure that
maps the output adjoint to the parent adjoints.  :meth:`Tape.backward` walks
the node list once in reverse.

Shapes are always ``(rows, cols)``.  Elementwise operations follow numpy
broadcasting between ``(b, c)``, ``(1, c)``, ``(b, 1)`` and ``(1, 1)``; the
adjoint of a broadcast operand is summed back to its own shape.
"""
from __future__ import annotations

import builtins
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Parameter",
    "Tape",
    "Value",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "broadcast_row",
    "transpose",
    "relu",
    "square",
    "sqrt",
    "exp",
    "log",
    "pow",
    "sin",
    "abs",
    "sum_cols",
    "mean_rows",
    "where",
    "concat_cols",
    "cols",
    "grad_check",
    "no_grad",
]


class Parameter:
    """Persistent trainable matrix; gradients are reported against it."""

    __slots__ = ("name", "value")

    def __init__(self, name: str, init_values):
        values = np.array(init_values, dtype=np.float64)
        if values.ndim == 0:
            values = values.reshape(1, 1)
        elif values.ndim == 1:
            values = values.reshape(1, -1)
        if values.ndim != 2 or values.size == 0:
            raise ValueError(f"parameter {name!r} needs a non-empty 2-D shape, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError(f"parameter {name!r} has non-finite initial values")
        self.name = name
        self.value = values

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class Value:
    """Handle to a node on a tape.  ``idx`` is -1 on non-recording tapes."""

    __slots__ = ("data", "tape", "idx", "requires_grad")
    # make numpy defer to the reflected operators in mixed expressions
    __array_ufunc__ = None

    def __init__(self, data: np.ndarray, tape: "Tape", idx: int, requires_grad: bool):
        self.data = data
        self.tape = tape
        self.idx = idx
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Value(shape={self.shape}, idx={self.idx})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered record of primitive applications.

    ``watch`` restricts which parameters are tracked; parameters outside it are
    read as constants.  ``None`` tracks every parameter that is accessed.
    """

    def __init__(self, record: bool = True, watch: Iterable[Parameter] | None = None):
        self.record = record
        self.watch = None if watch is None else {id(p) for p in watch}
        self._parents: list[tuple[int, ...]] = []
        self._backward: list[Callable | None] = []
        self._params: list[Parameter | None] = []

    def __len__(self) -> int:
        return len(self._parents)

    def _push(self, data, parents, backward, requires_grad, param=None) -> Value:
        if not self.record:
            return Value(data, self, -1, False)
        idx = len(self._parents)
        self._parents.append(parents)
        self._backward.append(backward if requires_grad else None)
        self._params.append(param)
        return Value(data, self, idx, requires_grad)

    def constant(self, values, shape: tuple[int, int] | None = None) -> Value:
        data = np.asarray(values, dtype=np.float64)
        if shape is not None:
            rows, cols = shape
            if rows < 1 or cols < 1:
                raise ValueError(f"invalid shape {shape}")
            if data.size != rows * cols:
                raise ValueError(f"{data.size} values do not fill shape {shape}")
            data = data.reshape(shape)
        elif data.ndim == 0:
            data = data.reshape(1, 1)
        elif data.ndim == 1:
            data = data.reshape(1, -1)
        if data.ndim != 2:
            raise ValueError(f"values must be 2-D, got ndim={data.ndim}")
        return self._push(data, (), None, False)

    def parameter(self, param: Parameter) -> Value:
        tracked = self.watch is None or id(param) in self.watch
        if not tracked:
            return self._push(param.value, (), None, False)
        # a leaf with a trivial backward so that it counts as differentiable
        return self._push(param.value, (), _leaf_backward, True, param)

    def backward(self, loss: Value, params: Sequence[Parameter] = ()) -> dict[Parameter, np.ndarray]:
        """Adjoints of a scalar ``loss`` w.r.t. every tracked parameter.

        Parameters listed in ``params`` but unreachable from ``loss`` map to
        zero matrices.
        """
        if loss.tape is not self or loss.idx < 0:
            raise ValueError("loss is not recorded on this tape")
        if loss.shape != (1, 1):
            raise ValueError(f"loss must have shape (1, 1), got {loss.shape}")
        out: dict[Parameter, np.ndarray] = {p: np.zeros_like(p.value) for p in params}
        if not loss.requires_grad:
            return out
        grads: dict[int, np.ndarray] = {loss.idx: np.ones((1, 1))}
        parents, backward, pmap = self._parents, self._backward, self._params
        for idx in range(loss.idx, -1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            param = pmap[idx]
            if param is not None:
                if param in out:
                    out[param] = out[param] + g
                else:
                    out[param] = g
                continue
            fn = backward[idx]
            if fn is None:
                continue
            for pidx, pg in zip(parents[idx], fn(g)):
                if pg is None or backward[pidx] is None:
                    continue
                prev = grads.get(pidx)
                grads[pidx] = pg if prev is None else prev + pg
        return out


def _leaf_backward(g):
    return ()


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _lift(x, tape: Tape) -> Value:
    if isinstance(x, Value):
        return x
    return tape.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Value):
            return x.tape
    raise TypeError("at least one operand must be a Value")


def _binary(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    if a.tape is not b.tape:
        raise ValueError("operands live on different tapes")
    return tape, a, b


def _check_broadcast(a: Value, b: Value, kind: str):
    (ra, ca), (rb, cb) = a.shape, b.shape
    if (ra != rb and 1 not in (ra, rb)) or (ca != cb and 1 not in (ca, cb)):
        raise ValueError(f"{kind}: shapes {a.shape} and {b.shape} do not conform")


# -- elementwise binary -----------------------------------------------------


def add(a, b) -> Value:
    tape, a, b = _binary(a, b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return tape._push(
        a.data + b.data,
        (a.idx, b.idx),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        a.requires_grad or b.requires_grad,
    )


def sub(a, b) -> Value:
    tape, a, b = _binary(a, b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return tape._push(
        a.data - b.data,
        (a.idx, b.idx),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
        a.requires_grad or b.requires_grad,
    )


def mul(a, b) -> Value:
    tape, a, b = _binary(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return tape._push(
        ad * bd,
        (a.idx, b.idx),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        a.requires_grad or b.requires_grad,
    )


def div(a, b) -> Value:
    tape, a, b = _binary(a, b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return tape._push(
        out,
        (a.idx, b.idx),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
        a.requires_grad or b.requires_grad,
    )


def neg(a: Value) -> Value:
    return a.tape._push(-a.data, (a.idx,), lambda g: (-g,), a.requires_grad)


def matmul(a, b) -> Value:
    tape, a, b = _binary(a, b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return tape._push(
        ad @ bd,
        (a.idx, b.idx),
        lambda g: (g @ bd.T, ad.T @ g),
        a.requires_grad or b.requires_grad,
    )


# -- shape ------------------------------------------------------------------


def broadcast_row(a: Value, rows: int) -> Value:
    if a.shape[0] != 1:
        raise ValueError(f"broadcast_row expects a (1, c) value, got {a.shape}")
    data = np.broadcast_to(a.data, (rows, a.shape[1]))
    return a.tape._push(data, (a.idx,), lambda g: (g.sum(axis=0, keepdims=True),), a.requires_grad)


def transpose(a: Value) -> Value:
    return a.tape._push(a.data.T, (a.idx,), lambda g: (g.T,), a.requires_grad)


def concat_cols(parts: Sequence[Value]) -> Value:
    tape = _tape_of(*parts)
    parts = [_lift(p, tape) for p in parts]
    rows = max(p.shape[0] for p in parts)
    for p in parts:
        if p.shape[0] not in (1, rows):
            raise ValueError("concat_cols: row counts do not conform")
    datas = [np.broadcast_to(p.data, (rows, p.shape[1])) for p in parts]
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    shapes = [p.shape for p in parts]

    def backward(g):
        return tuple(_unbroadcast(g[:, bounds[k]: bounds[k + 1]], shapes[k]) for k in range(len(parts)))

    return tape._push(
        np.concatenate(datas, axis=1),
        tuple(p.idx for p in parts),
        backward,
        any(p.requires_grad for p in parts),
    )


def cols(a: Value, start: int, stop: int) -> Value:
    """Column slice ``a[:, start:stop]``."""
    if not 0 <= start < stop <= a.shape[1]:
        raise ValueError(f"cols: bad slice [{start}:{stop}] for shape {a.shape}")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return a.tape._push(a.data[:, start:stop], (a.idx,), backward, a.requires_grad)


# -- elementwise unary ------------------------------------------------------


def relu(a: Value) -> Value:
    mask = a.data > 0
    return a.tape._push(np.where(mask, a.data, 0.0), (a.idx,), lambda g: (g * mask,), a.requires_grad)


def square(a: Value) -> Value:
    d = a.data
    return a.tape._push(d * d, (a.idx,), lambda g: (2.0 * d * g,), a.requires_grad)


def sqrt(a: Value) -> Value:
    out = np.sqrt(a.data)
    return a.tape._push(out, (a.idx,), lambda g: (0.5 * g / out,), a.requires_grad)


def exp(a: Value) -> Value:
    out = np.exp(a.data)
    return a.tape._push(out, (a.idx,), lambda g: (g * out,), a.requires_grad)


def sin(a: Value) -> Value:
    d = a.data
    return a.tape._push(np.sin(d), (a.idx,), lambda g: (g * np.cos(d),), a.requires_grad)


def abs(a: Value) -> Value:  # noqa: A001 - mirrors numpy naming
    d = a.data
    return a.tape._push(np.abs(d), (a.idx,), lambda g: (g * np.sign(d),), a.requires_grad)


def log(a: Value) -> Value:
    """Guarded logarithm: 0 (with zero derivative) wherever the input is <= 0."""
    d = a.data
    pos = d > 0
    safe = np.where(pos, d, 1.0)
    out = np.where(pos, np.log(safe), 0.0)
    return a.tape._push(out, (a.idx,), lambda g: (np.where(pos, g / safe, 0.0),), a.requires_grad)


def pow(a: Value, exponent: float) -> Value:  # noqa: A001
    """Guarded power ``a ** exponent``: 0 (zero derivative) wherever a <= 0."""
    d = a.data
    pos = d > 0
    safe = np.where(pos, d, 1.0)
    out = np.where(pos, safe**exponent, 0.0)

    def backward(g):
        return (np.where(pos, g * exponent * safe ** (exponent - 1.0), 0.0),)

    return a.tape._push(out, (a.idx,), backward, a.requires_grad)


# -- reductions and selection ----------------------------------------------


def sum_cols(a: Value) -> Value:
    """Row-wise sum, ``(b, c) -> (b, 1)``."""
    c = a.shape[1]
    return a.tape._push(
        a.data.sum(axis=1, keepdims=True),
        (a.idx,),
        lambda g: (np.repeat(g, c, axis=1),),
        a.requires_grad,
    )


def mean_rows(a: Value) -> Value:
    """Batch mean, ``(b, c) -> (1, c)``."""
    b = a.shape[0]
    shape = a.shape
    return a.tape._push(
        a.data.mean(axis=0, keepdims=True),
        (a.idx,),
        lambda g: (np.broadcast_to(g / b, shape),),
        a.requires_grad,
    )


def where(cond, a, b) -> Value:
    """Elementwise select; ``cond`` is a boolean array and carries no adjoint."""
    tape, a, b = _binary(a, b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return tape._push(
        np.where(cond, a.data, b.data),
        (a.idx, b.idx),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb)),
        a.requires_grad or b.requires_grad,
    )


@contextmanager
def no_grad():
    """Yield a non-recording tape; values built on it carry no history."""
    yield Tape(record=False)


def grad_check(
    function: Callable[[Tape], Value],
    params: Sequence[Parameter],
    h: float = 1e-4,
) -> float:
    """Max relative error between tape adjoints and central differences.

    ``function`` builds a scalar loss on the tape it is given.  The error per
    entry is ``|ad - fd| / max(1, |fd|)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    tape = Tape()
    loss = function(tape)
    grads = tape.backward(loss, params)

    def evaluate() -> float:
        val = function(Tape(record=False)).item()
        if not np.isfinite(val):
            raise FloatingPointError("non-finite loss during finite differencing")
        return val

    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        analytic = grads[p].reshape(-1)
        if not np.all(np.isfinite(analytic)):
            raise FloatingPointError(f"non-finite adjoint for {p.name}")
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = evaluate()
            flat[k] = orig - h
            down = evaluate()
            flat[k] = orig
            fd = (up - down) / (2.0 * h)
            worst = max(worst, builtins.abs(analytic[k] - fd) / max(1.0, builtins.abs(fd)))
    return worst

