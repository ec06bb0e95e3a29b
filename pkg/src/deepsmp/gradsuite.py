"""Finite-difference checks of every tape primitive and of a full network head."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .constraints import OutputTransform
from .nn import FeedForwardHead

TOLERANCE = 1e-4


@dataclass
class GradCase:
    name: str
    loss: Callable[[dc.Tape], dc.Value]
    params: list


def _weighted(tape: dc.Tape, out: dc.Value, seed: int) -> dc.Value:
    # random projection so every output entry matters
    w = np.random.default_rng(seed).normal(size=out.shape)
    return dc.mean_rows(dc.sum_cols(out * tape.constant(w)))


def _unary(name, fn, low=-1.5, high=1.5, seed=0, shape=(4, 3)):
    rng = np.random.default_rng(seed)
    a = dc.Parameter("a", rng.uniform(low, high, size=shape))
    return GradCase(name, lambda t: _weighted(t, fn(t.parameter(a)), seed + 100), [a])


def _binary(name, fn, shapes=((4, 3), (4, 3)), low=-1.5, high=1.5, seed=0):
    rng = np.random.default_rng(seed)
    a = dc.Parameter("a", rng.uniform(low, high, size=shapes[0]))
    b = dc.Parameter("b", rng.uniform(low, high, size=shapes[1]))
    return GradCase(name, lambda t: _weighted(t, fn(t.parameter(a), t.parameter(b)), seed + 100), [a, b])


def _relu_case(seed=0):
    # keep entries away from the kink
    rng = np.random.default_rng(seed)
    vals = rng.uniform(0.2, 1.5, size=(4, 3)) * rng.choice([-1.0, 1.0], size=(4, 3))
    a = dc.Parameter("a", vals)
    return GradCase("relu", lambda t: _weighted(t, dc.relu(t.parameter(a)), seed + 100), [a])


def _abs_case(seed=0):
    rng = np.random.default_rng(seed)
    vals = rng.uniform(0.2, 1.5, size=(4, 3)) * rng.choice([-1.0, 1.0], size=(4, 3))
    a = dc.Parameter("a", vals)
    return GradCase("abs", lambda t: _weighted(t, dc.abs(t.parameter(a)), seed + 100), [a])


def _where_case(seed=0):
    rng = np.random.default_rng(seed)
    a = dc.Parameter("a", rng.normal(size=(4, 3)))
    b = dc.Parameter("b", rng.normal(size=(4, 3)))
    cond = rng.uniform(size=(4, 3)) > 0.5
    return GradCase(
        "where", lambda t: _weighted(t, dc.where(cond, t.parameter(a), t.parameter(b)), seed + 100), [a, b]
    )


def _head_case(seed=0, training=True, bn_epsilon=1e-3):
    rng = np.random.default_rng(seed)
    head = FeedForwardHead("h", 3, 2, (5, 4), OutputTransform("square"), bn_epsilon, 0.99, rng)
    x = rng.normal(size=(16, 3))

    def loss(t):
        return _weighted(t, head(t.constant(x), training), seed + 100)

    name = "head_bn_train" if training else "head_bn_infer"
    return GradCase(name, loss, head.parameters())


def default_cases(seed: int = 0) -> list[GradCase]:
    return [
        _binary("add", dc.add, seed=seed),
        _binary("add_broadcast", dc.add, ((4, 3), (1, 3)), seed=seed),
        _binary("sub", dc.sub, ((4, 3), (4, 1)), seed=seed),
        _binary("mul", dc.mul, ((4, 3), (1, 3)), seed=seed),
        _binary("div", dc.div, low=0.5, high=2.0, seed=seed),
        _unary("neg", dc.neg, seed=seed),
        _binary("matmul", dc.matmul, ((4, 3), (3, 2)), seed=seed),
        _unary("broadcast_row", lambda a: dc.broadcast_row(a, 5), shape=(1, 3), seed=seed),
        _unary("transpose", dc.transpose, seed=seed),
        _binary("concat_cols", lambda a, b: dc.concat_cols([a, b]), ((4, 3), (4, 2)), seed=seed),
        _unary("cols", lambda a: dc.cols(a, 1, 3), seed=seed),
        _relu_case(seed),
        _unary("square", dc.square, seed=seed),
        _unary("sqrt", dc.sqrt, low=0.3, high=2.0, seed=seed),
        _unary("exp", dc.exp, seed=seed),
        _unary("sin", dc.sin, seed=seed),
        _abs_case(seed),
        _unary("log", dc.log, low=0.3, high=2.0, seed=seed),
        _unary("pow", lambda a: dc.pow(a, -0.5), low=0.3, high=2.0, seed=seed),
        _unary("sum_cols", dc.sum_cols, seed=seed),
        _unary("mean_rows", dc.mean_rows, seed=seed),
        _where_case(seed),
        _head_case(seed, training=True),
        _head_case(seed, training=False),
    ]


def broken_case() -> GradCase:
    """A primitive whose adjoint is deliberately off by a factor of two."""

    def bad_square(a: dc.Value) -> dc.Value:
        return a.tape._push(a.data**2, (a.idx,), lambda g: (4.0 * a.data * g,), a.requires_grad)

    return _unary("broken_square", bad_square)


def run_suite(cases: list[GradCase] | None = None, h: float = 1e-4) -> list[tuple[str, float]]:
    cases = default_cases() if cases is None else cases
    return [(c.name, dc.grad_check(c.loss, c.params, h)) for c in cases]
