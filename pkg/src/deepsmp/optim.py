"""Adam and piecewise-constant learning-rate schedules."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .diffcore import Parameter

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PiecewiseSchedule:
    """``values[k]`` applies for ``boundaries[k-1] < step <= boundaries[k]``."""

    boundaries: tuple[int, ...] = ()
    values: tuple[float, ...] = (1e-3,)

    def __post_init__(self):
        object.__setattr__(self, "boundaries", tuple(int(b) for b in self.boundaries))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.values) != len(self.boundaries) + 1:
            raise ValueError("need exactly one more value than boundaries")
        if any(b1 >= b2 for b1, b2 in zip(self.boundaries, self.boundaries[1:])):
            raise ValueError("boundaries must be strictly ascending")
        if any(v < 0 for v in self.values):
            raise ValueError("learning rates must be non-negative")

    def __call__(self, step: int) -> float:
        return schedule_at(self, step)

    @classmethod
    def from_segments(cls, first: float, segments: Sequence[tuple[int, float]]):
        """Build from ``first -(n1)-> v1 -(n2)-> v2 ...`` run-length notation."""
        boundaries, values, total = [], [first], 0
        for length, value in segments:
            total += int(length)
            boundaries.append(total)
            values.append(value)
        return cls(tuple(boundaries), tuple(values))

    def to_dict(self) -> dict:
        return {"boundaries": list(self.boundaries), "values": list(self.values)}


def schedule_at(schedule: PiecewiseSchedule, step: int) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    k = sum(1 for b in schedule.boundaries if b < step)
    return schedule.values[k]


@dataclass
class Adam:
    """Bias-corrected Adam over a fixed list of parameters.

    A step whose gradients contain NaN or inf is skipped and counted in
    ``n_skipped``.
    """

    params: list[Parameter]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    t: int = 0
    n_skipped: int = 0
    _m: list[np.ndarray] = field(default_factory=list, repr=False)
    _v: list[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        self.params = list(self.params)
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def step(self, grads: dict[Parameter, np.ndarray], lr: float) -> bool:
        gs = [grads.get(p) for p in self.params]
        gs = [np.zeros_like(p.value) if g is None else g for p, g in zip(self.params, gs)]
        if not all(np.all(np.isfinite(g)) for g in gs):
            self.n_skipped += 1
            logger.debug("skipping Adam step with non-finite gradient")
            return False
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, gs, self._m, self._v):
            if g.shape != p.value.shape:
                raise ValueError(f"gradient shape {g.shape} does not match {p.name} {p.value.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.value = p.value - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True


def adam_step(params, grads, state: Adam, lr: float):
    """Functional wrapper: apply one Adam update and return the parameters."""
    state.step(dict(zip(params, grads)) if not isinstance(grads, dict) else grads, lr)
    return params
