"""Log and power utilities with their conjugates.

The scalar methods (``u``, ``u_prime``, ``inverse_marginal``, ``fenchel``,
``fenchel_prime``) work on numpy input.  ``u``/``u_prime`` return 0 for
non-positive wealth; the dual-side functions reject ``y <= 0`` unless called
through the ``*_guarded`` variants, which return 0 there and are what the
Monte-Carlo estimators use.  ``*_value`` variants build the same expressions on
a tape.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc


def _positive(x):
    x = np.asarray(x, dtype=np.float64)
    return x, x > 0, np.where(x > 0, x, 1.0)


def _require_positive(y, what: str):
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError(f"{what} is only defined for y > 0")
    return y


class Utility:
    name: str

    def u(self, x):
        raise NotImplementedError

    def u_prime(self, x):
        raise NotImplementedError

    def inverse_marginal(self, y):
        raise NotImplementedError

    def fenchel(self, y):
        raise NotImplementedError

    def fenchel_prime(self, y):
        return -self.inverse_marginal(y)

    def fenchel_guarded(self, y):
        y, pos, safe = _positive(y)
        return np.where(pos, self.fenchel(safe), 0.0)

    def inverse_marginal_guarded(self, y):
        y, pos, safe = _positive(y)
        return np.where(pos, self.inverse_marginal(safe), 0.0)

    def u_prime_value(self, x: dc.Value) -> dc.Value:
        raise NotImplementedError

    def inverse_marginal_value(self, y: dc.Value) -> dc.Value:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class LogUtility(Utility):
    name = "log"

    def u(self, x):
        x, pos, safe = _positive(x)
        return np.where(pos, np.log(safe), 0.0)

    def u_prime(self, x):
        x, pos, safe = _positive(x)
        return np.where(pos, 1.0 / safe, 0.0)

    def inverse_marginal(self, y):
        return 1.0 / _require_positive(y, "I(y)")

    def fenchel(self, y):
        return -np.log(_require_positive(y, "the conjugate")) - 1.0

    def u_prime_value(self, x):
        return dc.pow(x, -1.0)

    def inverse_marginal_value(self, y):
        return dc.pow(y, -1.0)

    def to_dict(self):
        return {"kind": "log"}


@dataclass(frozen=True)
class PowerUtility(Utility):
    """``U(x) = x**p / p`` for ``0 < p < 1``; ``p = 0.5`` gives ``2 sqrt(x)``."""

    p: float = 0.5
    name = "power"

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ValueError(f"power utility needs 0 < p < 1, got {self.p}")

    def u(self, x):
        x, pos, safe = _positive(x)
        return np.where(pos, safe**self.p / self.p, 0.0)

    def u_prime(self, x):
        x, pos, safe = _positive(x)
        return np.where(pos, safe ** (self.p - 1.0), 0.0)

    def inverse_marginal(self, y):
        return _require_positive(y, "I(y)") ** (1.0 / (self.p - 1.0))

    def fenchel(self, y):
        y = _require_positive(y, "the conjugate")
        return (1.0 - self.p) / self.p * y ** (self.p / (self.p - 1.0))

    def u_prime_value(self, x):
        return dc.pow(x, self.p - 1.0)

    def inverse_marginal_value(self, y):
        return dc.pow(y, 1.0 / (self.p - 1.0))

    def to_dict(self):
        return {"kind": "power", "p": self.p}


def make_utility(kind: str, p: float | None = None) -> Utility:
    if kind == "log":
        return LogUtility()
    if kind == "power":
        if p is None:
            raise ValueError("power utility needs p")
        return PowerUtility(p)
    raise ValueError(f"unknown utility kind {kind!r}")
