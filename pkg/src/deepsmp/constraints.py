"""Convex control sets, their support functions and hard-constraint maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc


class _Unbounded:
    """Tag for an infinite support-function value."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "UNBOUNDED"

    def __reduce__(self):
        return (_Unbounded, ())


UNBOUNDED = _Unbounded()


@dataclass(frozen=True)
class OutputTransform:
    """Elementwise map applied to a head's raw output.

    kinds: ``identity``, ``square``, ``square_minus_kappa``, ``abs_minus_kappa``,
    ``clamp_floor`` and ``zero`` (output forced to 0).
    """

    kind: str = "identity"
    kappa: float = 0.0

    def __post_init__(self):
        if self.kind not in _TRANSFORMS:
            raise ValueError(f"unknown output transform {self.kind!r}")

    def apply(self, x: dc.Value) -> dc.Value:
        return _TRANSFORMS[self.kind](x, self.kappa)

    def apply_array(self, x: np.ndarray) -> np.ndarray:
        with dc.no_grad() as tape:
            return self.apply(tape.constant(x)).data


def _clamp_floor(x, kappa):
    # keep the boundary point on the pass-through branch so its derivative is 1
    return dc.where(x.data >= -kappa, x, -kappa)


_TRANSFORMS = {
    "identity": lambda x, k: x,
    "square": lambda x, k: dc.square(x),
    "square_minus_kappa": lambda x, k: dc.square(x) - k,
    "abs_minus_kappa": lambda x, k: dc.abs(x) - k,
    "clamp_floor": _clamp_floor,
    "zero": lambda x, k: x * 0.0,
}


class ConstraintSet:
    """A closed convex set K containing 0."""

    m: int

    @property
    def dim(self) -> int:
        return self.m

    def contains(self, pi, atol: float = 0.0) -> np.ndarray:
        raise NotImplementedError

    def support_delta(self, v):
        """sup over pi in K of -pi.v for a single vector; UNBOUNDED outside the dual domain."""
        raise NotImplementedError

    def support_delta_value(self, v: dc.Value) -> dc.Value:
        """Row-wise support function for rows already in the dual domain."""
        raise NotImplementedError

    def dual_domain_contains(self, v, atol: float = 0.0) -> np.ndarray:
        raise NotImplementedError

    def dual_transform(self) -> OutputTransform:
        raise NotImplementedError

    def primal_transform(self, position: str) -> OutputTransform:
        raise NotImplementedError

    def h_K(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def h_K_value(self, x: dc.Value) -> dc.Value:
        """Tape version of :meth:`h_K`."""
        raise NotImplementedError

    def dual_linear_cost(self) -> np.ndarray:
        """Vector c with support_delta(v) = c.v on the dual domain."""
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


def _rows(x) -> np.ndarray:
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


def _check_position(position):
    if position not in ("t0", "later"):
        raise ValueError(f"position must be 't0' or 'later', got {position!r}")


@dataclass(frozen=True)
class FullSpace(ConstraintSet):
    m: int

    def contains(self, pi, atol=0.0):
        return np.all(np.isfinite(_rows(pi)), axis=1)

    def support_delta(self, v):
        v = np.asarray(v, dtype=np.float64)
        return 0.0 if np.all(v == 0) else UNBOUNDED

    def support_delta_value(self, v):
        return dc.sum_cols(v) * 0.0

    def dual_domain_contains(self, v, atol=0.0):
        return np.all(np.abs(_rows(v)) <= atol, axis=1)

    def dual_transform(self):
        return OutputTransform("zero")

    def primal_transform(self, position):
        _check_position(position)
        return OutputTransform("identity")

    def h_K(self, x):
        return np.asarray(x, dtype=np.float64)

    def h_K_value(self, x):
        return x

    def dual_linear_cost(self):
        return np.zeros(self.m)

    def to_dict(self):
        return {"kind": "full_space", "m": self.m}


@dataclass(frozen=True)
class NonNegOrthant(ConstraintSet):
    m: int

    def contains(self, pi, atol=0.0):
        return np.all(_rows(pi) >= -atol, axis=1)

    def support_delta(self, v):
        v = np.asarray(v, dtype=np.float64)
        return 0.0 if np.all(v >= 0) else UNBOUNDED

    def support_delta_value(self, v):
        return dc.sum_cols(v) * 0.0

    def dual_domain_contains(self, v, atol=0.0):
        return np.all(_rows(v) >= -atol, axis=1)

    def dual_transform(self):
        return OutputTransform("square")

    def primal_transform(self, position):
        _check_position(position)
        return OutputTransform("square")

    def h_K(self, x):
        return np.maximum(np.asarray(x, dtype=np.float64), 0.0)

    def h_K_value(self, x):
        return _clamp_floor(x, 0.0)

    def dual_linear_cost(self):
        return np.zeros(self.m)

    def to_dict(self):
        return {"kind": "nonneg_orthant", "m": self.m}


@dataclass(frozen=True)
class FloorBox(ConstraintSet):
    """``K = [-kappa, inf)^m``: limited short selling per asset."""

    kappa: float
    m: int

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("FloorBox needs kappa > 0")

    def contains(self, pi, atol=0.0):
        return np.all(_rows(pi) >= -self.kappa - atol, axis=1)

    def support_delta(self, v):
        v = np.asarray(v, dtype=np.float64)
        return self.kappa * float(v.sum()) if np.all(v >= 0) else UNBOUNDED

    def support_delta_value(self, v):
        return dc.sum_cols(v) * self.kappa

    def dual_domain_contains(self, v, atol=0.0):
        return np.all(_rows(v) >= -atol, axis=1)

    def dual_transform(self):
        return OutputTransform("square")

    def primal_transform(self, position):
        _check_position(position)
        if position == "t0":
            return OutputTransform("clamp_floor", self.kappa)
        return OutputTransform("square_minus_kappa", self.kappa)

    def h_K(self, x):
        return np.maximum(np.asarray(x, dtype=np.float64), -self.kappa)

    def h_K_value(self, x):
        return _clamp_floor(x, self.kappa)

    def dual_linear_cost(self):
        return np.full(self.m, self.kappa)

    def to_dict(self):
        return {"kind": "floor_box", "m": self.m, "kappa": self.kappa}


@dataclass(frozen=True)
class ZeroPadded(ConstraintSet):
    """``K x {0}^pad``: trailing market-completion coordinates are not traded.

    Heads produce only the ``base.m`` traded components; :meth:`pad` appends
    the zero columns.  On the dual side the padded coordinates are free,
    because sup over pi=0 of -pi.v vanishes for every v.
    """

    base: ConstraintSet
    pad: int = 1

    @property
    def m(self) -> int:  # type: ignore[override]
        return self.base.m + self.pad

    def pad_value(self, x: dc.Value) -> dc.Value:
        return dc.concat_cols([x, x.tape.constant(np.zeros((1, self.pad)))])

    def contains(self, pi, atol=0.0):
        pi = _rows(pi)
        k = self.base.m
        return self.base.contains(pi[:, :k], atol) & np.all(np.abs(pi[:, k:]) <= atol, axis=1)

    def support_delta(self, v):
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        return self.base.support_delta(v[: self.base.m])

    def support_delta_value(self, v):
        return self.base.support_delta_value(dc.cols(v, 0, self.base.m))

    def dual_domain_contains(self, v, atol=0.0):
        return self.base.dual_domain_contains(_rows(v)[:, : self.base.m], atol)

    def dual_transform(self):
        return self.base.dual_transform()

    def primal_transform(self, position):
        return self.base.primal_transform(position)

    def h_K(self, x):
        x = np.array(x, dtype=np.float64)
        k = self.base.m
        x[..., :k] = self.base.h_K(x[..., :k])
        x[..., k:] = 0.0
        return x

    def h_K_value(self, x):
        return self.pad_value(self.base.h_K_value(dc.cols(x, 0, self.base.m)))

    def dual_linear_cost(self):
        return np.concatenate([self.base.dual_linear_cost(), np.zeros(self.pad)])

    def to_dict(self):
        return {"kind": "zero_padded", "base": self.base.to_dict(), "pad": self.pad}


def make_constraint(spec: dict) -> ConstraintSet:
    kind = spec["kind"]
    if kind == "full_space":
        return FullSpace(spec["m"])
    if kind == "nonneg_orthant":
        return NonNegOrthant(spec["m"])
    if kind == "floor_box":
        return FloorBox(spec["kappa"], spec["m"])
    if kind == "zero_padded":
        return ZeroPadded(make_constraint(spec["base"]), spec.get("pad", 1))
    raise ValueError(f"unknown constraint kind {kind!r}")
