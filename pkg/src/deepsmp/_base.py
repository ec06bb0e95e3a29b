"""Shared plumbing for the primal and dual solvers."""
from __future__ import annotations

import csv
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator

from . import diffcore as dc
from .constraints import ConstraintSet, ZeroPadded
from .market import MarketModel, PathCoefficients, sample_noise
from .optim import PiecewiseSchedule
from .utility import Utility

logger = logging.getLogger("deepsmp")

WORKERS_ENV = "DEEPSMP_WORKERS"

# seed-stream tags; every random draw in a run comes from one of these
_INIT, _TRAIN, _EVAL = 0, 1, 2


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def fmt6(x: float) -> str:
    return f"{x:.6g}"


@dataclass(frozen=True)
class BoundsEstimate:
    """Monte-Carlo lower/upper value estimates with their standard errors."""

    lower: float
    lower_stderr: float
    upper: float
    upper_stderr: float
    n_paths: int
    n_dropped: int = 0

    @property
    def gap(self) -> float:
        return self.upper - self.lower

    @property
    def combined_stderr(self) -> float:
        return float(np.hypot(self.lower_stderr, self.upper_stderr))

    def to_dict(self) -> dict:
        return {
            "lower": self.lower, "lower_stderr": self.lower_stderr, "upper": self.upper,
            "upper_stderr": self.upper_stderr, "n_paths": self.n_paths, "n_dropped": self.n_dropped,
        }


@dataclass
class TrainingHistory:
    """Per-step rows ``(step, seconds, scalar)`` and per-evaluation bound rows."""

    scalar_name: str = "p0"
    bound_names: tuple[str, str] = ("V_l", "V_u")
    step_rows: list[tuple[int, float, float]] = field(default_factory=list)
    bound_rows: list[tuple[int, float, float, float, float]] = field(default_factory=list)

    def add_bounds(self, step: int, est: BoundsEstimate) -> None:
        self.bound_rows.append((step, est.lower, est.lower_stderr, est.upper, est.upper_stderr))

    def write_steps_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "seconds", self.scalar_name])
            for step, sec, val in self.step_rows:
                w.writerow([step, fmt6(sec), fmt6(val)])

    def write_bounds_csv(self, path) -> None:
        lo, up = self.bound_names
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", lo, f"{lo}_stderr", up, f"{up}_stderr"])
            for step, *vals in self.bound_rows:
                w.writerow([step, *(fmt6(v) for v in vals)])


def check_noise(X, m_total: int, N: int) -> np.ndarray:
    """Validate a Brownian-increment array of shape ``(n, m_total, N)``."""
    from sklearn.utils.validation import check_array

    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if X.ndim == 2 and m_total == 1:
        X = X[:, None, :]
    if X.ndim != 3 or X.shape[1:] != (m_total, N):
        raise ValueError(f"expected increments of shape (n, {m_total}, {N}), got {X.shape}")
    return X


def as_schedule(spec) -> PiecewiseSchedule:
    if isinstance(spec, PiecewiseSchedule):
        return spec
    if isinstance(spec, dict):
        return PiecewiseSchedule(tuple(spec.get("boundaries", ())), tuple(spec["values"]))
    if isinstance(spec, (int, float)):
        return PiecewiseSchedule((), (float(spec),))
    raise TypeError(f"cannot build a schedule from {spec!r}")


def assemble_inputs(tape: dc.Tape, X: dc.Value, feats: dict[str, np.ndarray], names, prev=None) -> dc.Value:
    parts = [X] + [tape.constant(feats[n]) for n in names]
    if prev is not None:
        parts.append(prev)
    return parts[0] if len(parts) == 1 else dc.concat_cols(parts)


def const_like(tape: dc.Tape, value: dc.Value) -> dc.Value:
    """Re-read a value from another tape as a constant."""
    return tape.constant(value.data)


class SolverBase(BaseEstimator):
    """Training loop, data streams and sharded Monte-Carlo evaluation.

    Subclasses implement ``_build``, ``_training_step``, ``_scalar`` and
    ``_bounds_chunk``.
    """

    _scalar_name = "p0"
    _bound_names = ("V_l", "V_u")

    # -- set by subclasses' __init__ -----------------------------------------
    market: MarketModel
    utility: Utility
    constraint: ConstraintSet
    x0: float
    T: float
    N: int
    batch_size: int
    steps: int
    epochs: int | None
    eval_every: int
    n_mc: int
    mc_chunk: int
    seed: int

    @property
    def dt(self) -> float:
        return self.T / self.N

    def _validate(self) -> None:
        if self.N < 1 or self.T <= 0:
            raise ValueError("need N >= 1 and T > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.epochs is not None and (self.epochs < 1 or self.steps % self.epochs):
            raise ValueError("steps must be a multiple of epochs")
        if self.x0 <= 0:
            raise ValueError("x0 must be positive")
        if self.constraint.m != self.market.m_total:
            raise ValueError(
                f"constraint dimension {self.constraint.m} does not match market dimension {self.market.m_total}"
            )
        if self.market.m_total > self.market.n_traded and not isinstance(self.constraint, ZeroPadded):
            raise ValueError("markets with untraded completion stocks need a ZeroPadded constraint")

    def _rng(self, *tags) -> np.random.Generator:
        return np.random.default_rng([int(self.seed), *tags])

    # -- padding helpers -----------------------------------------------------

    def _pad(self, pi: dc.Value) -> dc.Value:
        if isinstance(self.constraint, ZeroPadded):
            return self.constraint.pad_value(pi)
        return pi

    # -- training ----------------------------------------------------------------

    def _batches(self, X):
        m, N, b = self.market.m_total, self.N, self.batch_size
        if X is not None:
            data = check_noise(X, m, N)
            per_epoch = data.shape[0] // b
            if per_epoch < 1:
                raise ValueError(f"dataset has fewer than batch_size={b} paths")
            for k in range(self.steps):
                j = k % per_epoch
                yield data[j * b:(j + 1) * b]
            return
        rng = self._rng(_TRAIN)
        if self.epochs is None:
            for _ in range(self.steps):
                yield sample_noise(rng, b, m, N, self.dt)
            return
        per_epoch = self.steps // self.epochs
        data = sample_noise(rng, per_epoch * b, m, N, self.dt) if per_epoch else None
        for k in range(self.steps):
            j = k % per_epoch
            yield data[j * b:(j + 1) * b]

    def fit(self, X=None, y=None):
        """Train; ``X`` optionally supplies a fixed increment dataset iterated in order."""
        self._validate()
        self._build(self._rng(_INIT))
        self.history_ = TrainingHistory(self._scalar_name, self._bound_names)
        self.n_nonfinite_ = 0
        self.bounds_ = None
        start = time.perf_counter()
        for k, noise in enumerate(self._batches(X)):
            path = self.market.path(noise, self.T)
            self._training_step(noise, path, k)
            done = k + 1
            self.history_.step_rows.append((done, time.perf_counter() - start, self._scalar()))
            if self.eval_every and done % self.eval_every == 0:
                est = self.estimate_bounds(key=done)
                self.history_.add_bounds(done, est)
                self.bounds_ = est
                logger.info("step %d: %s=%.6f %s=%.6f", done, self._bound_names[0], est.lower,
                            self._bound_names[1], est.upper)
        self.n_steps_ = self.steps
        if self.bounds_ is None or not self.history_.bound_rows or self.history_.bound_rows[-1][0] != self.steps:
            self.bounds_ = self.estimate_bounds(key=self.steps)
        self.train_seconds_ = time.perf_counter() - start
        return self

    # -- evaluation -------------------------------------------------------------

    def estimate_bounds(self, n_paths: int | None = None, key: int = 0, noise=None) -> BoundsEstimate:
        """Monte-Carlo bounds in inference mode.

        Fresh increments come from a stream keyed by ``key`` and split into
        fixed-size shards, so results do not depend on the worker count.
        """
        if noise is not None:
            noise = check_noise(noise, self.market.m_total, self.N)
            shards = [lambda: noise]
        else:
            n = int(self.n_mc if n_paths is None else n_paths)
            if n < 2:
                raise ValueError("need at least two Monte-Carlo paths")
            chunk = max(1, int(self.mc_chunk))
            sizes = [min(chunk, n - s) for s in range(0, n, chunk)]
            shards = [
                (lambda j=j, size=size: sample_noise(self._rng(_EVAL, key, j), size, self.market.m_total,
                                                     self.N, self.dt))
                for j, size in enumerate(sizes)
            ]
        sums = self._map_shards(shards)
        return _reduce_bounds(sums, self._upper_offset())

    def _map_shards(self, shards: list[Callable[[], np.ndarray]]):
        def run(make):
            noise = make()
            # barely trained heads can blow wealth up; non-finite means are reported as such
            with np.errstate(over="ignore", invalid="ignore"):
                lower, upper, dropped = self._bounds_chunk(noise, self.market.path(noise, self.T))
                return (lower.size, lower.sum(), (lower**2).sum(), upper.sum(), (upper**2).sum(), dropped)

        workers = min(worker_count(), len(shards))
        if workers <= 1:
            return [run(s) for s in shards]
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(run, shards))

    def _check_fitted(self):
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "history_")


def _reduce_bounds(sums, upper_offset: float) -> BoundsEstimate:
    n = sum(s[0] for s in sums)
    totals = np.zeros(5)
    for s in sums:  # fixed order
        totals += np.array(s[1:])
    lo_mean, up_mean = totals[0] / n, totals[2] / n
    with np.errstate(invalid="ignore"):
        lo_var = max(totals[1] / n - lo_mean**2, 0.0) * n / (n - 1)
        up_var = max(totals[3] / n - up_mean**2, 0.0) * n / (n - 1)
    return BoundsEstimate(
        lower=float(lo_mean),
        lower_stderr=float(np.sqrt(lo_var / n)),
        upper=float(up_mean + upper_offset),
        upper_stderr=float(np.sqrt(up_var / n)),
        n_paths=int(n),
        n_dropped=int(totals[4]),
    )
