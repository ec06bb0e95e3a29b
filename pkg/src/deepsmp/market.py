"""Market coefficient models and Euler steppers for wealth, adjoint and dual states.

In every model here the auxiliary state (stocks, variance, short rate) is
driven by the Brownian increments alone, never by the controls.  A noise batch
therefore fixes the whole coefficient path, which :meth:`MarketModel.path`
computes once up front as plain arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import diffcore as dc


def sample_noise(rng_seed, batch: int, m_total: int, N: int, dt: float) -> np.ndarray:
    """Brownian increments of shape ``(batch, m_total, N)``, each N(0, dt)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if batch < 1 or m_total < 1 or N < 1:
        raise ValueError("batch, m_total and N must be positive")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return rng.standard_normal((batch, m_total, N)) * np.sqrt(dt)


@dataclass
class Coefficients:
    """``(r, mu, sigma, sigma^-1, theta)`` at one time point.

    Rows are either shared (first axis 1) or per path.  ``sigma`` is a full
    matrix shared by all paths, unless ``sigma_diag`` gives a per-path diagonal.
    """

    r: np.ndarray
    mu: np.ndarray
    theta: np.ndarray
    sigma: np.ndarray | None = None
    sigma_inv: np.ndarray | None = None
    sigma_diag: np.ndarray | None = None

    def __post_init__(self):
        if (self.sigma is None) == (self.sigma_diag is None):
            raise ValueError("give exactly one of sigma and sigma_diag")
        if self.sigma is not None and self.sigma_inv is None:
            self.sigma_inv = invert(self.sigma)

    @property
    def dim(self) -> int:
        return self.theta.shape[1]

    def pi_sigma(self, pi):
        """Rows of ``pi^T sigma``."""
        if self.sigma_diag is not None:
            return pi * self.sigma_diag
        return pi @ self.sigma

    def sigma_inv_rows(self, v):
        """Rows of ``(sigma^-1 v)^T``."""
        if self.sigma_diag is not None:
            return v / self.sigma_diag
        return v @ self.sigma_inv.T

    def sigma_inv_T_rows(self, q):
        """Rows of ``(sigma^-T q)^T``."""
        if self.sigma_diag is not None:
            return q / self.sigma_diag
        return q @ self.sigma_inv

    def sigma_matrix(self, row: int = 0) -> np.ndarray:
        if self.sigma is not None:
            return self.sigma
        return np.diag(self.sigma_diag[min(row, self.sigma_diag.shape[0] - 1)])


def invert(sigma: np.ndarray) -> np.ndarray:
    """LU inverse with a hard error on (numerically) singular input."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.linalg.cond(sigma) > 1e12:
        raise np.linalg.LinAlgError("volatility matrix is singular")
    return np.linalg.inv(sigma)


@dataclass
class PathCoefficients:
    """Coefficients for ``i = 0..N-1`` plus named per-step features for network inputs."""

    coeffs: list[Coefficients]
    features: list[dict[str, np.ndarray]]
    aux: dict[str, np.ndarray] = field(default_factory=dict)


class MarketModel:
    """Base class: ``m_total`` Brownian/asset coordinates, the first ``n_traded`` tradable."""

    m_total: int
    n_traded: int
    feature_names: tuple[str, ...] = ()

    def initial_state(self, batch: int) -> dict[str, np.ndarray]:
        return {}

    def coefficients(self, state: dict[str, np.ndarray], t: float) -> Coefficients:
        raise NotImplementedError

    def step_auxiliary(self, state, coeffs: Coefficients, dB: np.ndarray, dt: float, t: float) -> dict:
        return state

    def features(self, state) -> dict[str, np.ndarray]:
        return {}

    def path(self, noise: np.ndarray, T: float) -> PathCoefficients:
        batch, m_total, N = noise.shape
        if m_total != self.m_total:
            raise ValueError(f"noise has {m_total} Brownian coordinates, model needs {self.m_total}")
        dt = T / N
        state = self.initial_state(batch)
        coeffs, feats = [], []
        for i in range(N):
            t = i * dt
            c = self.coefficients(state, t)
            coeffs.append(c)
            feats.append(self.features(state))
            if i < N - 1:
                state = self.step_auxiliary(state, c, noise[:, :, i], dt, t)
        return PathCoefficients(coeffs, feats, state)

    def to_dict(self) -> dict:
        raise NotImplementedError


def _sigma_family(kind: str, g: float, t: float) -> float:
    if kind == "one_plus_sqrt":
        return g * (1.0 + np.sqrt(t))
    if kind == "inverse_one_plus":
        return g / (1.0 + t)
    if kind == "constant":
        return g
    raise ValueError(f"unknown sigma family {kind!r}")


@dataclass
class DeterministicMarkovian(MarketModel):
    """Deterministic coefficients.

    ``r(t) = r_a exp(r_b t)``, ``mu_i(t) = mu_c + mu_d sin(mu_freq t + pi i / mu_e)``
    for ``i = 1..m``, diagonal volatility from a family, constant off-diagonal.
    """

    m: int = 30
    r_a: float = 0.06
    r_b: float = 0.5
    mu_c: float = 0.07
    mu_d: float = 0.02
    mu_e: float = 15.0
    mu_freq: float = 4.0 * np.pi
    sigma_kind: str = "one_plus_sqrt"
    sigma_g: float = 0.3
    sigma_off: float = 0.1
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        _sigma_family(self.sigma_kind, self.sigma_g, 0.0)
        if self.m < 1:
            raise ValueError("m must be positive")

    @property
    def m_total(self) -> int:  # type: ignore[override]
        return self.m

    @property
    def n_traded(self) -> int:  # type: ignore[override]
        return self.m

    def r(self, t: float) -> float:
        return self.r_a * np.exp(self.r_b * t)

    def mu(self, t: float) -> np.ndarray:
        i = np.arange(1, self.m + 1)
        return self.mu_c + self.mu_d * np.sin(self.mu_freq * t + np.pi * i / self.mu_e)

    def sigma(self, t: float) -> np.ndarray:
        diag = _sigma_family(self.sigma_kind, self.sigma_g, t)
        return (diag - self.sigma_off) * np.eye(self.m) + self.sigma_off * np.ones((self.m, self.m))

    def coefficients(self, state, t):
        key = float(t)
        if key not in self._cache:
            sigma = self.sigma(t)
            sigma_inv = invert(sigma)
            r = self.r(t)
            mu = self.mu(t)
            theta = sigma_inv @ (mu - r)
            self._cache[key] = Coefficients(
                r=np.array([[r]]), mu=mu[None, :], theta=theta[None, :], sigma=sigma, sigma_inv=sigma_inv
            )
        return self._cache[key]

    def to_dict(self):
        return {
            "kind": "deterministic", "m": self.m, "r_a": self.r_a, "r_b": self.r_b, "mu_c": self.mu_c,
            "mu_d": self.mu_d, "mu_e": self.mu_e, "mu_freq": self.mu_freq, "sigma_kind": self.sigma_kind,
            "sigma_g": self.sigma_g, "sigma_off": self.sigma_off,
        }


@dataclass
class PathDependentMomentum(MarketModel):
    """``mu_i = mu_high`` while the stock is at or above its running historical mean."""

    m: int = 5
    r: float = 0.1
    sigma_diag: float = 0.2
    sigma_off: float = 0.05
    mu_high: float = 0.12
    mu_low: float = 0.08
    s0: float = 1.0
    quadrature: str = "left"
    feature_names = ("stocks",)

    def __post_init__(self):
        if self.quadrature not in ("left", "trapezoid"):
            raise ValueError("quadrature must be 'left' or 'trapezoid'")
        self._sigma = (self.sigma_diag - self.sigma_off) * np.eye(self.m) + self.sigma_off * np.ones((self.m, self.m))
        self._sigma_inv = invert(self._sigma)

    @property
    def m_total(self) -> int:  # type: ignore[override]
        return self.m

    @property
    def n_traded(self) -> int:  # type: ignore[override]
        return self.m

    def initial_state(self, batch):
        return {"stocks": np.full((batch, self.m), self.s0), "integral": np.zeros((batch, self.m))}

    def coefficients(self, state, t):
        stocks = state["stocks"]
        if t <= 0:
            mu = np.full_like(stocks, self.mu_high)
        else:
            mu = np.where(stocks >= state["integral"] / t, self.mu_high, self.mu_low)
        theta = (mu - self.r) @ self._sigma_inv.T
        return Coefficients(
            r=np.array([[self.r]]), mu=mu, theta=theta, sigma=self._sigma, sigma_inv=self._sigma_inv
        )

    def step_auxiliary(self, state, coeffs, dB, dt, t):
        s = state["stocks"]
        s_next = s + s * (coeffs.mu * dt + dB @ self._sigma.T)
        if self.quadrature == "left":
            integral = state["integral"] + s * dt
        else:
            integral = state["integral"] + 0.5 * (s + s_next) * dt
        return {"stocks": s_next, "integral": integral}

    def features(self, state):
        return {"stocks": state["stocks"]}

    def to_dict(self):
        return {
            "kind": "momentum", "m": self.m, "r": self.r, "sigma_diag": self.sigma_diag,
            "sigma_off": self.sigma_off, "mu_high": self.mu_high, "mu_low": self.mu_low, "s0": self.s0,
            "quadrature": self.quadrature,
        }


@dataclass
class HestonAugmented(MarketModel):
    """One traded stock with Heston variance plus an untraded completion stock."""

    r: float = 0.05
    A: float = 0.5
    kappa: float = 10.0
    theta_nu: float = 0.05
    xi: float = 0.5
    rho: float = -0.5
    nu0: float = 0.5
    truncation: float = 1e-5
    feature_names = ("sqrt_nu", "nu")

    def __post_init__(self):
        if not -1.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [-1, 1]")
        if not 2.0 * self.kappa * self.theta_nu > self.xi**2:
            raise ValueError("Feller condition 2 kappa theta_nu > xi^2 violated")
        if self.nu0 <= 0 or self.truncation <= 0:
            raise ValueError("nu0 and the truncation level must be positive")

    m_total = 2
    n_traded = 1

    def initial_state(self, batch):
        return {"nu": np.full((batch, 1), self.nu0)}

    def coefficients(self, state, t):
        sq = np.sqrt(state["nu"])
        ones = np.ones_like(sq)
        sigma_diag = np.concatenate([sq, ones], axis=1)
        theta = np.concatenate([self.A * sq, 0.0 * sq], axis=1)
        mu = self.r + sigma_diag * theta
        return Coefficients(r=np.array([[self.r]]), mu=mu, theta=theta, sigma_diag=sigma_diag)

    def step_auxiliary(self, state, coeffs, dB, dt, t):
        nu = state["nu"]
        driver = self.rho * dB[:, 0:1] + np.sqrt(1.0 - self.rho**2) * dB[:, 1:2]
        candidate = nu + self.kappa * (self.theta_nu - nu) * dt + self.xi * np.sqrt(nu) * driver
        return {"nu": np.maximum(candidate, self.truncation)}

    def features(self, state):
        return {"sqrt_nu": np.sqrt(state["nu"]), "nu": state["nu"]}

    def to_dict(self):
        return {
            "kind": "heston", "r": self.r, "A": self.A, "kappa": self.kappa, "theta_nu": self.theta_nu,
            "xi": self.xi, "rho": self.rho, "nu0": self.nu0, "truncation": self.truncation,
        }


@dataclass
class VasicekAugmented(MarketModel):
    """Deterministic ``mu``, ``sigma`` on ``m`` stocks, OU short rate, one untraded completion stock."""

    base: DeterministicMarkovian = field(
        default_factory=lambda: DeterministicMarkovian(
            m=30, r_a=0.05, r_b=0.0, mu_c=0.06, mu_d=0.01, sigma_kind="inverse_one_plus", sigma_g=0.3, sigma_off=0.05
        )
    )
    r0: float = 0.05
    alpha: float = 5.0
    beta: float = 0.05
    gamma: float = 0.05
    feature_names = ("r",)

    @property
    def m_total(self) -> int:  # type: ignore[override]
        return self.base.m + 1

    @property
    def n_traded(self) -> int:  # type: ignore[override]
        return self.base.m

    def initial_state(self, batch):
        return {"r": np.full((batch, 1), self.r0)}

    def coefficients(self, state, t):
        m = self.base.m
        inner = self.base.coefficients({}, t)
        sigma = np.eye(m + 1)
        sigma[:m, :m] = inner.sigma
        sigma_inv = np.eye(m + 1)
        sigma_inv[:m, :m] = inner.sigma_inv
        r = state["r"]
        mu = np.concatenate([np.broadcast_to(inner.mu, (r.shape[0], m)), r], axis=1)
        theta = np.concatenate([(inner.mu - r) @ inner.sigma_inv.T, np.zeros_like(r)], axis=1)
        return Coefficients(r=r, mu=mu, theta=theta, sigma=sigma, sigma_inv=sigma_inv)

    def step_auxiliary(self, state, coeffs, dB, dt, t):
        r = state["r"]
        return {"r": r + self.alpha * (self.beta - r) * dt + self.gamma * dB[:, -1:]}

    def features(self, state):
        return {"r": state["r"]}

    def to_dict(self):
        base = self.base.to_dict()
        base.pop("kind")
        return {"kind": "vasicek", "base": base, "r0": self.r0, "alpha": self.alpha, "beta": self.beta,
                "gamma": self.gamma}


def make_market(spec: dict) -> MarketModel:
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "deterministic":
        return DeterministicMarkovian(**spec)
    if kind == "momentum":
        return PathDependentMomentum(**spec)
    if kind == "heston":
        return HestonAugmented(**spec)
    if kind == "vasicek":
        base = DeterministicMarkovian(**spec.pop("base", {}))
        return VasicekAugmented(base=base, **spec)
    raise ValueError(f"unknown market kind {kind!r}")


# -- steppers -----------------------------------------------------------------
# Each works on tape values (dc.Value) or on plain arrays, returning the same kind.


def _sum_cols(x):
    return dc.sum_cols(x) if isinstance(x, dc.Value) else x.sum(axis=1, keepdims=True)


def step_wealth(X, pi, coeffs: Coefficients, dB, dt: float, pi_sigma=None):
    """``X + X (r + pi^T sigma theta) dt + X pi^T sigma dB``."""
    ps = coeffs.pi_sigma(pi) if pi_sigma is None else pi_sigma
    drift = coeffs.r + _sum_cols(ps * coeffs.theta)
    return X + X * drift * dt + X * _sum_cols(ps * dB)


def step_adjoint(p, pi, q, coeffs: Coefficients, dB, dt: float, pi_sigma=None):
    """``p - [(r + pi^T sigma theta) p + pi^T sigma q] dt + q^T dB``."""
    ps = coeffs.pi_sigma(pi) if pi_sigma is None else pi_sigma
    drift = (coeffs.r + _sum_cols(ps * coeffs.theta)) * p + _sum_cols(ps * q)
    return p - drift * dt + _sum_cols(q * dB)


def step_dual(Y, v, delta, coeffs: Coefficients, dB, dt: float, sigma_inv_v=None):
    """``Y - Y [(r + delta_K(v)) dt + (theta + sigma^-1 v)^T dB]``; ``delta`` is the row-wise support value."""
    sv = coeffs.sigma_inv_rows(v) if sigma_inv_v is None else sigma_inv_v
    return Y - Y * ((coeffs.r + delta) * dt + _sum_cols((coeffs.theta + sv) * dB))


def step_dual_adjoint(p2, q2, delta, coeffs: Coefficients, dB, dt: float, sigma_inv_v):
    """``p2 + [(r + delta) p2 + (theta + sigma^-1 v)^T q2] dt + q2^T dB``."""
    drift = (coeffs.r + delta) * p2 + _sum_cols((coeffs.theta + sigma_inv_v) * q2)
    return p2 + drift * dt + _sum_cols(q2 * dB)


def step_auxiliary(model: MarketModel, state: dict[str, Any], coeffs: Coefficients, dB, dt: float, t: float):
    return model.step_auxiliary(state, coeffs, dB, dt, t)
