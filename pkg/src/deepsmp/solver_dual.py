"""Dual-side deep SMP solver.

Heads for the dual control ``v`` (hard-constrained into the dual domain) and
the adjoint integrand ``q2`` drive the dual state ``Y`` from ``y = exp(z)``
and the dual adjoint ``p2`` from ``x0``.  The BSDE loss pins ``p2_N`` to
``-U~'(Y_N)``; the control loss is the residual of
``p2 delta_K(v) + (sigma^-1 v)^T q2 = 0``.

With ``project_q`` (the default) the raw head output is mapped through the
candidate ``pi^ = h_K(p2^-1 sigma^-T q2)`` and replaced by ``p2 sigma^T pi^``,
so the membership condition on ``q2`` holds by construction.  The residual
condition is then used to drop the ``v`` terms from the ``p2`` drift, which
makes ``p2`` the wealth of ``pi^`` and the control residual
``p2 (delta_K(v) + v.pi^)`` nonnegative.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from ._base import SolverBase, as_schedule, assemble_inputs, check_noise
from .constraints import ConstraintSet, OutputTransform, ZeroPadded
from .market import (
    Coefficients,
    MarketModel,
    PathCoefficients,
    step_dual,
    step_dual_adjoint,
    step_wealth,
)
from .nn import ConstantHead, FeedForwardHead, ParameterEntry
from .optim import Adam
from .utility import Utility


@dataclass
class DualTrajectory:
    Y: list[dc.Value]
    p2: list[dc.Value]
    v: list[dc.Value]
    q2: list[dc.Value]


def dual_loss_bsde(utility: Utility, Y_N: dc.Value, p2_N: dc.Value) -> dc.Value:
    """Batch mean of ``|p2_N + U~'(Y_N)|^2`` with ``U~' = -I``."""
    return dc.mean_rows(dc.square(p2_N - utility.inverse_marginal_value(Y_N)))


CONTROL_LOSSES = ("squared", "linear")


def dual_loss_control(
    constraint: ConstraintSet, coeffs: Coefficients, p2, v, q2, sigma_inv_v=None, kind: str = "squared"
) -> dc.Value:
    """Batch mean of the residual ``p2 delta_K(v) + (sigma^-1 v)^T q2``, or of its square.

    The linear form is bounded below only when ``p2^-1 sigma^-T q2`` lies in K;
    the squared form is zero at ``v = 0`` for every ``q2``.
    """
    if kind not in CONTROL_LOSSES:
        raise ValueError(f"kind must be one of {CONTROL_LOSSES}")
    sv = coeffs.sigma_inv_rows(v) if sigma_inv_v is None else sigma_inv_v
    resid = p2 * constraint.support_delta_value(v) + dc.sum_cols(sv * q2)
    return dc.mean_rows(dc.square(resid) if kind == "squared" else resid)


def candidate_primal_control(p2: np.ndarray, q2: np.ndarray, coeffs: Coefficients, constraint: ConstraintSet):
    """``h_K(p2^-1 sigma^-T q2)`` row-wise; rows with ``p2 == 0`` give 0 and are flagged."""
    raw = coeffs.sigma_inv_T_rows(np.asarray(q2, dtype=np.float64))
    p2 = np.asarray(p2, dtype=np.float64)
    bad = (p2 == 0).reshape(-1)
    safe = np.where(p2 == 0, 1.0, p2)
    pi = constraint.h_K(raw / safe)
    if bad.any():
        pi = np.where(bad[:, None], 0.0, pi)
    return pi, bad


class _DualTransform:
    """Dual-domain map: the base set's transform on traded coordinates, free elsewhere."""

    def __init__(self, constraint: ConstraintSet):
        self.k = constraint.base.m if isinstance(constraint, ZeroPadded) else constraint.m
        self.m = constraint.m
        base = constraint.base if isinstance(constraint, ZeroPadded) else constraint
        self.inner = base.dual_transform()

    def apply(self, x: dc.Value) -> dc.Value:
        if self.k == self.m:
            return self.inner.apply(x)
        return dc.concat_cols([self.inner.apply(dc.cols(x, 0, self.k)), dc.cols(x, self.k, self.m)])


class DeepDualSMP(SolverBase):
    """Dual deep SMP estimator; ``bounds_`` holds ``(V~_l, V~_u)``."""

    _scalar_name = "y"
    _bound_names = ("Vtilde_l", "Vtilde_u")

    def __init__(
        self,
        market: MarketModel | None = None,
        utility: Utility | None = None,
        constraint: ConstraintSet | None = None,
        x0: float = 10.0,
        T: float = 0.5,
        N: int = 10,
        batch_size: int = 64,
        steps: int = 10000,
        bsde_schedule=None,
        control_schedule=None,
        y_schedule=None,
        bn_epsilon: float = 100.0,
        bn_momentum: float = 0.99,
        hidden: tuple = (11, 11),
        v_extra_inputs: tuple = (),
        q_extra_inputs: tuple = (),
        q_uses_v: bool = False,
        control_loss: str = "linear",
        project_q: bool = True,
        y_init: tuple = (0.2, 0.4),
        v0_init: tuple = (0.0, 0.2),
        q0_init: tuple = (-0.1, 0.1),
        epochs: int | None = None,
        eval_every: int = 200,
        n_mc: int = 100_000,
        mc_chunk: int = 20_000,
        adam_eps: float = 1e-7,
        seed: int = 0,
    ):
        self.market = market
        self.utility = utility
        self.constraint = constraint
        self.x0 = x0
        self.T = T
        self.N = N
        self.batch_size = batch_size
        self.steps = steps
        self.bsde_schedule = bsde_schedule
        self.control_schedule = control_schedule
        self.y_schedule = y_schedule
        self.bn_epsilon = bn_epsilon
        self.bn_momentum = bn_momentum
        self.hidden = hidden
        self.v_extra_inputs = v_extra_inputs
        self.q_extra_inputs = q_extra_inputs
        self.q_uses_v = q_uses_v
        self.control_loss = control_loss
        self.project_q = project_q
        self.y_init = y_init
        self.v0_init = v0_init
        self.q0_init = q0_init
        self.epochs = epochs
        self.eval_every = eval_every
        self.n_mc = n_mc
        self.mc_chunk = mc_chunk
        self.adam_eps = adam_eps
        self.seed = seed

    def _validate(self):
        if self.market is None or self.utility is None or self.constraint is None:
            raise ValueError("market, utility and constraint are required")
        super()._validate()
        if not (0 < self.y_init[0] <= self.y_init[1]):
            raise ValueError("y_init must be a positive range")
        if self.control_loss not in CONTROL_LOSSES:
            raise ValueError(f"control_loss must be one of {CONTROL_LOSSES}")
        for name in (*self.v_extra_inputs, *self.q_extra_inputs):
            if name not in self.market.feature_names:
                raise ValueError(f"market offers no input feature {name!r}")

    def _build(self, rng):
        m = self.market.m_total
        probe = self.market.features(self.market.initial_state(1))
        width = lambda names: sum(probe[n].shape[1] for n in names)  # noqa: E731
        v_in = 1 + width(self.v_extra_inputs)
        q_in = 1 + width(self.q_extra_inputs) + (m if self.q_uses_v else 0)
        self._vmap = _DualTransform(self.constraint)
        identity = OutputTransform()

        self.z_param_ = dc.Parameter("log_y", np.log(rng.uniform(*self.y_init)))
        self.v0_ = ConstantHead("v0", rng.uniform(*self.v0_init, size=(1, m)), identity)
        self.q0_ = ConstantHead("q2_0", rng.uniform(*self.q0_init, size=(1, m)))
        hid = tuple(self.hidden)
        self.v_heads_ = [
            FeedForwardHead(f"v{i}", v_in, m, hid, identity, self.bn_epsilon, self.bn_momentum, rng)
            for i in range(1, self.N)
        ]
        self.q_heads_ = [
            FeedForwardHead(f"q2_{i}", q_in, m, hid, identity, self.bn_epsilon, self.bn_momentum, rng)
            for i in range(1, self.N)
        ]
        self.q_params_ = [*self.q0_.parameters()]
        for h in self.q_heads_:
            self.q_params_.extend(h.parameters())
        self.bsde_params_ = [self.z_param_, *self.q_params_]
        self.v_param_groups_ = [self.v0_.parameters()] + [h.parameters() for h in self.v_heads_]
        self.q_opt_ = Adam(self.q_params_, eps=self.adam_eps)
        self.y_opt_ = Adam([self.z_param_], eps=self.adam_eps)
        self.control_opts_ = [Adam(g, eps=self.adam_eps) for g in self.v_param_groups_]
        default = {"boundaries": [2000, 5000, 8000], "values": [1e-2, 1e-3, 1e-4, 1e-5]}
        self._bsde_lr = as_schedule(self.bsde_schedule or default)
        self._control_lr = as_schedule(self.control_schedule or self.bsde_schedule or default)
        self._y_lr = as_schedule(self.y_schedule or {"boundaries": [200, 1000, 8000],
                                                     "values": [1e-2, 1e-4, 1e-5, 1e-6]})

    def _v_at(self, tape, i, Y, feats, training):
        if i == 0:
            return self._vmap.apply(self.v0_(tape))
        x = assemble_inputs(tape, Y, feats, self.v_extra_inputs)
        return self._vmap.apply(self.v_heads_[i - 1](x, training))

    def _q_at(self, tape, i, Y, feats, v, training):
        if i == 0:
            return self.q0_(tape)
        x = assemble_inputs(tape, Y, feats, self.q_extra_inputs, v if self.q_uses_v else None)
        return self.q_heads_[i - 1](x, training)

    def _integrand(self, c: Coefficients, p2, q_raw):
        """Effective ``q2`` and, when projecting, the candidate control it encodes."""
        if not self.project_q:
            return q_raw, None
        pi_hat = self.constraint.h_K_value(c.sigma_inv_T_rows(q_raw) / p2)
        return p2 * c.pi_sigma(pi_hat), pi_hat

    def _p2_step(self, p2, q2, pi_hat, delta, c, dB, dt, sv):
        if pi_hat is None:
            return step_dual_adjoint(p2, q2, delta, c, dB, dt, sv)
        return step_wealth(p2, pi_hat, c, dB, dt)

    def dual_forward(self, tape, noise, path: PathCoefficients, training: bool) -> DualTrajectory:
        b = noise.shape[0]
        dt = self.dt
        Y = dc.exp(tape.parameter(self.z_param_))
        p2 = tape.constant(np.full((1, 1), float(self.x0)))
        traj = DualTrajectory([Y], [p2], [], [])
        for i in range(self.N):
            feats = path.features[i]
            Yin = Y if Y.shape[0] == b else dc.broadcast_row(Y, b)
            v = self._v_at(tape, i, Yin, feats, training)
            c = path.coeffs[i]
            q2, pi_hat = self._integrand(c, p2, self._q_at(tape, i, Yin, feats, v, training))
            dB = noise[:, :, i]
            sv = c.sigma_inv_rows(v)
            delta = self.constraint.support_delta_value(v)
            Y, p2 = step_dual(Y, v, delta, c, dB, dt, sv), self._p2_step(p2, q2, pi_hat, delta, c, dB, dt, sv)
            traj.Y.append(Y)
            traj.p2.append(p2)
            traj.v.append(v)
            traj.q2.append(q2)
        return traj

    def _training_step(self, noise, path, k):
        dt = self.dt
        tape = dc.Tape(watch=self.bsde_params_)
        traj = self.dual_forward(tape, noise, path, training=True)
        loss1 = dual_loss_bsde(self.utility, traj.Y[-1], traj.p2[-1])
        if np.isfinite(loss1.item()):
            grads = tape.backward(loss1, self.bsde_params_)
            self.q_opt_.step(grads, self._bsde_lr(k))
            self.y_opt_.step(grads, self._y_lr(k))
        else:
            self.n_nonfinite_ += 1
        del tape, traj

        lr = self._control_lr(k)
        b = noise.shape[0]
        Y = np.full((b, 1), float(np.exp(self.z_param_.value[0, 0])))
        p2 = np.full((1, 1), float(self.x0))
        for i in range(self.N):
            tape = dc.Tape(watch=self.v_param_groups_[i])
            feats = path.features[i]
            Yv = tape.constant(Y)
            v = self._v_at(tape, i, Yv, feats, True)
            c = path.coeffs[i]
            p2v = tape.constant(p2)
            q2, pi_hat = self._integrand(c, p2v, self._q_at(tape, i, Yv, feats, tape.constant(v.data), True))
            loss = dual_loss_control(self.constraint, c, p2v, v, q2, kind=self.control_loss)
            if np.isfinite(loss.item()):
                self.control_opts_[i].step(tape.backward(loss, self.v_param_groups_[i]), lr)
            else:
                self.n_nonfinite_ += 1
            if i < self.N - 1:
                vd = v.data
                if i == 0:
                    with dc.no_grad() as t0:
                        vd = self._v_at(t0, 0, None, feats, False).data
                dB = noise[:, :, i]
                sv = c.sigma_inv_rows(vd)
                delta = (vd * self.constraint.dual_linear_cost()).sum(axis=1, keepdims=True)
                pi_d = None if pi_hat is None else pi_hat.data
                Y, p2 = step_dual(Y, vd, delta, c, dB, dt, sv), self._p2_step(p2, q2.data, pi_d, delta, c, dB, dt, sv)

    def _scalar(self) -> float:
        return float(np.exp(self.z_param_.value[0, 0]))

    @property
    def y_(self) -> float:
        self._check_fitted()
        return self._scalar()

    @property
    def n_nonfinite_total_(self) -> int:
        return (self.n_nonfinite_ + self.q_opt_.n_skipped + self.y_opt_.n_skipped
                + sum(o.n_skipped for o in self.control_opts_))

    def heads(self) -> list:
        self._check_fitted()
        return [ParameterEntry(self.z_param_), self.v0_, *self.v_heads_, self.q0_, *self.q_heads_]

    def _upper_offset(self) -> float:
        return float(self.x0) * self._scalar()

    def _bounds_chunk(self, noise, path):
        with dc.no_grad() as tape:
            traj = self.dual_forward(tape, noise, path, training=False)
        b = noise.shape[0]
        dt = self.dt
        X = np.full((b, 1), float(self.x0))
        dropped = np.zeros(b, dtype=bool)
        for i in range(self.N):
            c = path.coeffs[i]
            p2 = np.broadcast_to(traj.p2[i].data, (b, 1))
            pi, bad = candidate_primal_control(p2, traj.q2[i].data, c, self.constraint)
            dropped |= bad
            X = step_wealth(X, pi, c, noise[:, :, i], dt)
        lower = self.utility.u(X[:, 0])
        upper = self.utility.fenchel_guarded(traj.Y[-1].data[:, 0])
        keep = ~dropped
        return lower[keep], upper[keep], int(dropped.sum())

    def predict(self, X):
        """Primal candidate controls ``(n, N, m_total)`` implied by the dual heads."""
        self._check_fitted()
        noise = check_noise(X, self.market.m_total, self.N)
        path = self.market.path(noise, self.T)
        with dc.no_grad() as tape:
            traj = self.dual_forward(tape, noise, path, training=False)
        n = noise.shape[0]
        out = []
        for i in range(self.N):
            p2 = np.broadcast_to(traj.p2[i].data, (n, 1))
            out.append(candidate_primal_control(p2, traj.q2[i].data, path.coeffs[i], self.constraint)[0])
        return np.stack([np.broadcast_to(o, (n, o.shape[1])) for o in out], axis=1)

    def transform(self, X):
        """Dual state paths ``(n, N + 1)``."""
        self._check_fitted()
        noise = check_noise(X, self.market.m_total, self.N)
        with dc.no_grad() as tape:
            traj = self.dual_forward(tape, noise, self.market.path(noise, self.T), training=False)
        n = noise.shape[0]
        return np.concatenate([np.broadcast_to(y.data, (n, 1)) for y in traj.Y], axis=1)

    def score(self, X=None, y=None) -> float:
        """Dual lower bound ``E U(X^_N)``."""
        self._check_fitted()
        if X is None:
            return self.estimate_bounds(key=self.n_steps_).lower
        return self.estimate_bounds(noise=X).lower
