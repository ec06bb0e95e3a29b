"""Deep primal SMP solver.

A trainable scalar ``p0`` and per-time heads for the control ``pi`` and the
adjoint integrand ``q`` drive a joint Euler simulation of wealth ``X`` and
adjoint ``p``.  The BSDE loss pins ``p_N`` to ``-U'(X_N)``; the control loss
at each step is the Hamiltonian derivative term ``pi^T sigma (p theta + q)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from ._base import SolverBase, assemble_inputs, as_schedule, check_noise
from .constraints import ConstraintSet, FloorBox, OutputTransform, ZeroPadded
from .market import Coefficients, MarketModel, PathCoefficients, step_adjoint, step_wealth
from .nn import ConstantHead, FeedForwardHead, ParameterEntry, forward_semi_recurrent
from .optim import Adam
from .utility import Utility

CLASSICAL, SEMI_RECURRENT = "classical", "semi_recurrent"


@dataclass
class Trajectory:
    X: list[dc.Value]
    p: list[dc.Value]
    pi: list[dc.Value]
    q: list[dc.Value]


def loss_bsde(utility: Utility, X_N: dc.Value, p_N: dc.Value) -> dc.Value:
    """Batch mean of ``|p_N + U'(X_N)|^2``."""
    return dc.mean_rows(dc.square(p_N + utility.u_prime_value(X_N)))


def loss_control(coeffs: Coefficients, pi: dc.Value, p: dc.Value, q: dc.Value, pi_sigma=None) -> dc.Value:
    """Batch mean of ``pi^T sigma (p theta + q)``."""
    ps = coeffs.pi_sigma(pi) if pi_sigma is None else pi_sigma
    return dc.mean_rows(dc.sum_cols(ps * (p * coeffs.theta + q)))


def _base_constraint(constraint: ConstraintSet) -> ConstraintSet:
    return constraint.base if isinstance(constraint, ZeroPadded) else constraint


class DeepPrimalSMP(SolverBase):
    """Deep primal SMP estimator.

    ``fit`` trains the networks (optionally on a fixed increment dataset ``X``
    of shape ``(n, m_total, N)``), ``predict`` maps increments to controls along
    the simulated paths, ``transform`` to wealth paths, and ``score`` returns
    the lower bound ``E U(X_N)``.
    """

    _scalar_name = "p0"
    _bound_names = ("V_l", "V_u")

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
        bn_epsilon: float = 100.0,
        bn_momentum: float = 0.99,
        hidden: tuple = (11, 11),
        pi_arch: str = CLASSICAL,
        q_arch: str = CLASSICAL,
        pi_extra_inputs: tuple = (),
        q_extra_inputs: tuple = (),
        p0_init: tuple = (-0.4, -0.2),
        pi0_init: tuple = (0.0, 0.2),
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
        self.bn_epsilon = bn_epsilon
        self.bn_momentum = bn_momentum
        self.hidden = hidden
        self.pi_arch = pi_arch
        self.q_arch = q_arch
        self.pi_extra_inputs = pi_extra_inputs
        self.q_extra_inputs = q_extra_inputs
        self.p0_init = p0_init
        self.pi0_init = pi0_init
        self.q0_init = q0_init
        self.epochs = epochs
        self.eval_every = eval_every
        self.n_mc = n_mc
        self.mc_chunk = mc_chunk
        self.adam_eps = adam_eps
        self.seed = seed

    # -- construction --------------------------------------------------------

    def _validate(self):
        if self.market is None or self.utility is None or self.constraint is None:
            raise ValueError("market, utility and constraint are required")
        super()._validate()
        for arch in (self.pi_arch, self.q_arch):
            if arch not in (CLASSICAL, SEMI_RECURRENT):
                raise ValueError(f"unknown architecture {arch!r}")
        for name in (*self.pi_extra_inputs, *self.q_extra_inputs):
            if name not in self.market.feature_names:
                raise ValueError(f"market offers no input feature {name!r}")

    def _feature_width(self, names, path_probe) -> int:
        return sum(path_probe[n].shape[1] for n in names)

    def _build(self, rng: np.random.Generator) -> None:
        market, cons = self.market, self.constraint
        m, k = market.m_total, market.n_traded
        base = _base_constraint(cons)
        probe = market.features(market.initial_state(1))
        pi_in = 1 + self._feature_width(self.pi_extra_inputs, probe) + (k if self.pi_arch == SEMI_RECURRENT else 0)
        q_in = 1 + self._feature_width(self.q_extra_inputs, probe) + (m if self.q_arch == SEMI_RECURRENT else 0)

        self.p0_param_ = dc.Parameter("p0", rng.uniform(*self.p0_init))
        t0 = base.primal_transform("t0")
        floor = -t0.kappa if t0.kind == "clamp_floor" else None
        self.pi0_ = ConstantHead("pi0", rng.uniform(*self.pi0_init, size=(1, k)), t0, floor)
        self.pi0_.project()
        self.q0_ = ConstantHead("q0", rng.uniform(*self.q0_init, size=(1, m)))
        later = base.primal_transform("later")
        hid = tuple(self.hidden)
        self.pi_heads_ = [
            FeedForwardHead(f"pi{i}", pi_in, k, hid, later, self.bn_epsilon, self.bn_momentum, rng)
            for i in range(1, self.N)
        ]
        self.q_heads_ = [
            FeedForwardHead(f"q{i}", q_in, m, hid, OutputTransform(), self.bn_epsilon, self.bn_momentum, rng)
            for i in range(1, self.N)
        ]
        self.bsde_params_ = [self.p0_param_, *self.q0_.parameters()]
        for h in self.q_heads_:
            self.bsde_params_.extend(h.parameters())
        self.pi_param_groups_ = [self.pi0_.parameters()] + [h.parameters() for h in self.pi_heads_]
        self.bsde_opt_ = Adam(self.bsde_params_, eps=self.adam_eps)
        self.control_opts_ = [Adam(g, eps=self.adam_eps) for g in self.pi_param_groups_]
        self._bsde_lr = as_schedule(self.bsde_schedule or {"boundaries": [1000, 3000, 8000],
                                                            "values": [1e-2, 1e-3, 1e-4, 1e-5]})
        self._control_lr = as_schedule(self.control_schedule or {"boundaries": [1000, 3000, 8000],
                                                                 "values": [1e-3, 1e-4, 1e-5, 1e-6]})

    # -- network evaluation ------------------------------------------------------

    def _pi_at(self, tape, i, X, feats, prev_pi, training):
        """Unpadded control at time index ``i``."""
        if i == 0:
            return self.pi0_(tape)
        head = self.pi_heads_[i - 1]
        x = assemble_inputs(tape, X, feats, self.pi_extra_inputs)
        if self.pi_arch == SEMI_RECURRENT:
            return forward_semi_recurrent(head, x, prev_pi, training)
        return head(x, training)

    def _q_at(self, tape, i, X, feats, prev_q, training):
        if i == 0:
            return self.q0_(tape)
        head = self.q_heads_[i - 1]
        x = assemble_inputs(tape, X, feats, self.q_extra_inputs)
        if self.q_arch == SEMI_RECURRENT:
            return forward_semi_recurrent(head, x, prev_q, training)
        return head(x, training)

    def forward_simulate(self, tape: dc.Tape, noise: np.ndarray, path: PathCoefficients, training: bool) -> Trajectory:
        """Joint Euler simulation of ``(X, p)`` with networked ``(pi, q)``."""
        b = noise.shape[0]
        dt = self.dt
        X = tape.constant(np.full((b, 1), float(self.x0)))
        p = tape.parameter(self.p0_param_)
        traj = Trajectory([X], [p], [], [])
        pi_raw = q = None
        for i in range(self.N):
            feats = path.features[i]
            pi_raw = self._pi_at(tape, i, X, feats, pi_raw, training)
            q = self._q_at(tape, i, X, feats, q, training)
            pi = self._pad(pi_raw)
            c = path.coeffs[i]
            dB = noise[:, :, i]
            ps = c.pi_sigma(pi)
            p = step_adjoint(p, pi, q, c, dB, dt, ps)
            X = step_wealth(X, pi, c, dB, dt, ps)
            traj.X.append(X)
            traj.p.append(p)
            traj.pi.append(pi)
            traj.q.append(q)
        return traj

    # -- training ----------------------------------------------------------------

    def _training_step(self, noise, path, k):
        dt = self.dt
        lr_bsde = self._bsde_lr(k)
        lr_ctrl = self._control_lr(k)

        # substep 1: BSDE loss over {p0, q-heads}
        tape = dc.Tape(watch=self.bsde_params_)
        traj = self.forward_simulate(tape, noise, path, training=True)
        loss1 = loss_bsde(self.utility, traj.X[-1], traj.p[-1])
        if np.isfinite(loss1.item()):
            self.bsde_opt_.step(tape.backward(loss1, self.bsde_params_), lr_bsde)
        else:
            self.n_nonfinite_ += 1
        del tape, traj

        # substep 2: per-step control losses, carrying the state forward once
        b = noise.shape[0]
        X = np.full((b, 1), float(self.x0))
        p = self.p0_param_.value
        pi_raw = q = None
        for i in range(self.N):
            tape = dc.Tape(watch=self.pi_param_groups_[i])
            feats = path.features[i]
            Xv = tape.constant(X)
            prev_pi = None if pi_raw is None else tape.constant(pi_raw)
            prev_q = None if q is None else tape.constant(q)
            pi_v = self._pi_at(tape, i, Xv, feats, prev_pi, True)
            q_v = self._q_at(tape, i, Xv, feats, prev_q, True)
            pi_full = self._pad(pi_v)
            c = path.coeffs[i]
            loss = loss_control(c, pi_full, tape.constant(p), q_v)
            opt = self.control_opts_[i]
            if np.isfinite(loss.item()):
                opt.step(tape.backward(loss, self.pi_param_groups_[i]), lr_ctrl)
            else:
                self.n_nonfinite_ += 1
            if i == 0:
                self.pi0_.project()
                with dc.no_grad() as t0:
                    pi_raw = self.pi0_(t0).data
            else:
                pi_raw = pi_v.data
            q = q_v.data
            if i < self.N - 1:
                dB = noise[:, :, i]
                pi_pad = self._pad_array(pi_raw)
                ps = c.pi_sigma(pi_pad)
                p = step_adjoint(p, pi_pad, q, c, dB, dt, ps)
                X = step_wealth(X, pi_pad, c, dB, dt, ps)

    def _pad_array(self, pi: np.ndarray) -> np.ndarray:
        extra = self.market.m_total - pi.shape[1]
        if extra == 0:
            return pi
        return np.concatenate([pi, np.zeros((pi.shape[0], extra))], axis=1)

    def _scalar(self) -> float:
        return float(self.p0_param_.value[0, 0])

    @property
    def n_nonfinite_total_(self) -> int:
        return self.n_nonfinite_ + self.bsde_opt_.n_skipped + sum(o.n_skipped for o in self.control_opts_)

    # -- bounds ------------------------------------------------------------------

    def _upper_offset(self) -> float:
        return -float(self.x0) * self._scalar()

    def _bounds_chunk(self, noise, path):
        with dc.no_grad() as tape:
            traj = self.forward_simulate(tape, noise, path, training=False)
        X_N = traj.X[-1].data[:, 0]
        p_N = traj.p[-1].data[:, 0]
        return self.utility.u(X_N), self.utility.fenchel_guarded(-p_N), 0

    # -- estimator API -------------------------------------------------------------

    def _inference(self, X):
        self._check_fitted()
        noise = check_noise(X, self.market.m_total, self.N)
        with dc.no_grad() as tape:
            return self.forward_simulate(tape, noise, self.market.path(noise, self.T), training=False)

    def predict(self, X):
        """Controls ``(n, N, m_total)`` along the paths driven by increments ``X``."""
        traj = self._inference(X)
        n = np.asarray(X).shape[0]
        return np.stack([np.broadcast_to(pi.data, (n, pi.shape[1])) for pi in traj.pi], axis=1)

    def transform(self, X):
        """Wealth paths ``(n, N + 1)``."""
        traj = self._inference(X)
        n = np.asarray(X).shape[0]
        return np.concatenate([np.broadcast_to(x.data, (n, 1)) for x in traj.X], axis=1)

    def score(self, X=None, y=None) -> float:
        """Lower bound ``E U(X_N)`` on the given increments, or on fresh Monte-Carlo paths."""
        self._check_fitted()
        if X is None:
            return self.estimate_bounds(key=self.n_steps_).lower
        return float(np.mean(self.utility.u(self.transform(X)[:, -1])))

    @property
    def p0_(self) -> float:
        self._check_fitted()
        return self._scalar()

    def heads(self) -> list:
        """Everything that a parameter snapshot holds."""
        self._check_fitted()
        return [ParameterEntry(self.p0_param_), self.pi0_, *self.pi_heads_, self.q0_, *self.q_heads_]
