"""Experiment configuration: a YAML tree validated with pydantic.

Unknown keys are rejected everywhere.  ``load_config`` accepts a path or the
name of a bundled config (see ``bundled_configs``).
"""
from __future__ import annotations

import math
from importlib import resources
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .constraints import ConstraintSet, FloorBox, FullSpace, NonNegOrthant, ZeroPadded
from .market import (
    DeterministicMarkovian,
    HestonAugmented,
    MarketModel,
    PathDependentMomentum,
    VasicekAugmented,
)
from .optim import PiecewiseSchedule
from .utility import LogUtility, PowerUtility, Utility


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ScheduleSpec(_Strict):
    boundaries: list[int] = []
    values: list[float]

    @model_validator(mode="after")
    def _check(self):
        PiecewiseSchedule(tuple(self.boundaries), tuple(self.values))
        return self

    def build(self) -> PiecewiseSchedule:
        return PiecewiseSchedule(tuple(self.boundaries), tuple(self.values))


# -- markets ---------------------------------------------------------------------


class DeterministicSpec(_Strict):
    kind: Literal["deterministic"] = "deterministic"
    m: int = Field(30, ge=1)
    r_a: float = 0.06
    r_b: float = 0.5
    mu_c: float = 0.07
    mu_d: float = 0.02
    mu_e: float = 15.0
    mu_freq: float = 4.0 * math.pi
    sigma_kind: Literal["one_plus_sqrt", "inverse_one_plus", "constant"] = "one_plus_sqrt"
    sigma_g: float = Field(0.3, gt=0)
    sigma_off: float = 0.1

    def build(self) -> MarketModel:
        return DeterministicMarkovian(**self.model_dump(exclude={"kind"}))


class MomentumSpec(_Strict):
    kind: Literal["momentum"] = "momentum"
    m: int = Field(5, ge=1)
    r: float = 0.1
    sigma_diag: float = Field(0.2, gt=0)
    sigma_off: float = 0.05
    mu_high: float = 0.12
    mu_low: float = 0.08
    s0: float = Field(1.0, gt=0)
    quadrature: Literal["left", "trapezoid"] = "left"

    def build(self) -> MarketModel:
        return PathDependentMomentum(**self.model_dump(exclude={"kind"}))


class HestonSpec(_Strict):
    kind: Literal["heston"] = "heston"
    r: float = 0.05
    A: float = 0.5
    kappa: float = Field(10.0, gt=0)
    theta_nu: float = Field(0.05, gt=0)
    xi: float = Field(0.5, gt=0)
    rho: float = Field(-0.5, ge=-1, le=1)
    nu0: float = Field(0.5, gt=0)
    truncation: float = Field(1e-5, gt=0)

    @model_validator(mode="after")
    def _feller(self):
        if not 2 * self.kappa * self.theta_nu > self.xi**2:
            raise ValueError("Feller condition 2*kappa*theta_nu > xi^2 is violated")
        return self

    def build(self) -> MarketModel:
        return HestonAugmented(**self.model_dump(exclude={"kind"}))


class VasicekSpec(_Strict):
    kind: Literal["vasicek"] = "vasicek"
    m: int = Field(30, ge=1)
    mu_c: float = 0.06
    mu_d: float = 0.01
    mu_e: float = 15.0
    mu_freq: float = 4.0 * math.pi
    sigma_kind: Literal["one_plus_sqrt", "inverse_one_plus", "constant"] = "inverse_one_plus"
    sigma_g: float = Field(0.3, gt=0)
    sigma_off: float = 0.05
    r0: float = 0.05
    alpha: float = 5.0
    beta: float = 0.05
    gamma: float = 0.05

    def build(self) -> MarketModel:
        d = self.model_dump(exclude={"kind", "r0", "alpha", "beta", "gamma"})
        base = DeterministicMarkovian(r_a=self.r0, r_b=0.0, **d)
        return VasicekAugmented(base=base, r0=self.r0, alpha=self.alpha, beta=self.beta, gamma=self.gamma)


MarketSpec = Annotated[
    Union[DeterministicSpec, MomentumSpec, HestonSpec, VasicekSpec], Field(discriminator="kind")
]

MARKET_FEATURES = {
    "deterministic": (),
    "momentum": PathDependentMomentum.feature_names,
    "heston": HestonAugmented.feature_names,
    "vasicek": VasicekAugmented.feature_names,
}


class UtilitySpec(_Strict):
    kind: Literal["log", "power"] = "log"
    p: Optional[float] = None

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "power":
            if self.p is None or not 0 < self.p < 1:
                raise ValueError("power utility needs 0 < p < 1")
        elif self.p is not None:
            raise ValueError("p is only used by the power utility")
        return self

    def build(self) -> Utility:
        return LogUtility() if self.kind == "log" else PowerUtility(self.p)


class ConstraintSpec(_Strict):
    """Constraint on the traded coordinates; completion stocks are padded automatically."""

    kind: Literal["full_space", "nonneg_orthant", "floor_box"] = "full_space"
    kappa: Optional[float] = None

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "floor_box":
            if self.kappa is None or self.kappa <= 0:
                raise ValueError("floor_box needs kappa > 0")
        elif self.kappa is not None:
            raise ValueError("kappa is only used by floor_box")
        return self

    def build(self, market: MarketModel) -> ConstraintSet:
        k = market.n_traded
        base = {"full_space": lambda: FullSpace(k), "nonneg_orthant": lambda: NonNegOrthant(k),
                "floor_box": lambda: FloorBox(self.kappa, k)}[self.kind]()
        if market.m_total > k:
            return ZeroPadded(base, market.m_total - k)
        return base


class _TrainSpec(_Strict):
    steps: int = Field(10000, ge=0)
    batch_size: int = Field(64, ge=1)
    eval_every: int = Field(200, ge=0)
    n_mc: int = Field(100_000, ge=2)
    mc_chunk: int = Field(20_000, ge=1)
    epochs: Optional[int] = Field(None, ge=1)
    bn_epsilon: float = Field(100.0, gt=0)
    bn_momentum: float = Field(0.99, gt=0, lt=1)
    hidden: list[int] = [11, 11]
    adam_eps: float = Field(1e-7, gt=0)
    q_extra_inputs: list[str] = []

    @model_validator(mode="after")
    def _epochs(self):
        if self.epochs is not None and self.steps % self.epochs:
            raise ValueError(f"steps ({self.steps}) must be a multiple of epochs ({self.epochs})")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden layer sizes must be positive")
        return self


class PrimalSpec(_TrainSpec):
    pi_arch: Literal["classical", "semi_recurrent"] = "classical"
    q_arch: Literal["classical", "semi_recurrent"] = "classical"
    pi_extra_inputs: list[str] = []
    bsde_schedule: ScheduleSpec = ScheduleSpec(boundaries=[1000, 3000, 8000], values=[1e-2, 1e-3, 1e-4, 1e-5])
    control_schedule: ScheduleSpec = ScheduleSpec(boundaries=[1000, 3000, 8000], values=[1e-3, 1e-4, 1e-5, 1e-6])
    p0_init: tuple[float, float] = (-0.4, -0.2)
    pi0_init: tuple[float, float] = (0.0, 0.2)
    q0_init: tuple[float, float] = (-0.1, 0.1)


class DualSpec(_TrainSpec):
    v_extra_inputs: list[str] = []
    q_uses_v: bool = False
    control_loss: Literal["squared", "linear"] = "linear"
    project_q: bool = True
    bsde_schedule: ScheduleSpec = ScheduleSpec(boundaries=[2000, 5000, 8000], values=[1e-2, 1e-3, 1e-4, 1e-5])
    control_schedule: ScheduleSpec = ScheduleSpec(boundaries=[2000, 5000, 8000], values=[1e-2, 1e-3, 1e-4, 1e-5])
    y_schedule: ScheduleSpec = ScheduleSpec(boundaries=[200, 1000, 8000], values=[1e-2, 1e-4, 1e-5, 1e-6])
    y_init: tuple[float, float] = (0.2, 0.4)
    v0_init: tuple[float, float] = (0.0, 0.2)
    q0_init: tuple[float, float] = (-0.1, 0.1)


class OracleSpec(_Strict):
    enabled: bool = False
    grid: int = Field(1000, ge=1)
    tol: float = Field(1e-12, gt=0)
    rule: Literal["left", "midpoint"] = "left"


class ExperimentConfig(_Strict):
    name: str = "experiment"
    solver: Literal["primal", "dual", "both", "none"] = "primal"
    seed: int = 0
    x0: float = Field(10.0, gt=0)
    T: float = Field(0.5, gt=0)
    N: int = Field(10, ge=1)
    market: MarketSpec = DeterministicSpec()
    utility: UtilitySpec = UtilitySpec()
    constraint: ConstraintSpec = ConstraintSpec()
    primal: PrimalSpec = PrimalSpec()
    dual: DualSpec = DualSpec()
    oracle: OracleSpec = OracleSpec()
    nan_threshold: int = Field(100, ge=0)
    save_snapshots: bool = False

    @model_validator(mode="after")
    def _cross(self):
        feats = MARKET_FEATURES[self.market.kind]
        for section, names in (
            ("primal.pi_extra_inputs", self.primal.pi_extra_inputs),
            ("primal.q_extra_inputs", self.primal.q_extra_inputs),
            ("dual.v_extra_inputs", self.dual.v_extra_inputs),
            ("dual.q_extra_inputs", self.dual.q_extra_inputs),
        ):
            unknown = [n for n in names if n not in feats]
            if unknown:
                raise ValueError(f"{section}: market {self.market.kind!r} has no features {unknown}")
        if self.oracle.enabled:
            if self.market.kind != "deterministic":
                raise ValueError("oracle.enabled needs a deterministic market")
            if self.utility.kind != "log":
                raise ValueError("oracle.enabled needs the log utility")
        return self

    # -- builders ------------------------------------------------------------

    def build_market(self) -> MarketModel:
        return self.market.build()

    def build_primal(self):
        from .solver_primal import DeepPrimalSMP

        market = self.build_market()
        p = self.primal
        return DeepPrimalSMP(
            market=market, utility=self.utility.build(), constraint=self.constraint.build(market),
            x0=self.x0, T=self.T, N=self.N, batch_size=p.batch_size, steps=p.steps,
            bsde_schedule=p.bsde_schedule.build(), control_schedule=p.control_schedule.build(),
            bn_epsilon=p.bn_epsilon, bn_momentum=p.bn_momentum, hidden=tuple(p.hidden),
            pi_arch=p.pi_arch, q_arch=p.q_arch, pi_extra_inputs=tuple(p.pi_extra_inputs),
            q_extra_inputs=tuple(p.q_extra_inputs), p0_init=p.p0_init, pi0_init=p.pi0_init, q0_init=p.q0_init,
            epochs=p.epochs, eval_every=p.eval_every, n_mc=p.n_mc, mc_chunk=p.mc_chunk, adam_eps=p.adam_eps,
            seed=self.seed,
        )

    def build_dual(self):
        from .solver_dual import DeepDualSMP

        market = self.build_market()
        d = self.dual
        return DeepDualSMP(
            market=market, utility=self.utility.build(), constraint=self.constraint.build(market),
            x0=self.x0, T=self.T, N=self.N, batch_size=d.batch_size, steps=d.steps,
            bsde_schedule=d.bsde_schedule.build(), control_schedule=d.control_schedule.build(),
            y_schedule=d.y_schedule.build(), bn_epsilon=d.bn_epsilon, bn_momentum=d.bn_momentum,
            hidden=tuple(d.hidden), v_extra_inputs=tuple(d.v_extra_inputs), q_extra_inputs=tuple(d.q_extra_inputs),
            q_uses_v=d.q_uses_v, control_loss=d.control_loss, project_q=d.project_q, y_init=d.y_init,
            v0_init=d.v0_init, q0_init=d.q0_init, epochs=d.epochs,
            eval_every=d.eval_every, n_mc=d.n_mc, mc_chunk=d.mc_chunk, adam_eps=d.adam_eps, seed=self.seed,
        )

    def build_oracle(self):
        from .oracle import OracleConfig

        market = self.build_market()
        o = self.oracle
        return OracleConfig(market, self.constraint.build(market), self.x0, self.T, o.grid, o.tol, rule=o.rule)

    def with_overrides(self, seed: int | None = None, steps: int | None = None, **train) -> "ExperimentConfig":
        """Copy with ``seed``/``steps`` (and other training fields) replaced in both solver sections."""
        data = self.model_dump(mode="json")
        if seed is not None:
            data["seed"] = seed
        for section in ("primal", "dual"):
            if steps is not None:
                data[section]["steps"] = steps
                if data[section]["epochs"] and steps % data[section]["epochs"]:
                    data[section]["epochs"] = None
            for key, value in train.items():
                if value is not None:
                    data[section][key] = value
        return ExperimentConfig.model_validate(data)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)


def parse_config(text: str) -> ExperimentConfig:
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ValueError("config must be a mapping at the top level")
    return ExperimentConfig.model_validate(data)


def bundled_configs() -> dict[str, Path]:
    root = resources.files("deepsmp") / "configs"
    return {Path(p.name).stem: Path(str(p)) for p in root.iterdir() if p.name.endswith(".yaml")}


def resolve_config_path(ref: str | Path) -> Path:
    path = Path(ref)
    if path.exists():
        return path
    bundled = bundled_configs()
    if str(ref) in bundled:
        return bundled[str(ref)]
    raise FileNotFoundError(f"no config file or bundled config named {str(ref)!r}")


def load_config(ref: str | Path) -> ExperimentConfig:
    return parse_config(resolve_config_path(ref).read_text())
