"""Command line entry point: ``deepsmp run | oracle | gradcheck | configs``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import yaml
from pydantic import ValidationError

from .config import ExperimentConfig, bundled_configs, load_config

EXIT_INVALID_CONFIG = 2
EXIT_NONFINITE = 3

log = logging.getLogger("deepsmp")


class ConfigError(Exception):
    pass


def _load(ref: str) -> ExperimentConfig:
    try:
        return load_config(ref)
    except (ValidationError, yaml.YAMLError, ValueError, FileNotFoundError) as exc:
        raise ConfigError(str(exc)) from exc


def _solver_summary(est, scalar_name: str) -> dict:
    b = est.bounds_
    return {
        "steps": int(est.n_steps_),
        scalar_name: est._scalar(),
        "bounds": b.to_dict(),
        "gap": b.gap,
        "n_nonfinite": int(est.n_nonfinite_total_),
    }


def _run_solver(kind: str, cfg: ExperimentConfig, out: Path, summary: dict, timing: dict) -> int:
    from .nn import save_params

    est = cfg.build_primal() if kind == "primal" else cfg.build_dual()
    scalar = "p0" if kind == "primal" else "y"
    est.fit()
    est.history_.write_bounds_csv(out / f"history_{kind}.csv")
    est.history_.write_steps_csv(out / f"steps_{kind}.csv")
    if cfg.save_snapshots:
        save_params(est.heads(), out / f"params_{kind}.json")
    summary[kind] = _solver_summary(est, scalar)
    timing[kind] = {"train_seconds": est.train_seconds_,
                    "seconds_per_step": est.train_seconds_ / max(est.n_steps_, 1)}
    b = est.bounds_
    lo, up = est._bound_names
    print(f"{kind}: {scalar}={est._scalar():.6f} {lo}={b.lower:.6f} (+-{b.lower_stderr:.1e}) "
          f"{up}={b.upper:.6f} (+-{b.upper_stderr:.1e})")
    return int(est.n_nonfinite_total_)


def cmd_run(args) -> int:
    cfg = _load(args.config)
    try:
        cfg = cfg.with_overrides(seed=args.seed, steps=args.steps, eval_every=args.eval_every, n_mc=args.n_mc)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out or f"runs/{cfg.name}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_yaml())

    summary: dict = {"name": cfg.name, "seed": cfg.seed, "solver": cfg.solver}
    timing: dict = {}
    start = time.perf_counter()
    nonfinite = 0
    kinds = {"primal": ["primal"], "dual": ["dual"], "both": ["primal", "dual"], "none": []}[cfg.solver]
    for kind in kinds:
        nonfinite += _run_solver(kind, cfg, out, summary, timing)
    if cfg.oracle.enabled:
        from .oracle import log_dual_value

        summary["oracle"] = log_dual_value(cfg.build_oracle())
        print(f"oracle: {summary['oracle']:.8f}")
    summary["nonfinite_exceeded"] = nonfinite > cfg.nan_threshold
    timing["total_seconds"] = time.perf_counter() - start

    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
    if summary["nonfinite_exceeded"]:
        print(f"error: {nonfinite} non-finite updates exceed nan_threshold={cfg.nan_threshold}", file=sys.stderr)
        return EXIT_NONFINITE
    return 0


def cmd_oracle(args) -> int:
    from ._base import fmt6
    from .oracle import OracleConvergenceError, log_dual_value

    cfg = _load(args.config)
    if cfg.market.kind != "deterministic" or cfg.utility.kind != "log":
        raise ConfigError("the oracle needs a deterministic market and the log utility")
    overrides = {k: v for k, v in (("grid", args.grid), ("tol", args.tol)) if v is not None}
    data = cfg.model_dump(mode="json")
    data["oracle"].update(overrides)
    cfg = ExperimentConfig.model_validate(data)
    try:
        value, times, v, obj = log_dual_value(cfg.build_oracle(), return_points=True)
    except OracleConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"{value:.10f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "objective", *(f"v{j + 1}" for j in range(v.shape[1]))])
            for t, o, row in zip(times, obj, v):
                w.writerow([fmt6(t), fmt6(o), *(fmt6(x) for x in row)])
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import TOLERANCE, broken_case, default_cases, run_suite

    cases = default_cases(args.seed)
    if args.inject_failure:
        cases.append(broken_case())
    worst = 0.0
    for name, err in run_suite(cases, h=args.h):
        flag = "ok" if err <= TOLERANCE else "FAIL"
        print(f"{name:<16} {err:.3e} {flag}")
        worst = max(worst, err)
    print(f"max error {worst:.3e} (tolerance {TOLERANCE:.0e})")
    return 0 if worst <= TOLERANCE else 1


def cmd_configs(args) -> int:
    for name in sorted(bundled_configs()):
        print(name)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepsmp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log bound estimates during training")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train the solvers named in a config")
    run.add_argument("config", help="YAML path or bundled config name")
    run.add_argument("--seed", type=int)
    run.add_argument("--steps", type=int)
    run.add_argument("--eval-every", type=int)
    run.add_argument("--n-mc", type=int)
    run.add_argument("--out", help="output directory (default runs/<name>)")
    run.set_defaults(func=cmd_run)

    orc = sub.add_parser("oracle", help="deterministic log-utility benchmark")
    orc.add_argument("config")
    orc.add_argument("--grid", type=int)
    orc.add_argument("--tol", type=float)
    orc.add_argument("--csv", help="write per-point minimizers here")
    orc.set_defaults(func=cmd_oracle)

    gc = sub.add_parser("gradcheck", help="finite-difference check of the tape primitives")
    gc.add_argument("--h", type=float, default=1e-4)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--inject-failure", action="store_true", help="add a primitive with a wrong adjoint")
    gc.set_defaults(func=cmd_gradcheck)

    ls = sub.add_parser("configs", help="list bundled configs")
    ls.set_defaults(func=cmd_configs)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID_CONFIG


if __name__ == "__main__":
    sys.exit(main())
