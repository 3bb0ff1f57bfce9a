"""Command line entry point: ``nashot {discrete-solve,continuum-solve,converge,pde-check}``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .continuum import GBound, check_density_cap, holder_seminorm, minimize_f
from .discrete import alpha_bounds_check, objective_np1, ratio_residual, solve_nash, \
    verify_cyclical_monotonicity
from .errors import NashOTError
from .harness import ExperimentConfig, player_seed, run_convergence, sample_players, w2_between, write_run
from .measure import CostSpec, relative_entropy
from .pde import (euler_lagrange_residual, functional_g, monge_ampere_residual, potential_from_beta,
                  pushforward, w1_distance)


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json(Path(args.config).read_text()) if args.config else ExperimentConfig()
    return cfg.with_overrides(seed=args.seed, tol=args.tol, resolution=args.resolution)


def _emit(report: dict, out: str | None, name: str, extra: dict | None = None):
    text = json.dumps(report, indent=2, default=float)
    print(text)
    if out:
        d = Path(out)
        d.mkdir(parents=True, exist_ok=True)
        (d / name).write_text(text + "\n")
        for fname, content in (extra or {}).items():
            (d / fname).write_text(content)


def cmd_discrete(args) -> int:
    cfg = _load_config(args)
    n = args.n or cfg.n_schedule[-1]
    mu = cfg.mu.measure(cfg.x_box)
    nu = cfg.nu.measure(cfg.y_box)
    cost = CostSpec.quadratic(cfg.x_box, cfg.y_box)
    players = sample_players(mu, n, player_seed(cfg.seed, n))
    plan = solve_nash(players, nu, cost, tol=cfg.nash_tol)
    mono = verify_cyclical_monotonicity(plan, cost, seed=cfg.seed)
    bounds = alpha_bounds_check(plan, cost)
    obj = objective_np1(plan, players, cost)
    report = {
        "N": n, "objective": obj, "ratio_residual": ratio_residual(plan, cost),
        "monotonicity_violations": len(mono.violations), "alpha_bounds_passed": bounds.passed,
        "alpha_min": float(plan.alpha.min()), "alpha_max": float(plan.alpha.max()),
    }
    _emit(report, args.out, "discrete.json", {"plan.json": plan.to_json(obj)})
    return 0 if mono.passed and bounds.passed else 1


def _holder_range(box):
    return float(box.widths.max()), 0.25 * float((np.array(box.hi) - np.array(box.lo)).min())


def cmd_continuum(args) -> int:
    cfg = _load_config(args)
    mu = cfg.mu.measure(cfg.x_box)
    nu = cfg.nu.measure(cfg.y_box)
    cost = CostSpec.quadratic(cfg.x_box, cfg.y_box)
    sol = minimize_f(mu, nu, cost, tol=cfg.continuum_tol)
    cap = check_density_cap(sol, nu, GBound.for_cost(cost))
    report = {
        "value": sol.value, "iterations": sol.iterations, "residual": sol.residual,
        "maxDensityRatio": cap.max_ratio, "densityCap": cap.cap,
        "holderSeminorm": holder_seminorm(sol.beta_hat, nu, _holder_range(nu.box)),
    }
    _emit(report, args.out, "continuum.json", {"beta_hat.csv": sol.beta_hat.to_csv()})
    return 0 if cap.passed else 1


def cmd_converge(args) -> int:
    cfg = _load_config(args)
    out = args.out or cfg.out_dir
    if not out:
        print("converge needs --out DIR (or out_dir in the config)", file=sys.stderr)
        return 2
    run = run_convergence(cfg)
    write_run(run, out, include_timing=args.timing)
    print(json.dumps({"checks": run.checks(), "passed": run.passed, "out": str(out)}, indent=2))
    return 0 if run.passed else 1


def cmd_pde(args) -> int:
    cfg = _load_config(args)
    mu = cfg.mu.measure(cfg.x_box)
    nu = cfg.nu.measure(cfg.y_box)
    cost = CostSpec.quadratic(cfg.x_box, cfg.y_box)
    sol = minimize_f(mu, nu, cost, tol=cfg.continuum_tol)
    phi = potential_from_beta(mu, sol.beta_hat)
    pushed = pushforward(phi, mu, nu.box)
    w1 = w1_distance(pushed, sol.beta_hat)
    two_cells = 2 * float(nu.box.widths.max())
    g = functional_g(phi, mu, nu)
    report = {
        "G": g,
        "H_plus_W2_minus_log_mu": relative_entropy(pushed, nu) + w2_between(mu, pushed) - mu.log_mean(),
        "value": sol.value,
        "mongeAmpereResidual": monge_ampere_residual(phi, mu, sol.beta_hat),
        "pushforwardW1": w1, "twoCells": two_cells,
    }
    if min(mu.box.shape) >= 8:
        report["eulerLagrangeResidual"] = euler_lagrange_residual(phi, mu, nu)
    _emit(report, args.out, "pde.json", {"phi.json": phi.to_json()})
    return 0 if w1 <= two_cells else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nashot", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, help_ in (("discrete-solve", cmd_discrete, "solve the N-player Nash problem"),
                            ("continuum-solve", cmd_continuum, "minimize entropy plus transport cost"),
                            ("converge", cmd_converge, "run the N sweep and write CSV + manifest"),
                            ("pde-check", cmd_pde, "potential-side residuals of the continuum minimizer")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON ExperimentConfig")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--tol", type=float)
        p.add_argument("--resolution", type=int)
        p.set_defaults(func=fn)
        if name == "discrete-solve":
            p.add_argument("--n", type=int, help="number of players (default: last of the schedule)")
        if name == "converge":
            p.add_argument("--timing", action="store_true", help="write wall times into the CSV")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NashOTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
