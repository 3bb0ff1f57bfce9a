"""Seeded convergence experiment: finite Nash bargaining solutions against the continuum minimizer.

For each N in the schedule: sample N players from μ, solve the Nash problem
on ν, form the averaged pushforward β_N and compare F̂(β_N) = −H_ν(β_N) −
W²(μ, β_N) with the finite value and with the continuum optimum F̂(β̂).
"""
from __future__ import annotations

import csv
import io
import json
import math
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy

from .continuum import minimize_f, objective
from .discrete import AllocationPlan, PlayerSet, objective_np1, solve_nash
from .errors import NashOTError, StructureError
from .laguerre import LaguerreDecomposition, LaguerrePotential, decompose, solve_semidiscrete
from .measure import Box, CostSpec, GridMeasure, density_w2_1d, wasserstein

CSV_COLUMNS = ("N", "F_hat_betaN", "F_tilde_N", "gap", "max_cell_diam", "w2_to_betahat", "wall_ms", "status")
COMPETITOR_SLACK = 1e-9


@dataclass(frozen=True)
class DensitySpec:
    """Named density family: ``uniform``, ``truncated-gaussian`` (center, sigma) or ``piecewise`` (levels)."""

    family: str = "uniform"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in ("uniform", "truncated-gaussian", "piecewise"):
            raise StructureError(f"unknown density family {self.family!r}")
        if self.family == "truncated-gaussian":
            if "center" not in self.params or float(self.params.get("sigma", 0)) <= 0:
                raise StructureError("truncated-gaussian needs a center and sigma > 0")
        if self.family == "piecewise":
            levels = self.params.get("levels")
            if not levels or any(not (0 < float(v) < math.inf) for v in levels):
                raise StructureError("piecewise needs positive finite levels")

    def measure(self, box: Box) -> GridMeasure:
        if self.family == "uniform":
            return GridMeasure.uniform(box)
        if self.family == "truncated-gaussian":
            c = np.broadcast_to(np.asarray(self.params["center"], dtype=float), (box.dim,))
            s = float(self.params["sigma"])
            return GridMeasure.from_function(
                box, lambda *xs: np.exp(-sum((x - ci) ** 2 for x, ci in zip(xs, c)) / (2 * s * s)))
        levels = np.asarray(self.params["levels"], dtype=float)
        lo, hi = box.lo[0], box.hi[0]

        def bands(*xs):
            k = np.clip(((xs[0] - lo) / (hi - lo) * len(levels)).astype(int), 0, len(levels) - 1)
            return levels[k]

        return GridMeasure.from_function(box, bands)

    def to_dict(self) -> dict:
        return {"family": self.family, "params": dict(self.params)}


@dataclass(frozen=True)
class ExperimentConfig:
    x_box: Box = field(default_factory=lambda: Box(0.0, 1.0, 1024))
    y_box: Box = field(default_factory=lambda: Box(0.0, 1.0, 1024))
    mu: DensitySpec = field(default_factory=DensitySpec)
    nu: DensitySpec = field(default_factory=DensitySpec)
    n_schedule: tuple = (4, 16, 64, 256)
    seed: int = 0
    nash_tol: float = 1e-8
    continuum_tol: float = 1e-8
    out_dir: str | None = None

    def __post_init__(self):
        sched = tuple(int(n) for n in self.n_schedule)
        if not sched or sched[0] < 1 or any(b <= a for a, b in zip(sched, sched[1:])):
            raise StructureError("N schedule must be strictly increasing positive integers")
        object.__setattr__(self, "n_schedule", sched)
        if not (self.nash_tol > 0 and self.continuum_tol > 0):
            raise StructureError("tolerances must be positive")
        if self.x_box.dim != self.y_box.dim:
            raise StructureError("X and Y boxes must share a dimension")
        for spec, box in ((self.mu, self.x_box), (self.nu, self.y_box)):
            d = spec.measure(box).density
            if not np.all(d > 0):
                raise StructureError(f"{spec.family} density is not positive on its box")

    def with_overrides(self, seed=None, tol=None, resolution=None) -> "ExperimentConfig":
        kw = asdict_shallow(self)
        if seed is not None:
            kw["seed"] = int(seed)
        if tol is not None:
            kw["nash_tol"] = kw["continuum_tol"] = float(tol)
        if resolution is not None:
            kw["x_box"] = self.x_box.refined(resolution)
            kw["y_box"] = self.y_box.refined(resolution)
        return ExperimentConfig(**kw)

    def to_dict(self) -> dict:
        return {
            "x_box": self.x_box.to_dict(), "y_box": self.y_box.to_dict(),
            "mu": self.mu.to_dict(), "nu": self.nu.to_dict(),
            "n_schedule": list(self.n_schedule), "seed": self.seed,
            "nash_tol": self.nash_tol, "continuum_tol": self.continuum_tol, "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        kw = {}
        for key in ("x_box", "y_box"):
            if key in d:
                kw[key] = Box.from_dict(d[key])
        for key in ("mu", "nu"):
            if key in d:
                kw[key] = DensitySpec(d[key].get("family", "uniform"), dict(d[key].get("params", {})))
        for key in ("n_schedule", "seed", "nash_tol", "continuum_tol", "out_dir"):
            if key in d:
                kw[key] = d[key]
        unknown = set(d) - {"x_box", "y_box", "mu", "nu", "n_schedule", "seed", "nash_tol",
                            "continuum_tol", "out_dir"}
        if unknown:
            raise StructureError(f"unknown config keys {sorted(unknown)}")
        return cls(**kw)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))


def asdict_shallow(cfg: ExperimentConfig) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


@dataclass
class ConvergenceRecord:
    n: int
    f_hat_beta_n: float
    f_tilde_n: float
    gap: float
    max_cell_diameter: float
    w2_to_beta_hat: float
    wall_ms: float
    competitor: float = math.nan  # F̃_N(φ̂_N): value of the cells that push μ_N onto β̂
    step4_bound: float = math.nan
    status: str = "ok"
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


# --------------------------------------------------------------------------- sampling

def sample_players(mu: GridMeasure, n: int, seed: int) -> PlayerSet:
    """n i.i.d. draws from μ by inverse CDF (conditional inverse CDF in 2D)."""
    if n < 1:
        raise StructureError("need n ≥ 1")
    rng = np.random.default_rng(seed)
    box = mu.box

    def draw(k):
        if box.dim == 1:
            return _inverse_cdf(box.axis_edges(0), mu.masses, rng.random(k))[:, None]
        grid = mu.masses.reshape(box.shape)
        xs = _inverse_cdf(box.axis_edges(0), grid.sum(axis=1), rng.random(k))
        row = np.clip(np.searchsorted(box.axis_edges(0), xs, side="right") - 1, 0, box.shape[0] - 1)
        u = rng.random(k)
        ys = np.array([_inverse_cdf(box.axis_edges(1), grid[r], u[j:j + 1])[0] for j, r in enumerate(row)])
        return np.column_stack([xs, ys])

    pts = draw(n)
    for _ in range(100):
        _, first = np.unique(pts, axis=0, return_index=True)
        dup = np.setdiff1d(np.arange(n), first)
        if len(dup) == 0:
            break
        pts[dup] = draw(len(dup))
    return PlayerSet(pts, seed=seed, provenance="sampled")


def _inverse_cdf(edges: np.ndarray, masses: np.ndarray, u: np.ndarray) -> np.ndarray:
    cum = np.concatenate([[0.0], np.cumsum(masses)])
    cum /= cum[-1]
    k = np.clip(np.searchsorted(cum, u, side="right") - 1, 0, len(masses) - 1)
    # cells with a zero CDF step in floating point defer to the next charged cell (the last one past the end)
    charged = np.flatnonzero(np.diff(cum) > 0)
    k = charged[np.minimum(np.searchsorted(charged, k), len(charged) - 1)]
    frac = (u - cum[k]) / (cum[k + 1] - cum[k])
    return edges[k] + np.clip(frac, 0.0, 1.0) * (edges[k + 1] - edges[k])


# --------------------------------------------------------------------------- values

def evaluate_p3(potential: LaguerrePotential, nu: GridMeasure, cost: CostSpec) -> float:
    """(1/N) Σ [ln(N ν(E_i)) + ln((1/ν(E_i)) ∫_{E_i} s(p_i, y) dν)] over the rasterized cells."""
    decomp = decompose(potential, nu)
    return _p3_from_decomposition(decomp, nu, cost)


def _p3_from_decomposition(decomp: LaguerreDecomposition, nu: GridMeasure, cost: CostSpec) -> float:
    pts = decomp.potential.players.points
    n = len(pts)
    ys = nu.box.centers()
    owner = decomp.cell_index
    s_own = np.exp(-_cost_to_owner(cost, pts, ys, owner))
    integral = np.bincount(owner, weights=s_own * nu.masses, minlength=n)
    mass = decomp.cell_mass
    return float(np.mean(np.log(n * mass) + np.log(integral / mass)))


def _cost_to_owner(cost, pts, ys, owner):
    out = np.empty(len(ys))
    for i in np.unique(owner):
        sel = owner == i
        out[sel] = cost.matrix(pts[i:i + 1], ys[sel])[0]
    return out


def plan_from_cells(decomp: LaguerreDecomposition, nu: GridMeasure, cost: CostSpec) -> AllocationPlan:
    """Whole-atom plan giving every grid atom to the owner of its cell."""
    n = decomp.potential.players.n
    mass = np.zeros((n, nu.box.n_cells))
    mass[decomp.cell_index, np.arange(nu.box.n_cells)] = nu.masses
    return AllocationPlan.from_mass(mass, decomp.potential.players, nu, cost)


def averaged_pushforward(plan: AllocationPlan, nu: GridMeasure) -> GridMeasure:
    """β_N = (1/N) Σ_i π_i / α_i: each player's share rescaled to mass 1/N."""
    a = plan.alpha
    if np.any(a <= 0):
        raise StructureError("a player received no mass")
    masses = (plan.mass / a[:, None]).sum(axis=0) / plan.n_players
    return GridMeasure.from_masses(nu.box, masses)


def f_hat(beta: GridMeasure, mu: GridMeasure, nu: GridMeasure, cost: CostSpec | None = None) -> float:
    """F̂(β) = −H_ν(β) − W²(μ, β), in the discretization ``minimize_f`` uses for this dimension."""
    return -objective(beta, mu, nu, cost=cost)


def w2_between(a: GridMeasure, b: GridMeasure) -> float:
    if a.box.dim == 1:
        return density_w2_1d(a, b)
    return wasserstein(a, b).value


def step4_bound(decomp: LaguerreDecomposition, cost: CostSpec) -> float:
    """(1/N) Σ (1/b₀) osc_{E_i} s(p_i, ·), the oscillation taken over the closed grid cells of E_i."""
    box = decomp.box
    pts = decomp.potential.players.points
    n = len(pts)
    lo_edges = box.centers() - box.widths / 2
    hi_edges = box.centers() + box.widths / 2
    total = 0.0
    for i in range(n):
        sel = decomp.cell_index == i
        if not sel.any():
            continue
        lo, hi = lo_edges[sel], hi_edges[sel]
        p = pts[i]
        if cost.kind == "quadratic":
            near = np.clip(p, lo, hi)
            far = np.where(np.abs(p - lo) > np.abs(p - hi), lo, hi)
            c_min = 0.5 * ((near - p) ** 2).sum(axis=1).min()
            c_max = 0.5 * ((far - p) ** 2).sum(axis=1).max()
        else:
            probe = np.vstack([box.centers()[sel], lo, hi])
            c = cost.matrix(p[None, :], probe)[0]
            c_min, c_max = c.min(), c.max()
        total += (math.exp(-c_min) - math.exp(-c_max)) / cost.b0
    return total / n


def log_utility_mismatch(decomp: LaguerreDecomposition, nu: GridMeasure, cost: CostSpec) -> float:
    """|(1/N) Σ ln(cell average of s) + (1/N) Σ cell average of c|, which step4_bound controls."""
    pts = decomp.potential.players.points
    n = len(pts)
    owner = decomp.cell_index
    c = _cost_to_owner(cost, pts, nu.box.centers(), owner)
    m = decomp.cell_mass
    avg_s = np.bincount(owner, weights=np.exp(-c) * nu.masses, minlength=n) / m
    avg_c = np.bincount(owner, weights=c * nu.masses, minlength=n) / m
    return float(abs(np.mean(np.log(avg_s)) + np.mean(avg_c)))


# --------------------------------------------------------------------------- sweep

@dataclass
class ConvergenceRun:
    config: ExperimentConfig
    records: list
    f_hat_beta_hat: float
    beta_hat: GridMeasure = field(repr=False)
    beta_n: dict = field(default_factory=dict, repr=False)

    def checks(self) -> dict:
        """Hard invariants of the run, each mapped to pass/fail."""
        ok = [r for r in self.records if r.ok]
        slack = slack_two_cells(self.config)
        f = [r.f_hat_beta_n for r in ok]
        return {
            "all_records_ok": len(ok) == len(self.records),
            "entries_finite": all(np.isfinite([r.f_hat_beta_n, r.f_tilde_n, r.gap, r.max_cell_diameter,
                                               r.w2_to_beta_hat]).all() for r in ok),
            "competitor_inequality": all(r.f_tilde_n >= r.competitor - COMPETITOR_SLACK for r in ok),
            "f_hat_nondecreasing": all(b >= a - slack for a, b in zip(f, f[1:])),
            "f_hat_below_optimum": all(v <= self.f_hat_beta_hat + slack for v in f),
        }

    @property
    def passed(self) -> bool:
        return all(self.checks().values())


def slack_two_cells(config: ExperimentConfig) -> float:
    """Allowed single-step violation: cost Lipschitz bound times two Y-grid cells."""
    cost = CostSpec.quadratic(config.x_box, config.y_box)
    return cost.lipschitz_bound * 2 * float(config.y_box.widths.max())


def player_seed(seed: int, n: int) -> int:
    return int(np.random.SeedSequence([seed, n]).generate_state(1)[0])


def run_convergence(config: ExperimentConfig) -> ConvergenceRun:
    mu = config.mu.measure(config.x_box)
    nu = config.nu.measure(config.y_box)
    cost = CostSpec.quadratic(config.x_box, config.y_box)
    cont = minimize_f(mu, nu, cost, tol=config.continuum_tol)
    beta_hat = cont.beta_hat
    run = ConvergenceRun(config, [], cont.f_hat, beta_hat)
    for n in config.n_schedule:
        t0 = time.perf_counter()
        try:
            players = sample_players(mu, n, player_seed(config.seed, n))
            plan = solve_nash(players, nu, cost, tol=config.nash_tol)
            beta_n = averaged_pushforward(plan, nu)
            f_hat_n = f_hat(beta_n, mu, nu, cost)
            f_tilde = objective_np1(plan, players, cost)
            decomp = decompose(LaguerrePotential.from_kappa(players, plan.kappa), nu)
            w2 = w2_between(beta_n, beta_hat)
            competitor = evaluate_p3(solve_semidiscrete(players, np.full(n, 1.0 / n), beta_hat), nu, cost)
            rec = ConvergenceRecord(n, f_hat_n, f_tilde, abs(f_hat_n - f_tilde), float(decomp.cell_diameter.max()),
                                    w2, 1e3 * (time.perf_counter() - t0), competitor, step4_bound(decomp, cost))
            run.beta_n[n] = beta_n
        except (NashOTError, ValueError, FloatingPointError) as exc:
            nan = math.nan
            rec = ConvergenceRecord(n, nan, nan, nan, nan, nan, 1e3 * (time.perf_counter() - t0),
                                    status="failed", error=f"{type(exc).__name__}: {exc}")
        run.records.append(rec)
    return run


def records_csv(records, include_timing: bool = False) -> str:
    """Records as CSV.  Wall times vary between runs, so they are left blank unless asked for."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        vals = [r.f_hat_beta_n, r.f_tilde_n, r.gap, r.max_cell_diameter, r.w2_to_beta_hat]
        w.writerow([r.n] + [repr(float(v)) for v in vals]
                   + [f"{r.wall_ms:.3f}" if include_timing else "", r.status])
    return buf.getvalue()


def write_run(run: ConvergenceRun, out_dir, include_timing: bool = False) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "records.csv").write_text(records_csv(run.records, include_timing))
    (out / "beta_hat.csv").write_text(run.beta_hat.to_csv())
    for n, beta in run.beta_n.items():
        (out / f"beta_N{n}.csv").write_text(beta.to_csv())
    manifest = {
        "config": run.config.to_dict(),
        "seed": run.config.seed,
        "player_seeds": {str(n): player_seed(run.config.seed, n) for n in run.config.n_schedule},
        "f_hat_beta_hat": run.f_hat_beta_hat,
        "records": [asdict(r) for r in run.records],
        "checks": run.checks(),
        "passed": run.passed,
        "versions": {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_json_default))
    return out


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o).__name__)
