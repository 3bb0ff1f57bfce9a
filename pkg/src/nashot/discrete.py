"""Finite-player Nash bargaining over a surplus measure.

N players at points p_i share the atoms of ν.  Player i values a unit of
resource at y by s(p_i, y) = exp(−c(p_i, y)) and the Nash product
Π κ_i, κ_i = Σ_y s(p_i, y) π_iy, is maximized over plans π with column
marginal ν.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

from ._expmax import solve_expmax
from .errors import ConvergenceError, StructureError
from .measure import CostSpec, atoms_of

COLUMN_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class PlayerSet:
    points: np.ndarray
    seed: int | None = None
    provenance: str = "given"

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        pts = pts.reshape(-1, 1) if pts.ndim == 1 else pts
        if len(pts) < 1:
            raise StructureError("need at least one player")
        if not np.all(np.isfinite(pts)):
            raise StructureError("player coordinates must be finite")
        if len(pts) > 1 and pdist(pts).min() <= 1e-12:
            raise StructureError("player points must be pairwise distinct")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.n, 1.0 / self.n)

    def to_dict(self) -> dict:
        return {"points": self.points.tolist(), "seed": self.seed, "provenance": self.provenance}


@dataclass(frozen=True, eq=False)
class AllocationPlan:
    """Players × atoms mass matrix whose columns sum to the atom masses of ν."""

    mass: np.ndarray = field(repr=False)
    column_marginal: np.ndarray = field(repr=False)
    kappa: np.ndarray
    players: PlayerSet = field(repr=False)
    atoms: np.ndarray = field(repr=False)
    info: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        m = np.asarray(self.mass, dtype=float)
        if m.ndim != 2 or m.shape[0] != self.players.n or m.shape[1] != len(self.column_marginal):
            raise StructureError("mass matrix must be players × atoms")
        if np.any(m < 0):
            raise StructureError("mass must be nonnegative")
        dev = np.abs(m.sum(axis=0) - self.column_marginal).max()
        if dev > COLUMN_TOL:
            raise StructureError(f"column sums deviate from the atom masses by {dev:.2e}")

    @classmethod
    def from_mass(cls, mass, players: PlayerSet, nu, cost: CostSpec, info=None) -> "AllocationPlan":
        pts, w = atoms_of(nu)
        mass = np.asarray(mass, dtype=float)
        S = np.exp(-cost.matrix(players.points, pts))
        kappa = (S * mass).sum(axis=1)
        return cls(mass, w, kappa, players, pts, info or {})

    @property
    def alpha(self) -> np.ndarray:
        return self.mass.sum(axis=1)

    @property
    def n_players(self) -> int:
        return self.mass.shape[0]

    def owners(self) -> np.ndarray:
        """Player holding the largest share of each atom (lowest index on ties)."""
        return np.argmax(self.mass, axis=0)

    def to_json(self, objective: float | None = None) -> str:
        r, c = np.nonzero(self.mass)
        doc = {
            "players": self.players.points.tolist(),
            "atoms": self.atoms.tolist(),
            "mass": [[int(i), int(j), float(self.mass[i, j])] for i, j in zip(r, c)],
            "alpha": self.alpha.tolist(),
            "kappa": self.kappa.tolist(),
            "objective": objective,
        }
        return json.dumps(doc)


def _check(plan: AllocationPlan, players: PlayerSet):
    if plan.n_players != players.n:
        raise StructureError(f"plan has {plan.n_players} rows but there are {players.n} players")


def _kappa(plan, players, cost):
    S = np.exp(-cost.matrix(players.points, plan.atoms))
    return (S * plan.mass).sum(axis=1)


def objective_np1(plan: AllocationPlan, players: PlayerSet, cost: CostSpec) -> float:
    """ln N + (1/N) Σ ln κ_i; ``-inf`` when some player gets no utility."""
    _check(plan, players)
    k = _kappa(plan, players, cost)
    if np.any(k <= 0):
        return -math.inf
    n = players.n
    return math.log(n) + float(np.mean(np.log(k)))


def objective_f2(plan: AllocationPlan, players: PlayerSet, cost: CostSpec) -> float:
    """Σ (1/N)[ln(N α_i) + ln(κ_i / α_i)]: entropy of α against μ_N plus average log utility per unit."""
    _check(plan, players)
    k = _kappa(plan, players, cost)
    a = plan.alpha
    if np.any(a <= 0) or np.any(k <= 0):
        return -math.inf
    n = players.n
    return float(np.mean(np.log(n * a) + np.log(k / a)))


def ratio_residual(plan: AllocationPlan, cost: CostSpec) -> float:
    """Largest relative shortfall of s(p_i,y)/κ_i below max_j s(p_j,y)/κ_j over the support."""
    C = cost.matrix(plan.players.points, plan.atoms)
    k = _kappa(plan, plan.players, cost)
    if np.any(k <= 0):
        return math.inf
    score = -C - np.log(k)[:, None]
    best = score.max(axis=0)
    short = -np.expm1(score - best)
    return float(np.max(np.where(plan.mass > 0, short, 0.0)))


def reassignment_gain(plan: AllocationPlan, cost: CostSpec) -> float:
    """Best objective change from moving one player's whole share of one atom to another player."""
    C = cost.matrix(plan.players.points, plan.atoms)
    S = np.exp(-C)
    k = _kappa(plan, plan.players, cost)
    n = plan.n_players
    best = -math.inf
    for i in range(n):
        ys = np.flatnonzero(plan.mass[i] > 0)
        if len(ys) == 0:
            continue
        lost = S[i, ys] * plan.mass[i, ys]
        with np.errstate(divide="ignore"):
            drop = np.log(np.maximum(k[i] - lost, 0.0)) - math.log(k[i])
        gain = np.log1p(S[:, ys] * plan.mass[i, ys] / k[:, None])
        delta = (drop[None, :] + gain) / n
        delta[i] = -math.inf
        best = max(best, float(delta.max()))
    return best


def solve_nash(players: PlayerSet, nu, cost: CostSpec, tol: float = 1e-8,
               max_iter: int = 100_000, seed: int | None = None) -> AllocationPlan:
    """Maximize the Nash product over plans with column marginal ν.

    The concave program is solved through its dual (see ``_expmax``); atoms
    on an exact tie are split.  ``seed`` randomizes the starting point, which
    must not change the answer.
    """
    pts, w_atoms = atoms_of(nu)
    C = cost.matrix(players.points, pts)
    if not np.all(np.isfinite(C)):
        raise StructureError("cost must be finite so that s = exp(-c) > 0")
    n = players.n
    weights = np.full(n, 1.0 / n)
    u0 = None
    if seed is not None:
        from ._expmax import initial_duals
        rng = np.random.default_rng(seed)
        u0 = initial_duals(C, w_atoms, weights) + rng.normal(scale=0.5, size=n)
    sol = solve_expmax(C, w_atoms, weights, u0=u0, max_newton=min(max_iter, 200))
    mass = sol.theta * w_atoms[None, :]
    info = {"newton_steps": sol.newton_steps, "exact": sol.exact, "kkt_residual": sol.residual}
    plan = AllocationPlan.from_mass(mass, players, nu, cost, info)
    res = ratio_residual(plan, cost)
    plan.info["ratio_residual"] = res
    if not res <= tol:
        raise ConvergenceError("Nash solver did not reach the ratio condition", best=plan, residual=res)
    return plan


@dataclass
class MonotonicityReport:
    checked: int
    violations: list
    tol: float

    @property
    def passed(self) -> bool:
        return not self.violations


def verify_cyclical_monotonicity(plan: AllocationPlan, cost: CostSpec, n_tuples: int = 1000,
                                 max_k: int = 4, seed: int = 0, tol: float = 1e-8) -> MonotonicityReport:
    """Sample k-tuples of support pairs and test Σ c(x_i, y_i) ≤ Σ c(x_i, y_{i−1}) + tol."""
    rng = np.random.default_rng(seed)
    C = cost.matrix(plan.players.points, plan.atoms)
    rows, cols = np.nonzero(plan.mass > 0)
    violations = []
    for _ in range(n_tuples):
        k = int(rng.integers(1, max_k + 1))
        pick = rng.integers(0, len(rows), size=k)
        xi, yi = rows[pick], cols[pick]
        lhs = C[xi, yi].sum()
        rhs = C[xi, np.roll(yi, 1)].sum()
        if lhs > rhs + tol:
            violations.append((list(zip(xi.tolist(), yi.tolist())), float(lhs - rhs)))
    return MonotonicityReport(n_tuples, violations, tol)


@dataclass
class AlphaBoundsReport:
    a0: float
    lower: float
    upper: float
    alpha: np.ndarray
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.all(self.alpha >= self.lower - self.tol) and np.all(self.alpha <= self.upper + self.tol))

    @property
    def worst_excess(self) -> float:
        return float(max(np.max(self.lower - self.alpha), np.max(self.alpha - self.upper)))


def alpha_bounds_check(plan: AllocationPlan, cost: CostSpec, tol: float = 1e-8) -> AlphaBoundsReport:
    """Every player's share lies in [a0/(a0+N−1), 1/(1+(N−1)a0)] with a0 = (min s / max s)²."""
    a0 = math.exp(-2.0 * cost.oscillation)
    n = plan.n_players
    return AlphaBoundsReport(a0, a0 / (a0 + n - 1), 1.0 / (1.0 + (n - 1) * a0), plan.alpha, tol)
