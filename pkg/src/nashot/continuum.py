"""Minimization of F(β) = H_ν(β) + W²(μ, β) over probability densities on Y.

Two discretizations are available:

``density``  (1D only) β is piecewise constant on the cells of Y and W² is
             the exact transport cost between piecewise-constant densities.
             Solved by the damped fixed point β ← β^{1−θ} (ν e^{−ψ}/Z)^θ with
             objective monitoring.
``atomic``   μ and β are cell-center atoms.  The problem is then the same
             exp-max convex program as the Nash problem with player weights
             μ_i, and is solved exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp

from ._expmax import kkt_residual, solve_expmax
from .errors import ConvergenceError, StructureError
from .measure import CostSpec, GridMeasure, density_transport_1d, relative_entropy, wasserstein

BETA_FLOOR = 1e-12


@dataclass(frozen=True)
class GBound:
    """Density cap g⁻¹(l0 + osc c) for minimizers, with l0 = max_{s∈[0,1]} (s+1)g(s+1) − s g(s)."""

    l0: float
    osc_c: float
    density_cap: float

    @classmethod
    def from_g(cls, osc_c: float, g: Callable = np.log, g_inverse: Callable = np.exp) -> "GBound":
        def h(s):
            s = np.asarray(s, dtype=float)
            with np.errstate(divide="ignore", invalid="ignore"):
                sgs = np.where(s > 0, s * g(np.where(s > 0, s, 1.0)), 0.0)
            return (s + 1) * g(s + 1) - sgs

        grid = np.linspace(0.0, 1.0, 10001)
        vals = h(grid)
        k = int(np.argmax(vals))
        l0 = float(vals[k])
        lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
        if hi > lo:
            r = minimize_scalar(lambda s: -float(h(s)), bounds=(lo, hi), method="bounded",
                                options={"xatol": 1e-14})
            l0 = max(l0, -float(r.fun))
        return cls(l0, float(osc_c), float(g_inverse(l0 + osc_c)))

    @classmethod
    def for_cost(cls, cost: CostSpec) -> "GBound":
        return cls.from_g(cost.oscillation)


@dataclass(frozen=True, eq=False)
class ContinuumSolution:
    beta_hat: GridMeasure
    value: float
    dual_potential: np.ndarray = field(repr=False)
    iterations: int
    residual: float
    method: str = "density"
    history: tuple = field(default=(), repr=False)

    @property
    def f_hat(self) -> float:
        """The concave-side value F̂(β̂) = −(H + W²)."""
        return -self.value


def _check_pair(mu: GridMeasure, nu: GridMeasure):
    if mu.box.dim != nu.box.dim:
        raise StructureError("μ and ν must live in the same dimension")
    if np.any(nu.density <= 0):
        raise StructureError("ν must be bounded away from zero (clamp it with GridMeasure.clamped)")


def objective(beta: GridMeasure, mu: GridMeasure, nu: GridMeasure, method: str = "auto",
              cost: CostSpec | None = None) -> float:
    """H_ν(β) + W²(μ, β) in the requested discretization."""
    method = _method(method, mu)
    if method == "density":
        return relative_entropy(beta, nu) + density_transport_1d(mu, beta)[0]
    return relative_entropy(beta, nu) + wasserstein(mu, beta, cost).value


def first_order_residual(beta: GridMeasure, psi, nu: GridMeasure) -> float:
    """sup |ln(β/ν) + ψ − (its β-mean)| over cells."""
    r = np.log(beta.density.ravel() / nu.density.ravel()) + np.asarray(psi).ravel()
    return float(np.abs(r - np.dot(beta.masses, r) / beta.masses.sum()).max())


def _method(method, mu):
    if method == "auto":
        return "density" if mu.box.dim == 1 else "atomic"
    if method not in ("density", "atomic"):
        raise ValueError(f"unknown method {method!r}")
    if method == "density" and mu.box.dim != 1:
        raise StructureError("the density discretization is one-dimensional")
    return method


def minimize_f(mu: GridMeasure, nu: GridMeasure, cost: CostSpec | None = None, tol: float = 1e-6,
               theta: float = 0.3, max_iter: int = 10_000, method: str = "auto",
               start: GridMeasure | None = None) -> ContinuumSolution:
    """Minimize H_ν(β) + W²(μ, β); β lives on the grid of ν."""
    _check_pair(mu, nu)
    method = _method(method, mu)
    if cost is None:
        cost = CostSpec.quadratic(mu.box, nu.box)
    if method == "atomic":
        return _minimize_atomic(mu, nu, cost, tol)
    return _minimize_density(mu, nu, tol, theta, max_iter, start)


def _minimize_density(mu, nu, tol, theta, max_iter, start):
    box = nu.box
    nu_d = nu.density.ravel()
    beta = (start.density.ravel() if start is not None else nu_d).copy()
    beta = np.maximum(beta, BETA_FLOOR)

    def evaluate(b):
        gm = GridMeasure.from_density(box, b)
        w2, psi = density_transport_1d(mu, gm)
        return gm, relative_entropy(gm, nu) + w2, psi

    gm, value, psi = evaluate(beta)
    history = [value]
    step = theta
    res = first_order_residual(gm, psi, nu)
    for it in range(max_iter):
        if res <= tol:
            return ContinuumSolution(gm, value, psi, it, res, "density", tuple(history))
        log_target = np.log(nu_d) - psi
        while True:
            # damped geometric step, normalized in log space so wide ψ ranges cannot overflow
            lc = (1 - step) * np.log(beta) + step * log_target
            cand = np.maximum(np.exp(lc - logsumexp(lc) - math.log(box.cell_volume)), BETA_FLOOR)
            gm_c, value_c, psi_c = evaluate(cand)
            if value_c <= value + 1e-14 * max(1.0, abs(value)):
                break
            step *= 0.5
            if step < 1e-10:
                raise ConvergenceError("objective increased under every damping", best=gm, residual=res)
        beta, gm, value, psi = cand, gm_c, value_c, psi_c
        history.append(value)
        res = first_order_residual(gm, psi, nu)
        step = min(theta, 2 * step)
    if res <= tol:
        return ContinuumSolution(gm, value, psi, max_iter, res, "density", tuple(history))
    raise ConvergenceError("fixed point did not reach the first-order condition", best=gm, residual=res)


def _minimize_atomic(mu, nu, cost, tol):
    keep = mu.masses > 0
    xs = mu.box.centers()[keep]
    w = mu.masses[keep]
    w = w / w.sum()
    ys = nu.box.centers()
    C = cost.matrix(xs, ys)
    nu_m = nu.masses
    sol = solve_expmax(C, nu_m, w)
    top = np.max(sol.u[:, None] - C, axis=0)
    masses = nu_m * np.exp(top)
    beta = GridMeasure.from_masses(nu.box, masses)
    psi = -1.0 - top
    # transport part evaluated on the plan the solver produced
    plan = nu_m[None, :] * np.exp(sol.u[:, None] - C) * sol.theta
    value = relative_entropy(beta, nu) + float(np.sum(plan * C))
    stat = max(kkt_residual(C, nu_m, w, sol.u, sol.theta))
    res = max(first_order_residual(beta, psi, nu), stat)
    if not sol.exact or res > tol:
        raise ConvergenceError("atomic solve did not verify", best=beta, residual=res)
    return ContinuumSolution(beta, value, psi, sol.newton_steps, res, "atomic", (value,))


@dataclass
class DensityCapReport:
    max_ratio: float
    cap: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_ratio <= self.cap + self.tol


def check_density_cap(solution: ContinuumSolution, nu: GridMeasure, bound: GBound,
                      tol: float = 1e-6) -> DensityCapReport:
    ratio = solution.beta_hat.density.ravel() / nu.density.ravel()
    return DensityCapReport(float(ratio.max()), bound.density_cap, tol)


def holder_seminorm(beta: GridMeasure, nu: GridMeasure, scale_range: tuple) -> float:
    """max |ρ(y) − ρ(y′)| / |y − y′|^{1/2} over cell-center pairs with rmin ≤ |y − y′| ≤ rmax, ρ = dβ/dν."""
    if beta.box != nu.box:
        raise StructureError("β and ν must share a box")
    rmin, rmax = scale_range
    if rmin < beta.box.widths.min() - 1e-15:
        raise ValueError("rmin must be at least one grid cell")
    rho = beta.density.ravel() / nu.density.ravel()
    pts = beta.box.centers()
    best = -math.inf
    step = max(1, (1 << 22) // len(pts))
    for a in range(0, len(pts), step):
        d = np.sqrt(((pts[a:a + step, None, :] - pts[None, :, :]) ** 2).sum(-1))
        ok = (d >= rmin - 1e-12) & (d <= rmax + 1e-12)
        if ok.any():
            q = np.abs(rho[a:a + step, None] - rho[None, :])[ok] / np.sqrt(d[ok])
            best = max(best, float(q.max()))
    if best == -math.inf:
        raise ValueError("no grid pairs in the requested scale range")
    return best
