"""Laguerre (power) cells of a finite point set, rasterized on the grid of ν.

A potential φ on the players defines the cell of p_i as the set of y with
⟨p_i, y⟩ − φ_i ≥ ⟨p_k, y⟩ − φ_k for all k; grid cells are owned by the
maximizer of ⟨p_i, y⟩ − φ_i evaluated at their centers, ties going to the
lowest index.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

from .discrete import PlayerSet
from .errors import ConvergenceError, EmptyCellError, StructureError
from .measure import Box, DiscreteMeasure, GridMeasure, wasserstein

_CHUNK = 1 << 22


def _owners(points: np.ndarray, values: np.ndarray, ys: np.ndarray) -> np.ndarray:
    out = np.empty(len(ys), dtype=np.int64)
    step = max(1, _CHUNK // max(1, len(points)))
    for a in range(0, len(ys), step):
        sc = ys[a:a + step] @ points.T - values[None, :]
        out[a:a + step] = np.argmax(sc, axis=1)
    return out


@dataclass(frozen=True, eq=False)
class LaguerrePotential:
    players: PlayerSet
    values: np.ndarray
    box: Box | None = field(default=None, repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float).ravel()
        if len(v) != self.players.n:
            raise StructureError("one potential value per player required")
        if not np.all(np.isfinite(v)):
            raise StructureError("potential values must be finite")
        v = v - v.min()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.box is not None:
            owner = _owners(self.players.points, v, self.box.centers())
            seen = np.bincount(owner, minlength=self.players.n)
            if np.any(seen == 0):
                raise EmptyCellError(int(np.flatnonzero(seen == 0)[0]))

    @classmethod
    def from_kappa(cls, players: PlayerSet, kappa, box: Box | None = None) -> "LaguerrePotential":
        """φ_i = |p_i|²/2 + ln κ_i: its cells are the regions where s(p_i, ·)/κ_i is largest."""
        k = np.asarray(kappa, dtype=float)
        return cls(players, 0.5 * (players.points ** 2).sum(axis=1) + np.log(k), box)

    @classmethod
    def voronoi(cls, players: PlayerSet, box: Box | None = None) -> "LaguerrePotential":
        return cls(players, 0.5 * (players.points ** 2).sum(axis=1), box)


@dataclass(frozen=True, eq=False)
class LaguerreDecomposition:
    potential: LaguerrePotential
    cell_index: np.ndarray = field(repr=False)
    cell_mass: np.ndarray
    cell_diameter: np.ndarray
    box: Box = field(repr=False)

    def to_json(self) -> str:
        return json.dumps({
            "phi": self.potential.values.tolist(),
            "cellMass": self.cell_mass.tolist(),
            "cellDiameter": self.cell_diameter.tolist(),
        })

    def raster_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "y"][: self.box.dim] + ["owner"])
        for c, o in zip(self.box.centers(), self.cell_index):
            w.writerow([repr(float(t)) for t in c] + [int(o)])
        return buf.getvalue()


def _diameters(box: Box, owner: np.ndarray, n: int) -> np.ndarray:
    """Max distance between occupied cell centers of each player, plus one cell diagonal."""
    diag = box.cell_diagonal
    out = np.zeros(n)
    if box.dim == 1:
        c = box.axis_centers(0)
        lo = np.full(n, np.inf)
        hi = np.full(n, -np.inf)
        np.minimum.at(lo, owner, c)
        np.maximum.at(hi, owner, c)
        ok = np.isfinite(lo)
        out[ok] = hi[ok] - lo[ok] + diag
        return out
    nx, ny = box.resolution
    grid = owner.reshape(nx, ny)
    cx, cy = box.axis_centers(0), box.axis_centers(1)
    for i in range(n):
        rows, cols = np.nonzero(grid == i)
        if len(rows) == 0:
            continue
        # extreme points of a rasterized set lie among the per-row leftmost/rightmost cells
        first = np.full(nx, ny)
        last = np.full(nx, -1)
        np.minimum.at(first, rows, cols)
        np.maximum.at(last, rows, cols)
        r = np.flatnonzero(last >= 0)
        pts = np.concatenate([np.stack([cx[r], cy[first[r]]], 1), np.stack([cx[r], cy[last[r]]], 1)])
        out[i] = (pdist(pts).max() if len(pts) > 1 else 0.0) + diag
    return out


def decompose(potential: LaguerrePotential, nu: GridMeasure) -> LaguerreDecomposition:
    pts = potential.players.points
    if pts.shape[1] != nu.box.dim:
        raise StructureError("players and ν live in different dimensions")
    owner = _owners(pts, potential.values, nu.box.centers())
    n = potential.players.n
    seen = np.bincount(owner, minlength=n)
    if np.any(seen == 0):
        raise EmptyCellError(int(np.flatnonzero(seen == 0)[0]))
    mass = np.bincount(owner, weights=nu.masses, minlength=n)
    return LaguerreDecomposition(potential, owner, mass, _diameters(nu.box, owner, n), nu.box)


def pushforward_beta(decomp: LaguerreDecomposition, nu: GridMeasure) -> GridMeasure:
    """Spread mass 1/N uniformly (relative to ν) over each cell."""
    if np.any(decomp.cell_mass <= 0):
        raise EmptyCellError(int(np.argmin(decomp.cell_mass)), "a Laguerre cell has zero ν-mass")
    n = len(decomp.cell_mass)
    dens = nu.density.ravel() / (n * decomp.cell_mass[decomp.cell_index])
    return GridMeasure.from_density(nu.box, dens)


def max_cell_diameter(decomp: LaguerreDecomposition) -> float:
    return float(decomp.cell_diameter.max())


def default_mass_tol(nu: GridMeasure) -> float:
    """Raster cells move in whole grid cells, so masses are only matched up to boundary cells."""
    m = nu.masses.max()
    if nu.box.dim == 1:
        return float(m)
    return float(m * max(nu.box.resolution))


def solve_semidiscrete(players: PlayerSet, target_alpha, nu: GridMeasure, tol: float | None = None,
                       damping: float = 0.5, max_sweeps: int = 100) -> LaguerrePotential:
    """Find φ whose rasterized cells carry the requested ν-masses.

    Starts from the exact transport duals between the weighted players and
    the atoms of ν, then runs damped Gauss–Seidel sweeps: for player i the
    cell mass is a step function of φ_i with jumps at known thresholds, so
    the best attainable mass and the middle of its φ_i-interval are found
    exactly and φ_i moves toward that midpoint.  The sweeps keep boundaries
    away from grid cell centers; they stop once nothing moves.
    """
    alpha = np.asarray(target_alpha, dtype=float).ravel()
    n = players.n
    if len(alpha) != n or np.any(alpha <= 0) or abs(alpha.sum() - 1.0) > 1e-9:
        raise StructureError("target masses must be positive, one per player, summing to 1")
    tol = default_mass_tol(nu) if tol is None else tol
    if n == 1:
        return LaguerrePotential(players, [0.0], nu.box)
    ys = nu.box.centers()
    w = nu.masses
    P = players.points
    lin = P @ ys.T  # <p_i, y>
    ot = wasserstein(DiscreteMeasure(P, alpha / alpha.sum()), nu)
    phi = 0.5 * (P ** 2).sum(axis=1) - ot.phi
    phi -= phi.min()
    S = lin - phi[:, None]
    span = float(np.ptp(lin)) + 1.0

    def top2(cols=None):
        sub = S if cols is None else S[:, cols]
        idx = np.argmax(sub, axis=0)
        b1 = sub[idx, np.arange(sub.shape[1])]
        tmp = sub.copy()
        tmp[idx, np.arange(sub.shape[1])] = -np.inf
        return idx, b1, tmp.max(axis=0)

    def residual(phi):
        mass = np.bincount(_owners(P, phi, ys), weights=w, minlength=n)
        return float(np.abs(mass - alpha).max())

    arg1, best1, best2 = top2()
    best_phi, best_res = phi.copy(), residual(phi)
    for _ in range(max_sweeps):
        move = 0.0
        for i in range(n):
            others = np.where(arg1 == i, best2, best1)
            t = lin[i] - others
            order = np.argsort(-t, kind="stable")
            ts = t[order]
            cum = np.cumsum(w[order])
            distinct = np.append(ts[:-1] > ts[1:], True)
            cand = np.flatnonzero(distinct)
            k = cand[np.argmin(np.abs(cum[cand] - alpha[i]))]
            below = ts[k + 1] if k + 1 < len(ts) else ts[k] - span
            target = 0.5 * (ts[k] + below)
            new = phi[i] + damping * (target - phi[i])
            move = max(move, abs(new - phi[i]))
            phi[i] = new
            S[i] = lin[i] - new
            cols = np.flatnonzero((arg1 == i) | (S[i] > best2))
            if len(cols):
                a, b1, b2 = top2(cols)
                arg1[cols], best1[cols], best2[cols] = a, b1, b2
        res = residual(phi)
        if res <= max(tol, best_res):
            best_phi, best_res = phi.copy(), res
        if move < 1e-13 * span:
            break
    if best_res > tol:
        raise ConvergenceError("semidiscrete solve did not match the cell masses",
                               best=LaguerrePotential(players, best_phi), residual=best_res)
    return LaguerrePotential(players, best_phi, nu.box)
