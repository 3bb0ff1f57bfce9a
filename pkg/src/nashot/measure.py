"""Grid measures on boxes, relative entropy and quadratic-cost transport.

All integrals against grid densities use the cell-center rule, so a
GridMeasure is handled as a set of atoms (cell centers, cell masses) whenever
transport is involved.  Transport cost is always the half squared distance.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .errors import MassMismatchError, NashOTError, StructureError

MASS_TOL = 1e-9
DUAL_TOL = 1e-9
GAP_TOL = 1e-7
EXACT_LP_CELLS = 32 * 32


def _as_tuple(v, n=None, cast=float):
    if np.ndim(v) == 0:
        v = [v] * (n or 1)
    return tuple(cast(x) for x in v)


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    resolution: tuple

    def __post_init__(self):
        lo = _as_tuple(self.lo)
        hi = _as_tuple(self.hi, len(lo))
        res = _as_tuple(self.resolution, len(lo), int)
        if not (len(lo) == len(hi) == len(res)) or len(lo) not in (1, 2):
            raise StructureError("box must be 1D or 2D with matching lo/hi/resolution")
        if any(not (a < b) for a, b in zip(lo, hi)):
            raise StructureError(f"need lo < hi on every axis, got {lo}, {hi}")
        if any(r < 1 for r in res):
            raise StructureError("resolution must be a positive integer per axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "resolution", res)

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def shape(self) -> tuple:
        return self.resolution

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.resolution))

    @property
    def widths(self) -> np.ndarray:
        return (np.array(self.hi) - np.array(self.lo)) / np.array(self.resolution)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.widths))

    @property
    def cell_diagonal(self) -> float:
        return float(np.linalg.norm(self.widths))

    def axis_centers(self, axis: int) -> np.ndarray:
        h = self.widths[axis]
        return self.lo[axis] + h * (np.arange(self.resolution[axis]) + 0.5)

    def axis_edges(self, axis: int) -> np.ndarray:
        return np.linspace(self.lo[axis], self.hi[axis], self.resolution[axis] + 1)

    def centers(self) -> np.ndarray:
        """Cell centers as an (n_cells, dim) array in row-major cell order."""
        axes = [self.axis_centers(a) for a in range(self.dim)]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def corners(self) -> np.ndarray:
        if self.dim == 1:
            return np.array([[self.lo[0]], [self.hi[0]]])
        return np.array([[x, y] for x in (self.lo[0], self.hi[0]) for y in (self.lo[1], self.hi[1])])

    def diameter(self) -> float:
        return float(np.linalg.norm(np.array(self.hi) - np.array(self.lo)))

    def contains(self, points, slack=1e-12) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, self.dim)
        return np.all((pts >= np.array(self.lo) - slack) & (pts <= np.array(self.hi) + slack), axis=1)

    def refined(self, resolution) -> "Box":
        return Box(self.lo, self.hi, resolution)

    def to_dict(self) -> dict:
        return {"dim": self.dim, "lo": list(self.lo), "hi": list(self.hi), "resolution": list(self.resolution)}

    @classmethod
    def from_dict(cls, d) -> "Box":
        box = cls(d["lo"], d["hi"], d["resolution"])
        if "dim" in d and int(d["dim"]) != box.dim:
            raise StructureError("dim field disagrees with lo/hi")
        return box


@dataclass(frozen=True, eq=False)
class GridMeasure:
    box: Box
    density: np.ndarray = field(repr=False)

    def __post_init__(self):
        d = np.array(self.density, dtype=float).reshape(self.box.shape)
        if not np.all(np.isfinite(d)):
            raise StructureError("density must be finite")
        if np.any(d < 0):
            raise StructureError("density must be nonnegative")
        total = d.sum() * self.box.cell_volume
        if abs(total - 1.0) > MASS_TOL:
            raise MassMismatchError(f"total mass {total!r} is not 1")
        d.setflags(write=False)
        object.__setattr__(self, "density", d)

    @classmethod
    def from_density(cls, box: Box, density, normalize=True) -> "GridMeasure":
        d = np.array(density, dtype=float).reshape(box.shape)
        if normalize:
            d = d / (d.sum() * box.cell_volume)
        return cls(box, d)

    @classmethod
    def from_masses(cls, box: Box, masses, normalize=True) -> "GridMeasure":
        m = np.asarray(masses, dtype=float).reshape(box.shape)
        return cls.from_density(box, m / box.cell_volume, normalize)

    @classmethod
    def from_function(cls, box: Box, fn: Callable) -> "GridMeasure":
        """Sample ``fn`` at cell centers (one argument per axis) and normalize."""
        c = box.centers()
        vals = np.asarray(fn(*c.T), dtype=float)
        return cls.from_density(box, np.broadcast_to(vals, (box.n_cells,)))

    @classmethod
    def uniform(cls, box: Box) -> "GridMeasure":
        return cls.from_density(box, np.ones(box.shape))

    def clamped(self, floor: float = 1e-12) -> "GridMeasure":
        """Copy with density raised to ``floor`` and renormalized, for data declared bounded below."""
        return GridMeasure.from_density(self.box, np.maximum(self.density, floor))

    @property
    def masses(self) -> np.ndarray:
        """Flat cell masses in row-major order."""
        return self.density.ravel() * self.box.cell_volume

    @property
    def points(self) -> np.ndarray:
        return self.box.centers()

    @property
    def weights(self) -> np.ndarray:
        return self.masses

    def integrate(self, values) -> float:
        return float(np.dot(np.asarray(values, dtype=float).ravel(), self.masses))

    def log_mean(self) -> float:
        """∫ ln(density) d(self), over the support."""
        d = self.density.ravel()
        pos = d > 0
        return float(np.dot(np.log(d[pos]), self.masses[pos]))

    def __eq__(self, other):
        return isinstance(other, GridMeasure) and self.box == other.box and np.array_equal(self.density, other.density)

    __hash__ = None

    def to_json(self) -> str:
        d = self.box.to_dict()
        d["density"] = self.density.ravel().tolist()
        return json.dumps(d)

    @classmethod
    def from_json(cls, text: str) -> "GridMeasure":
        d = json.loads(text)
        return cls(Box.from_dict(d), np.asarray(d["density"], dtype=float))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        axes = ["x", "y"][: self.box.dim]
        w.writerow(axes + ["density"])
        for c, v in zip(self.box.centers(), self.density.ravel()):
            w.writerow([repr(float(t)) for t in c] + [repr(float(v))])
        return buf.getvalue()


@dataclass(frozen=True)
class CostSpec:
    """Transport cost c(x, y) together with the constants the bounds need.

    For the quadratic kind every constant is derived from the two boxes at
    construction, so they cannot go stale.
    """

    kind: str
    lipschitz_bound: float
    max_cost: float
    min_cost: float
    fn: Callable | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("quadratic", "tabulated"):
            raise StructureError(f"unknown cost kind {self.kind!r}")
        if self.max_cost < self.min_cost or self.lipschitz_bound < 0:
            raise StructureError("inconsistent cost constants")

    @classmethod
    def quadratic(cls, xbox: Box, ybox: Box) -> "CostSpec":
        if xbox.dim != ybox.dim:
            raise StructureError("X and Y boxes must have the same dimension")
        xl, xh = np.array(xbox.lo), np.array(xbox.hi)
        yl, yh = np.array(ybox.lo), np.array(ybox.hi)
        # per axis, |x - y| is maximized at opposite corners and minimized by the gap between intervals
        far = np.maximum(np.abs(xh - yl), np.abs(yh - xl))
        gap = np.maximum(0.0, np.maximum(yl - xh, xl - yh))
        return cls("quadratic", float(np.linalg.norm(far)), 0.5 * float(far @ far), 0.5 * float(gap @ gap))

    @classmethod
    def tabulated(cls, fn: Callable, xbox: Box, ybox: Box, lipschitz_bound: float) -> "CostSpec":
        """User cost ``fn(X, Y) -> matrix``; extremes are taken over cell centers and box corners."""
        xs = np.vstack([xbox.centers(), xbox.corners()])
        ys = np.vstack([ybox.centers(), ybox.corners()])
        C = np.asarray(fn(xs, ys), dtype=float)
        return cls("tabulated", float(lipschitz_bound), float(C.max()), float(C.min()), fn)

    @property
    def oscillation(self) -> float:
        return self.max_cost - self.min_cost

    @property
    def b0(self) -> float:
        return math.exp(-self.max_cost)

    def matrix(self, xs, ys) -> np.ndarray:
        """Cost matrix between point arrays of shape (n, dim) and (m, dim); 1D vectors are read as dim 1."""
        xs = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float)
        xs = xs.reshape(-1, 1) if xs.ndim == 1 else xs
        ys = ys.reshape(-1, 1) if ys.ndim == 1 else ys
        if self.kind == "quadratic":
            C = np.zeros((len(xs), len(ys)))
            for a in range(xs.shape[1]):
                C += (xs[:, a][:, None] - ys[:, a][None, :]) ** 2
            return 0.5 * C
        return np.asarray(self.fn(xs, ys), dtype=float)


def relative_entropy(beta: GridMeasure, nu: GridMeasure) -> float:
    """H_ν(β) = Σ β_k ln(β_k/ν_k) over cells; ``inf`` if β charges a cell where ν vanishes."""
    if beta.box != nu.box:
        raise StructureError("beta and nu live on different boxes")
    b = beta.density.ravel()
    n = nu.density.ravel()
    on = b > 0
    if np.any(n[on] == 0):
        return math.inf
    return float(np.dot(beta.masses[on], np.log(b[on] / n[on])))


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Finitely many weighted points (used for atomic surpluses in small examples)."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        pts = pts.reshape(-1, 1) if pts.ndim == 1 else pts
        w = np.asarray(self.weights, dtype=float).ravel()
        if len(w) != len(pts):
            raise StructureError("one weight per point required")
        if np.any(w < 0) or abs(w.sum() - 1.0) > MASS_TOL:
            raise MassMismatchError("weights must be nonnegative and sum to 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def masses(self) -> np.ndarray:
        return self.weights


@dataclass(frozen=True, eq=False)
class TransportResult:
    value: float
    phi: np.ndarray
    psi: np.ndarray
    dual_value: float
    rows: np.ndarray = field(repr=False)
    cols: np.ndarray = field(repr=False)
    flow: np.ndarray = field(repr=False)
    method: str = ""

    def __iter__(self):
        # lets callers unpack ``value, (phi, psi) = wasserstein(...)``
        yield self.value
        yield (self.phi, self.psi)

    @property
    def gap(self) -> float:
        return self.value - self.dual_value

    def dense_plan(self, n, m) -> np.ndarray:
        P = np.zeros((n, m))
        np.add.at(P, (self.rows, self.cols), self.flow)
        return P


def atoms_of(measure) -> tuple[np.ndarray, np.ndarray]:
    """(points, masses) for a GridMeasure or anything with ``points``/``weights``."""
    pts = np.asarray(measure.points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    return pts, np.asarray(measure.weights, dtype=float).ravel()


def _monotone_coupling(a, b):
    """North-west corner rule on sorted atoms, returning a connected staircase basis.

    Degenerate steps (both marginals exhausted at once) still advance along one
    index with a zero-flow edge so that the basis stays a spanning tree.
    """
    n, m = len(a), len(b)
    ra, rb = a.astype(float).copy(), b.astype(float).copy()
    rows, cols, flow = [], [], []
    i = j = 0
    while True:
        f = min(ra[i], rb[j])
        rows.append(i)
        cols.append(j)
        flow.append(f)
        ra[i] -= f
        rb[j] -= f
        if i == n - 1 and j == m - 1:
            break
        if j == m - 1 or (i < n - 1 and ra[i] <= rb[j]):
            i += 1
        else:
            j += 1
    return np.array(rows), np.array(cols), np.array(flow)


def _tree_duals(rows, cols, C, n, m):
    """Duals making φ_i + ψ_j = c_ij on a staircase basis, anchored at φ_0 = 0."""
    phi = np.full(n, np.nan)
    psi = np.full(m, np.nan)
    phi[rows[0]] = 0.0
    for i, j in zip(rows, cols):
        if np.isnan(phi[i]):
            phi[i] = C[i, j] - psi[j]
        else:
            psi[j] = C[i, j] - phi[i]
    return phi, psi


def _c_transform_fill(C, phi, psi, wa, wb):
    """Replace potentials of zero-mass atoms by c-transforms so they stay feasible."""
    za, zb = wa <= 0, wb <= 0
    if zb.any():
        psi[zb] = np.min(C[~za][:, zb] - phi[~za][:, None], axis=0)
    if za.any():
        phi[za] = np.min(C[za] - psi[None, :], axis=1)
    return phi, psi


def _transport_1d(xa, wa, xb, wb, C):
    oa, ob = np.argsort(xa, kind="stable"), np.argsort(xb, kind="stable")
    ka, kb = oa[wa[oa] > 0], ob[wb[ob] > 0]
    r, c, f = _monotone_coupling(wa[ka], wb[kb])
    sub = C[np.ix_(ka, kb)]
    phi_s, psi_s = _tree_duals(r, c, sub, len(ka), len(kb))
    phi = np.zeros(len(wa))
    psi = np.zeros(len(wb))
    phi[ka], psi[kb] = phi_s, psi_s
    phi, psi = _c_transform_fill(C, phi, psi, wa, wb)
    keep = f > 0
    return ka[r[keep]], kb[c[keep]], f[keep], phi, psi


def _transport_lp(wa, wb, C):
    ka, kb = np.flatnonzero(wa > 0), np.flatnonzero(wb > 0)
    n, m = len(ka), len(kb)
    sub = C[np.ix_(ka, kb)]
    idx = np.arange(n * m)
    A = sp.vstack([
        sp.csr_matrix((np.ones(n * m), (idx // m, idx)), shape=(n, n * m)),
        sp.csr_matrix((np.ones(n * m), (idx % m, idx)), shape=(m, n * m)),
    ]).tocsr()
    rhs = np.concatenate([wa[ka], wb[kb]])
    res = linprog(sub.ravel(), A_eq=A, b_eq=rhs, bounds=(0, None), method="highs",
                  options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10})
    if res.status != 0:
        raise NashOTError(f"transport LP failed: {res.message}")
    y = res.eqlin.marginals
    phi = np.zeros(len(wa))
    psi = np.zeros(len(wb))
    phi[ka], psi[kb] = y[:n], y[n:]
    # shift so the potentials are dual feasible up to rounding
    viol = np.max(phi[ka][:, None] + psi[kb][None, :] - sub)
    if viol > 0:
        phi[ka] -= viol
    phi, psi = _c_transform_fill(C, phi, psi, wa, wb)
    x = res.x.reshape(n, m)
    r, c = np.nonzero(x > 0)
    return ka[r], kb[c], x[r, c], phi, psi


def wasserstein(mu, beta, cost: CostSpec | None = None, method: str = "auto",
                gap_tol: float = GAP_TOL) -> TransportResult:
    """Exact optimal transport cost between two atomic/grid measures.

    ``method`` is ``"quantile"`` (1D monotone coupling), ``"lp"`` (HiGHS
    linear program) or ``"auto"``, which uses the quantile path in 1D and the
    LP otherwise.  Returned potentials are defined on every atom, including
    zero-mass ones (by c-transform), and satisfy φ_i + ψ_j ≤ c_ij.
    """
    xa, wa = atoms_of(mu)
    xb, wb = atoms_of(beta)
    if xa.shape[1] != xb.shape[1]:
        raise StructureError("measures live in different dimensions")
    ta, tb = wa.sum(), wb.sum()
    if abs(ta - tb) > MASS_TOL or abs(ta - 1.0) > MASS_TOL:
        raise MassMismatchError(f"marginal masses {ta!r} and {tb!r} differ or are not 1")
    if not (wa > 0).any() or not (wb > 0).any():
        raise NashOTError("empty support")
    if cost is None:
        cost = _default_quadratic(mu, beta)
    # rescale the second marginal so both sum to exactly the same float
    wb = wb * (ta / tb)
    C = cost.matrix(xa, xb)
    if method == "auto":
        method = "quantile" if xa.shape[1] == 1 and cost.kind == "quadratic" else "lp"
    if method == "quantile":
        if xa.shape[1] != 1 or cost.kind != "quadratic":
            raise StructureError("the quantile path needs 1D quadratic cost")
        rows, cols, flow, phi, psi = _transport_1d(xa[:, 0], wa, xb[:, 0], wb, C)
    elif method == "lp":
        rows, cols, flow, phi, psi = _transport_lp(wa, wb, C)
    else:
        raise ValueError(f"unknown method {method!r}")
    value = float(np.dot(flow, C[rows, cols]))
    dual = float(np.dot(wa, phi) + np.dot(wb, psi))
    if value - dual > gap_tol:
        raise NashOTError(f"duality gap {value - dual:.3e} above {gap_tol:.1e}")
    return TransportResult(value, phi, psi, dual, rows, cols, flow, method)


def _default_quadratic(mu, beta) -> CostSpec:
    xa, _ = atoms_of(mu)
    xb, _ = atoms_of(beta)
    boxes = []
    for m, pts in ((mu, xa), (beta, xb)):
        if isinstance(m, GridMeasure):
            boxes.append(m.box)
        else:
            lo, hi = pts.min(0), pts.max(0)
            boxes.append(Box(lo, np.where(hi > lo, hi, lo + 1.0), 1))
    return CostSpec.quadratic(*boxes)


def dual_violation(result: TransportResult, mu, beta, cost: CostSpec) -> float:
    """max(φ_i + ψ_j − c_ij) over all atom pairs; ≤ 0 means dual feasible."""
    C = cost.matrix(atoms_of(mu)[0], atoms_of(beta)[0])
    return float(np.max(result.phi[:, None] + result.psi[None, :] - C))


def cost_shift_bound(cost: CostSpec, diam: float, eta: float) -> float:
    """Bound on |W(μ,β₁) − W(μ,β₂)| when β₁, β₂ differ only on a set of diameter ``diam`` and mass ``eta``."""
    if diam < 0 or eta < 0:
        raise ValueError("diam and eta must be nonnegative")
    if eta > 1:
        raise ValueError("eta is a mass and cannot exceed 1")
    return cost.lipschitz_bound * diam * eta


# --- 1D transport between piecewise-constant densities ---------------------------

def _cdf_knots(measure: GridMeasure):
    edges = measure.box.axis_edges(0)
    m = measure.masses
    cum = np.concatenate([[0.0], np.cumsum(m)])
    cum /= cum[-1]
    return edges, m / m.sum(), cum


def _quantile_pieces(edges, masses, cum, u_mid):
    """Index of the cell whose linear quantile piece contains each level in ``u_mid``."""
    width = np.diff(cum)
    k = np.searchsorted(cum, u_mid, side="right") - 1
    k = np.clip(k, 0, len(masses) - 1)
    # cells whose CDF step is zero in floating point (empty or negligible mass) defer to the
    # next charged cell, or to the last one past the end
    charged = np.flatnonzero(width > 0)
    nxt = np.searchsorted(charged, np.arange(len(width)))
    return charged[np.minimum(nxt, len(charged) - 1)][k]


def _quantile_eval(edges, masses, cum, k, u):
    h = edges[1] - edges[0]
    frac = np.clip((u - cum[k]) / (cum[k + 1] - cum[k]), 0.0, 1.0)
    return edges[k] + frac * h


def density_transport_1d(mu: GridMeasure, beta: GridMeasure):
    """Exact ½|x−y|² transport between piecewise-constant 1D densities.

    Unlike :func:`wasserstein` this treats both measures as densities that are
    constant on each cell, not as cell-center atoms.  Returns ``(value,
    psi_bar)`` where ``psi_bar[j]`` is the cell average over cell j of the
    Kantorovich potential on the ``beta`` side, normalized so that ψ vanishes
    at the left end of the box.
    """
    if mu.box.dim != 1 or beta.box.dim != 1:
        raise StructureError("density_transport_1d is one-dimensional")
    ex, mx, Fx = _cdf_knots(mu)
    ey, my, Fy = _cdf_knots(beta)

    # value: integrate (Q_mu - Q_beta)^2 over merged levels; both are linear on each piece
    levels = np.unique(np.concatenate([Fx, Fy]))
    ua, ub = levels[:-1], levels[1:]
    ok = ub > ua
    ua, ub = ua[ok], ub[ok]
    um = 0.5 * (ua + ub)
    kx = _quantile_pieces(ex, mx, Fx, um)
    ky = _quantile_pieces(ey, my, Fy, um)
    da = _quantile_eval(ex, mx, Fx, kx, ua) - _quantile_eval(ey, my, Fy, ky, ua)
    db = _quantile_eval(ex, mx, Fx, kx, ub) - _quantile_eval(ey, my, Fy, ky, ub)
    # exact integral of a squared linear function
    value = 0.5 * float(np.sum((ub - ua) * (da * da + da * db + db * db) / 3.0))

    # potential: psi'(t) = t - S(t), S = Q_mu o F_beta; piecewise linear between breakpoints
    hy = ey[1] - ey[0]
    cuts = [ey]
    inner = Fx[1:-1]
    kc = _quantile_pieces(ey, my, Fy, inner)
    cuts.append(_quantile_eval(ey, my, Fy, kc, inner))
    t = np.unique(np.clip(np.concatenate(cuts), ey[0], ey[-1]))
    ta, tb = t[:-1], t[1:]
    ok = tb > ta
    ta, tb = ta[ok], tb[ok]
    tm = 0.5 * (ta + tb)
    cell = np.clip(np.floor((tm - ey[0]) / hy).astype(int), 0, len(my) - 1)
    u_a = Fy[cell] + my[cell] * (ta - ey[cell]) / hy
    u_b = Fy[cell] + my[cell] * (tb - ey[cell]) / hy
    u_m = 0.5 * (u_a + u_b)
    kq = _quantile_pieces(ex, mx, Fx, u_m)
    ga = ta - _quantile_eval(ex, mx, Fx, kq, u_a)
    gb = tb - _quantile_eval(ex, mx, Fx, kq, u_b)
    L = tb - ta
    inc = 0.5 * L * (ga + gb)
    psi_a = np.concatenate([[0.0], np.cumsum(inc)[:-1]])
    psi_m = psi_a + 0.25 * L * (ga + 0.5 * (ga + gb))
    psi_b = psi_a + inc
    area = L * (psi_a + 4.0 * psi_m + psi_b) / 6.0
    psi_bar = np.bincount(cell, weights=area, minlength=len(my)) / hy
    return value, psi_bar


def density_w2_1d(mu: GridMeasure, beta: GridMeasure) -> float:
    return density_transport_1d(mu, beta)[0]


def measure_from_samples(box: Box, samples: Sequence) -> GridMeasure:
    """Histogram of sample points on ``box`` as a GridMeasure."""
    pts = np.asarray(samples, dtype=float).reshape(-1, box.dim)
    edges = [box.axis_edges(a) for a in range(box.dim)]
    H, _ = np.histogramdd(pts, bins=edges)
    return GridMeasure.from_masses(box, H)
