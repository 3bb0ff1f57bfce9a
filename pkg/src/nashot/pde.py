"""Potential-side view: convex grid potentials φ with β = (∇φ)_#μ.

Nodes are the cell centers of μ's box.  The functional minimized over
convex φ is

    G(φ) = −∫ ln(det D²φ · ν(∇φ)) dμ + ½ ∫ |x − ∇φ|² dμ,

which equals H_ν(β_φ) + W²(μ, β_φ) − ∫ ln μ dμ.  Its Euler–Lagrange
equation is

    C^{ij} ∂_ij (μ / det D²φ) = div( μ ∇ln ν(∇φ) + μ (x − ∇φ) ),

with C the cofactor matrix of D²φ (in 1D: (μ/φ″)″ = (μ ν′(φ′)/ν(φ′) + μ(x − φ′))′).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator, RegularGridInterpolator, make_interp_spline
from scipy.spatial import ConvexHull
from scipy.stats import wasserstein_distance

from .errors import ConvexityError, RangeError, StructureError
from .measure import Box, CostSpec, GridMeasure, wasserstein

CONVEXITY_SLACK = 1e-10
RANGE_SLACK = 1e-9
MIN_EL_RESOLUTION = 8


def _second_diff(v: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Second derivative along ``axis``: centered inside, second-order one-sided at the ends."""
    v = np.moveaxis(v, axis, 0)
    out = np.empty_like(v)
    out[1:-1] = v[2:] - 2 * v[1:-1] + v[:-2]
    if len(v) >= 4:
        out[0] = 2 * v[0] - 5 * v[1] + 4 * v[2] - v[3]
        out[-1] = 2 * v[-1] - 5 * v[-2] + 4 * v[-3] - v[-4]
    else:
        out[0], out[-1] = out[1], out[-2]
    return np.moveaxis(out / h ** 2, 0, axis)


@dataclass(frozen=True, eq=False)
class PotentialField:
    """φ sampled at the cell centers of ``box``; rejected unless discretely convex."""

    box: Box
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.size != self.box.n_cells:
            raise StructureError(f"expected {self.box.n_cells} node values, got {v.size}")
        v = v.reshape(self.box.shape)
        if not np.all(np.isfinite(v)):
            raise StructureError("potential values must be finite")
        if min(self.box.shape) < 3:
            raise StructureError("need at least 3 nodes per axis to difference")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        worst = self.convexity_defect()
        if worst < -CONVEXITY_SLACK:
            raise ConvexityError(f"potential is not discretely convex (defect {worst:.3e})")

    @classmethod
    def from_function(cls, box: Box, fn) -> "PotentialField":
        grids = np.meshgrid(*[box.axis_centers(a) for a in range(box.dim)], indexing="ij")
        return cls(box, fn(*grids))

    def convexity_defect(self) -> float:
        """Most negative second difference (1D) or Hessian eigenvalue (2D) at interior nodes, in h² units."""
        v = self.values
        if self.box.dim == 1:
            return float(np.min(v[2:] - 2 * v[1:-1] + v[:-2]))
        hx, hy = self.box.widths
        hx2 = min(hx, hy) ** 2
        hxx, hyy, hxy = (h[1:-1, 1:-1] * hx2 for h in self._hessian_parts())
        mean = 0.5 * (hxx + hyy)
        rad = np.sqrt(0.25 * (hxx - hyy) ** 2 + hxy ** 2)
        return float(np.min(mean - rad))

    def _hessian_parts(self):
        v = self.values
        hx, hy = self.box.widths
        hxx = _second_diff(v, hx, 0)
        hyy = _second_diff(v, hy, 1)
        hxy = np.gradient(np.gradient(v, hx, axis=0, edge_order=2), hy, axis=1, edge_order=2)
        # 9-point cross stencil inside
        hxy[1:-1, 1:-1] = (v[2:, 2:] - v[2:, :-2] - v[:-2, 2:] + v[:-2, :-2]) / (4 * hx * hy)
        return hxx, hyy, hxy

    def gradient(self) -> np.ndarray:
        """∇φ at every node, shape ``box.shape + (dim,)``."""
        v = self.values
        if self.box.dim == 1:
            return np.gradient(v, self.box.widths[0], edge_order=2)[:, None]
        gx, gy = np.gradient(v, *self.box.widths, edge_order=2)
        return np.stack([gx, gy], axis=-1)

    def hessian(self) -> np.ndarray:
        if self.box.dim == 1:
            return _second_diff(self.values, self.box.widths[0], 0)[:, None, None]
        hxx, hyy, hxy = self._hessian_parts()
        return np.stack([np.stack([hxx, hxy], -1), np.stack([hxy, hyy], -1)], -2)

    def det_hessian(self) -> np.ndarray:
        if self.box.dim == 1:
            return _second_diff(self.values, self.box.widths[0], 0)
        hxx, hyy, hxy = self._hessian_parts()
        return hxx * hyy - hxy ** 2

    def nodes(self) -> np.ndarray:
        return self.box.centers().reshape(self.box.shape + (self.box.dim,))

    def check_range(self, ybox: Box) -> None:
        g = self.gradient().reshape(-1, self.box.dim)
        slack = RANGE_SLACK * max(1.0, ybox.diameter())
        if not np.all(ybox.contains(g, slack)):
            raise RangeError("∇φ leaves the Y box")

    def to_json(self) -> str:
        return json.dumps({"box": self.box.to_dict(), "values": self.values.ravel().tolist()})

    @classmethod
    def from_json(cls, text: str) -> "PotentialField":
        d = json.loads(text)
        return cls(Box.from_dict(d["box"]), d["values"])


def convexify(phi_values, box: Box) -> PotentialField:
    """Largest convex function below the node values (lower convex envelope), sampled at the nodes.

    In 2D the envelope is convex, but its finite-difference Hessian can still be
    indefinite along creases oblique to the grid; such results are rejected
    with ConvexityError like any other non-convex field.
    """
    v = np.asarray(phi_values, dtype=float).reshape(box.shape)
    pts = box.centers()
    if box.dim == 1:
        x = pts[:, 0]
        y = v.ravel()
        hull = []
        for k in range(len(x)):
            while len(hull) >= 2:
                a, b = hull[-2], hull[-1]
                if (y[b] - y[a]) * (x[k] - x[a]) >= (y[k] - y[a]) * (x[b] - x[a]):
                    hull.pop()
                else:
                    break
            hull.append(k)
        return PotentialField(box, np.interp(x, x[hull], y[hull]))
    hull = ConvexHull(np.column_stack([pts, v.ravel()]))
    eq = hull.equations[hull.equations[:, 2] < -1e-14]
    # each lower facet a·x + b·y + c·z + d = 0 is the plane z = −(a x + b y + d)/c
    planes = -(pts @ eq[:, :2].T + eq[:, 3]) / eq[:, 2]
    return PotentialField(box, np.minimum(planes.max(axis=1), v.ravel()))


def _require_same_box(phi: PotentialField, mu: GridMeasure):
    if phi.box != mu.box:
        raise StructureError("φ must be sampled at the cell centers of μ's box")


def _sample_density(measure: GridMeasure, points: np.ndarray) -> np.ndarray:
    """Linear interpolation of the cell-center density, constant beyond the outer centers."""
    box = measure.box
    if box.dim == 1:
        return np.interp(points[:, 0], box.axis_centers(0), measure.density.ravel())
    axes = [box.axis_centers(a) for a in range(2)]
    clipped = np.column_stack([np.clip(points[:, a], axes[a][0], axes[a][-1]) for a in range(2)])
    return RegularGridInterpolator(axes, measure.density, method="linear")(clipped)


def _grad_log_density(measure: GridMeasure, points: np.ndarray) -> np.ndarray:
    box = measure.box
    logd = np.log(measure.density)
    if box.dim == 1:
        c = box.axis_centers(0)
        g = np.gradient(logd, c, edge_order=2) if len(c) >= 3 else np.zeros_like(c)
        return np.interp(points[:, 0], c, g)[:, None]
    axes = [box.axis_centers(a) for a in range(2)]
    grads = np.gradient(logd, *axes, edge_order=2)
    clipped = np.column_stack([np.clip(points[:, a], axes[a][0], axes[a][-1]) for a in range(2)])
    return np.column_stack([RegularGridInterpolator(axes, g, method="linear")(clipped) for g in grads])


def functional_g(phi: PotentialField, mu: GridMeasure, nu: GridMeasure) -> float:
    _require_same_box(phi, mu)
    phi.check_range(nu.box)
    det = phi.det_hessian().ravel()
    if np.any(det <= 0):
        raise ConvexityError("det D²φ ≤ 0 at a node; ln det is undefined")
    grad = phi.gradient().reshape(-1, phi.box.dim)
    nu_at = _sample_density(nu, grad)
    if np.any(nu_at <= 0):
        raise RangeError("ν vanishes at ∇φ(x)")
    x = mu.box.centers()
    m = mu.masses
    return float(-np.dot(m, np.log(det * nu_at)) + 0.5 * np.dot(m, ((x - grad) ** 2).sum(axis=1)))


def _interior(box: Box, margin: int) -> tuple:
    return tuple(slice(margin, n - margin) for n in box.shape)


def monge_ampere_residual(phi: PotentialField, mu: GridMeasure, beta: GridMeasure) -> float:
    """max |det D²φ(x) · β(∇φ(x)) − μ(x)| over nodes at least two cells from the boundary."""
    _require_same_box(phi, mu)
    phi.check_range(beta.box)
    inner = _interior(phi.box, 2)
    det = phi.det_hessian()[inner].ravel()
    grad = phi.gradient()[inner].reshape(-1, phi.box.dim)
    b = _sample_density(beta, grad)
    return float(np.abs(det * b - mu.density[inner].ravel()).max())


def euler_lagrange_residual(phi: PotentialField, mu: GridMeasure, nu: GridMeasure) -> float:
    """max |L(μ/det D²φ) − div(μ∇ln ν(∇φ) + μ(x − ∇φ))| at nodes ≥ 2 cells from the boundary.

    ∇ln ν is held constant beyond the outer cell centers of ν, so fields whose
    gradient slightly overshoots Y (e.g. deliberately perturbed ones) still
    get a residual.
    """
    _require_same_box(phi, mu)
    if min(phi.box.shape) < MIN_EL_RESOLUTION:
        raise StructureError(f"need at least {MIN_EL_RESOLUTION} nodes per axis")
    if np.any(nu.density <= 0):
        raise StructureError("ν must be positive to take ln ν")
    v = phi.values
    dens = mu.density
    if phi.box.dim == 1:
        h = phi.box.widths[0]
        x = phi.box.axis_centers(0)
        d2 = (v[2:] - 2 * v[1:-1] + v[:-2]) / h ** 2
        d1 = (v[2:] - v[:-2]) / (2 * h)
        if np.any(d2 <= 0):
            raise ConvexityError("φ″ ≤ 0 at an interior node")
        m = dens[1:-1]
        q = m / d2
        lhs = (q[2:] - 2 * q[1:-1] + q[:-2]) / h ** 2
        flux = m * _grad_log_density(nu, d1[:, None])[:, 0] + m * (x[1:-1] - d1)
        rhs = (flux[2:] - flux[:-2]) / (2 * h)
        return float(np.abs(lhs - rhs).max())

    hx, hy = phi.box.widths
    inner = (slice(1, -1), slice(1, -1))
    hxx, hyy, hxy = (p[inner] for p in phi._hessian_parts())
    det = hxx * hyy - hxy ** 2
    if np.any(det <= 0):
        raise ConvexityError("det D²φ ≤ 0 at an interior node")
    grad = phi.gradient()[inner]
    m = dens[inner]
    q = m / det
    # L q = C^{xx} q_xx + 2 C^{xy} q_xy + C^{yy} q_yy, with C = cof(D²φ) = [[φ_yy, −φ_xy], [−φ_xy, φ_xx]]
    qxx = (q[2:, 1:-1] - 2 * q[1:-1, 1:-1] + q[:-2, 1:-1]) / hx ** 2
    qyy = (q[1:-1, 2:] - 2 * q[1:-1, 1:-1] + q[1:-1, :-2]) / hy ** 2
    qxy = (q[2:, 2:] - q[2:, :-2] - q[:-2, 2:] + q[:-2, :-2]) / (4 * hx * hy)
    c = (slice(1, -1), slice(1, -1))
    lhs = hyy[c] * qxx - 2 * hxy[c] * qxy + hxx[c] * qyy
    x = phi.nodes()[inner]
    glog = _grad_log_density(nu, grad.reshape(-1, 2)).reshape(grad.shape)
    flux = m[..., None] * (glog + x - grad)
    div = ((flux[2:, 1:-1, 0] - flux[:-2, 1:-1, 0]) / (2 * hx)
           + (flux[1:-1, 2:, 1] - flux[1:-1, :-2, 1]) / (2 * hy))
    return float(np.abs(lhs - div).max())


def cofactor_divergence(phi: PotentialField) -> float:
    """max over interior nodes of |Σ_i ∂_i C^{ij}| for the cofactor matrix of D²φ (2D only)."""
    if phi.box.dim != 2:
        raise StructureError("the cofactor divergence check is two-dimensional")
    hx, hy = phi.box.widths
    hxx, hyy, hxy = phi._hessian_parts()
    # column x: ∂_x φ_yy − ∂_y φ_xy ; column y: −∂_x φ_xy + ∂_y φ_xx
    col_x = (hyy[2:, 1:-1] - hyy[:-2, 1:-1]) / (2 * hx) - (hxy[1:-1, 2:] - hxy[1:-1, :-2]) / (2 * hy)
    col_y = -(hxy[2:, 1:-1] - hxy[:-2, 1:-1]) / (2 * hx) + (hxx[1:-1, 2:] - hxx[1:-1, :-2]) / (2 * hy)
    c = (slice(1, -1), slice(1, -1))
    return float(max(np.abs(col_x[c]).max(), np.abs(col_y[c]).max()))


# --------------------------------------------------------------------------- recovery from β

def _cdf_interpolant(edges: np.ndarray, masses: np.ndarray):
    """Smooth monotone-ish CDF on the support of a 1D cell measure, with its support interval."""
    pos = np.flatnonzero(masses > 0)
    lo, hi = pos[0], pos[-1] + 1
    e = edges[lo:hi + 1]
    cum = np.concatenate([[0.0], np.cumsum(masses[lo:hi])])
    cum /= cum[-1]
    if np.all(masses[lo:hi] > 0) and len(e) >= 6:
        # the quintic CDF spline gives a C⁴ quantile map, which the fourth-order residual needs
        return make_interp_spline(e, cum, k=5), e, cum
    return PchipInterpolator(e, cum), e, cum


def _quantile_map(mu: GridMeasure, beta: GridMeasure):
    fm, _, _ = _cdf_interpolant(mu.box.axis_edges(0), mu.masses)
    fb, eb, cb = _cdf_interpolant(beta.box.axis_edges(0), beta.masses)
    dfb = fb.derivative()

    def transport(x):
        u = np.clip(fm(np.clip(x, mu.box.lo[0], mu.box.hi[0])), 0.0, 1.0)
        t = np.interp(u, cb, eb)
        for _ in range(40):
            d = dfb(t)
            step = np.where(d > 1e-300, (fb(t) - u) / np.where(d > 1e-300, d, 1.0), 0.0)
            t_new = np.clip(t - step, eb[0], eb[-1])
            if np.max(np.abs(t_new - t)) <= 1e-15 * max(1.0, np.abs(eb).max()):
                t = t_new
                break
            t = t_new
        return t

    return transport


def potential_from_beta(mu: GridMeasure, beta: GridMeasure) -> PotentialField:
    """Convex φ on μ's nodes with (∇φ)_#μ ≈ β, anchored at φ(first node) = 0 in 1D."""
    if mu.box.dim != beta.box.dim:
        raise StructureError("μ and β must live in the same dimension")
    x = mu.box.centers()
    if mu == beta:
        # identity map: quadratic sampled exactly
        sq = 0.5 * (x ** 2).sum(axis=1)
        return PotentialField(mu.box, sq - sq[0])
    if mu.box.dim == 1:
        transport = _quantile_map(mu, beta)
        xs = x[:, 0]
        g, gw = np.polynomial.legendre.leggauss(8)
        a, b = xs[:-1], xs[1:]
        pts = 0.5 * (a + b)[:, None] + 0.5 * (b - a)[:, None] * g[None, :]
        inc = (transport(pts) * gw).sum(axis=1) * 0.5 * (b - a)
        return PotentialField(mu.box, np.concatenate([[0.0], np.cumsum(inc)]))
    ot = wasserstein(mu, beta, method="lp")
    ys = beta.box.centers()
    keep = beta.masses > 0
    # Brenier potential |x|²/2 − φ_K = max_y ⟨x,y⟩ − |y|²/2 + ψ_y, taken over the support of β
    lift = ys[keep] @ x.T - 0.5 * (ys[keep] ** 2).sum(axis=1)[:, None] + np.asarray(ot.psi)[keep][:, None]
    vals = lift.max(axis=0)
    return PotentialField(mu.box, vals - vals[0])


def pushforward(phi: PotentialField, mu: GridMeasure, ybox: Box) -> GridMeasure:
    """(∇φ)_#μ on the grid of ``ybox``.

    In 1D each μ-cell is mapped affinely onto [∇φ(left edge), ∇φ(right edge)],
    with edge gradients interpolated between nodes, and spread over the Y cells
    it overlaps.  In 2D each node's mass is deposited in the Y cell containing
    ∇φ(node).
    """
    _require_same_box(phi, mu)
    phi.check_range(ybox)
    m = mu.masses
    if phi.box.dim == 1:
        g = phi.gradient()[:, 0]
        xs = phi.box.axis_centers(0)
        ex = phi.box.axis_edges(0)
        t_edges = np.interp(ex, xs, g)
        t_edges[0] = g[0] - (g[1] - g[0]) / 2
        t_edges[-1] = g[-1] + (g[-1] - g[-2]) / 2
        t_edges = np.clip(np.maximum.accumulate(t_edges), ybox.lo[0], ybox.hi[0])
        ey = ybox.axis_edges(0)
        out = np.zeros(ybox.n_cells)
        for k in range(len(m)):
            a, b = t_edges[k], t_edges[k + 1]
            if b - a <= 1e-15:
                j = min(max(np.searchsorted(ey, a, side="right") - 1, 0), len(out) - 1)
                out[j] += m[k]
                continue
            overlap = np.clip(np.minimum(ey[1:], b) - np.maximum(ey[:-1], a), 0.0, None)
            out += m[k] * overlap / (b - a)
        return GridMeasure.from_masses(ybox, out)
    g = phi.gradient().reshape(-1, 2)
    idx = []
    for a in range(2):
        j = np.floor((g[:, a] - ybox.lo[a]) / ybox.widths[a]).astype(int)
        idx.append(np.clip(j, 0, ybox.resolution[a] - 1))
    out = np.zeros(ybox.shape)
    np.add.at(out, (idx[0], idx[1]), m)
    return GridMeasure.from_masses(ybox, out)


def w1_distance(a: GridMeasure, b: GridMeasure) -> float:
    """1-Wasserstein distance between the cell-center atoms of two grid measures."""
    if a.box.dim == 1:
        return float(wasserstein_distance(a.box.axis_centers(0), b.box.axis_centers(0), a.masses, b.masses))
    dist = CostSpec.tabulated(lambda x, y: np.sqrt(((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)),
                              a.box, b.box, 1.0)
    return float(wasserstein(a, b, dist, method="lp").value)
