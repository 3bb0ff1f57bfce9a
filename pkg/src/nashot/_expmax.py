"""Exact solver for the convex program shared by the Nash and continuum problems.

Both reduce to

    minimize_u  Σ_y ν_y · exp(max_i (u_i − C_iy)) − Σ_i w_i u_i

whose minimizer gives a split θ_iy of every atom y among the maximizing
indices with Σ_y ν_y e^{u_i − C_iy} θ_iy = w_i.  For the Nash problem
w_i = 1/N and κ_i = e^{−u_i}/N; for the atomic entropy-plus-transport problem
w_i = μ_i and β_y = ν_y e^{max_i(u_i − C_iy)}.

The max is smoothed to τ·logsumexp(·/τ) and Newton's method is run along a
decreasing τ schedule.  Once the smoothed solution identifies which indices
tie on which atoms, the tie equations are solved exactly ("polish").
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog, lsq_linear
from scipy.sparse import csr_matrix
from scipy.sparse.linalg import lsqr, spsolve
from scipy.special import logsumexp

EDGE_THRESHOLDS = (1e-6, 1e-9, 1e-3)
TIE_TOL = 1e-10


@dataclass
class ExpMaxSolution:
    u: np.ndarray
    theta: np.ndarray
    residual: float
    newton_steps: int
    tau: float
    exact: bool


def _smoothed(C, nu, w, u, tau, full=True):
    Z = (u[:, None] - C) / tau
    zmax = Z.max(axis=0)
    E = np.exp(Z - zmax)
    s = E.sum(axis=0)
    m = tau * (zmax + np.log(s))
    with np.errstate(over="ignore"):  # rejected trial steps may overflow; their value is then inf
        em = np.exp(m)
    val = float(np.dot(nu, em) - np.dot(w, u))
    if not full:
        return val
    P = E / s
    wy = nu * em
    g = P @ wy - w
    return val, g, P, wy


def _hessian(P, wy, tau):
    N = P.shape[0]
    top = P.argmax(axis=0)
    cols = np.arange(P.shape[1])
    rest = P.copy()
    rest[top, cols] = 0.0
    others = rest.sum(axis=0)
    mixed = others > 1e-20
    H = np.zeros((N, N))
    # one-hot columns contribute only to the diagonal
    np.add.at(H, (top[~mixed], top[~mixed]), wy[~mixed])
    if mixed.any():
        Pm, Wm = P[:, mixed], wy[mixed]
        # entries below 1e-40 contribute under 1e-27 relative even at the smallest τ
        live = Pm > 1e-40
        if np.count_nonzero(live) < 0.1 * Pm.size:
            Ps = csr_matrix(np.where(live, Pm, 0.0))
            A = (Ps.multiply(Wm[None, :]) @ Ps.T).toarray()
        else:
            A = (Pm * Wm) @ Pm.T
        # 1 - p_i, accurate for the dominant entry of each column
        comp = 1.0 - Pm
        comp[top[mixed], np.arange(Pm.shape[1])] = others[mixed]
        Q = -A.copy()
        Q[np.diag_indices(N)] = (Pm * comp) @ Wm
        H += A + Q / tau
    return H


def _newton(C, nu, w, u, tau, max_iter=100):
    steps = 0
    for _ in range(max_iter):
        val, g, P, wy = _smoothed(C, nu, w, u, tau)
        H = _hessian(P, wy, tau)
        try:
            d = -sla.cho_solve(sla.cho_factor(H), g)
        except (np.linalg.LinAlgError, ValueError):
            d = -np.linalg.lstsq(H, g, rcond=None)[0]
        dec = -float(g @ d)
        if not np.isfinite(dec) or dec < 1e-26:
            break
        t = 1.0
        slack = 1e-15 * max(1.0, abs(val))
        while True:
            v2 = _smoothed(C, nu, w, u + t * d, tau, full=False)
            if np.isfinite(v2) and v2 <= val - 0.25 * t * dec + slack:
                break
            t *= 0.5
            if t < 1e-12:
                break
        if t < 1e-12:
            break
        u = u + t * d
        steps += 1
        if dec < 1e-22:
            break
    _, g, P, _ = _smoothed(C, nu, w, u, tau)
    return u, P, steps, float(np.abs(g).max())


def _components(n_players, split_sets):
    parent = list(range(n_players))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for members in split_sets.values():
        r0 = find(members[0])
        for i in members[1:]:
            ri = find(i)
            if ri != r0:
                parent[ri] = r0
    return np.array([find(i) for i in range(n_players)])


def _offsets(C, u_guess, split_sets, n_players):
    """Relative duals r with r_i − C_iy equal across every split atom, via BFS per component."""
    by_player = [[] for _ in range(n_players)]
    for y, members in split_sets.items():
        for i in members:
            by_player[i].append(y)
    r = np.full(n_players, np.nan)
    for root in range(n_players):
        if not np.isnan(r[root]):
            continue
        r[root] = u_guess[root]
        stack = [root]
        while stack:
            i = stack.pop()
            for y in by_player[i]:
                level = r[i] - C[i, y]
                for j in split_sets[y]:
                    if np.isnan(r[j]):
                        r[j] = level + C[j, y]
                        stack.append(j)
    return r


def _prune_inconsistent(C, u_guess, split_sets, N):
    """Drop tie edges that contradict the offsets implied by the rest of the forest."""
    for _ in range(N + 1):
        r = _offsets(C, u_guess, split_sets, N)
        changed = False
        for y in list(split_sets):
            members = split_sets[y]
            lev = np.array([r[i] - C[i, y] for i in members])
            keep = [i for i, lv in zip(members, lev) if lev.max() - lv <= 1e-9]
            if len(keep) != len(members):
                changed = True
                _set_members(split_sets, y, keep)
        if not changed:
            return r
    return _offsets(C, u_guess, split_sets, N)


def _set_members(split_sets, y, members):
    if len(members) > 1:
        split_sets[y] = members
    else:
        split_sets.pop(y, None)


def _nonnegative_vertex(A, b):
    lp = linprog(np.zeros(A.shape[1]), A_eq=csr_matrix(A), b_eq=b, bounds=(0, None), method="highs")
    if lp.status != 0:
        return None
    supp = lp.x > 1e-12 * max(1.0, lp.x.max())
    sol = np.zeros(A.shape[1])
    sub = csr_matrix(A[:, supp])
    if sub.shape[0] == sub.shape[1]:
        sol[supp] = spsolve(sub.tocsc(), b)
    else:
        sol[supp] = lsqr(sub, b, atol=1e-16, btol=1e-16, iter_lim=10 * sub.shape[1])[0]
    if np.any(sol < 0) or np.abs(A @ sol - b).max() > 1e-12 * np.abs(b).max():
        return None
    return sol


def _solve_ties(C, nu, w, r, split_sets, owner_hint):
    N, M = C.shape
    comp = _components(N, split_sets)
    _, comp_idx = np.unique(comp, return_inverse=True)
    K = comp_idx.max() + 1
    single = np.ones(M, dtype=bool)
    single[list(split_sets)] = False
    ys = np.flatnonzero(single)
    own_y = owner_hint[ys]
    edge_list = [(i, y) for y, members in split_sets.items() for i in members]

    # unknowns: [E_0..E_{K-1}, x_e per split edge]; rows: indices, then split atoms
    n_unk = K + len(edge_list)
    n_row = N + len(split_sets)
    A = np.zeros((n_row, n_unk))
    b = np.zeros(n_row)
    own = np.zeros(N)
    np.add.at(own, own_y, nu[ys] * np.exp(r[own_y] - C[own_y, ys]))
    A[np.arange(N), comp_idx] = own
    b[:N] = w
    row_of_atom = {y: N + k for k, y in enumerate(split_sets)}
    for e, (i, y) in enumerate(edge_list):
        A[i, K + e] = nu[y] * np.exp(r[i] - C[i, y])
        A[row_of_atom[y], K + e] = 1.0
    for y, members in split_sets.items():
        A[row_of_atom[y], comp_idx[members[0]]] = -1.0

    sol = None
    if n_row == n_unk:
        try:
            sol = np.linalg.solve(A, b)
        except np.linalg.LinAlgError:
            pass
    if sol is None:
        # cycles among tied indices leave the split underdetermined: take a nonnegative
        # vertex from an LP and re-solve exactly on its support
        sol = _nonnegative_vertex(A, b)
        if sol is None:
            sol = lsq_linear(A, b, bounds=(0.0, np.inf), method="bvls", tol=1e-15).x
    return sol, comp_idx, K, ys, own_y, edge_list


def polish(C, nu, w, u_guess, P, edge_threshold=1e-6, max_rounds=50):
    """Solve the tie equations exactly on the support suggested by ``P``.

    Edges whose split mass comes out negative are dropped and the system is
    solved again.  Returns ``(u, theta)`` or ``None`` when no verified optimum
    is reached.
    """
    N, M = C.shape
    owner_hint = P.argmax(axis=0)
    edges = P > edge_threshold
    edges[owner_hint, np.arange(M)] = True
    split_sets = {int(y): [int(i) for i in np.flatnonzero(edges[:, y])]
                  for y in np.flatnonzero(edges.sum(axis=0) > 1)}

    for _ in range(max_rounds):
        r = _prune_inconsistent(C, u_guess, split_sets, N)
        sol, comp_idx, K, ys, own_y, edge_list = _solve_ties(C, nu, w, r, split_sets, owner_hint)
        if not np.all(np.isfinite(sol)):
            return None
        scale = np.abs(sol).max()
        neg = [e for e in range(len(edge_list)) if sol[K + e] < -1e-13 * scale]
        if neg or np.any(sol[:K] <= 0):
            if not neg:
                return None
            for e in neg:
                i, y = edge_list[e]
                _set_members(split_sets, y, [k for k in split_sets.get(y, []) if k != i])
                if y not in split_sets and owner_hint[y] == i:
                    owner_hint[y] = next(k for k in np.argsort(-P[:, y]) if k != i)
            continue
        sol = np.maximum(sol, 0.0)
        E = sol[:K]
        u = np.log(E[comp_idx]) + r
        theta = np.zeros((N, M))
        theta[own_y, ys] = 1.0
        for e, (i, y) in enumerate(edge_list):
            theta[i, y] = sol[K + e] / E[comp_idx[i]]
        if verify(C, nu, w, u, theta):
            return u, theta
        return None
    return None


def kkt_residual(C, nu, w, u, theta):
    """(tie residual, stationarity residual) of a candidate solution."""
    score = u[:, None] - C
    best = score.max(axis=0)
    tie = float(np.max(np.where(theta > 0, best - score, 0.0)))
    col = float(np.max(np.abs(theta.sum(axis=0) - 1.0)))
    stat = np.exp(score) * theta @ nu
    rel = float(np.max(np.abs(stat - w) / w))
    return tie, max(col, rel)


def verify(C, nu, w, u, theta, tie_tol=TIE_TOL, stat_tol=1e-10):
    if np.any(theta < 0) or not np.all(np.isfinite(theta)):
        return False
    tie, stat = kkt_residual(C, nu, w, u, theta)
    return tie <= tie_tol and stat <= stat_tol


def initial_duals(C, nu, w):
    """Each index pretends to own every atom: e^{u_i} Σ_y ν_y e^{−C_iy} = w_i."""
    return np.log(w) - logsumexp(-C, b=nu[None, :], axis=1)


def solve_expmax(C, nu, w, u0=None, tau0=None, tau_min=1e-13, max_newton=100):
    C = np.asarray(C, dtype=float)
    nu = np.asarray(nu, dtype=float)
    w = np.asarray(w, dtype=float)
    N, M = C.shape
    if N == 1:
        u = np.log(w) - logsumexp(-C[0], b=nu)[None]
        theta = np.ones((1, M))
        return ExpMaxSolution(u, theta, 0.0, 0, 0.0, True)
    u = initial_duals(C, nu, w) if u0 is None else np.asarray(u0, dtype=float)
    tau = tau0 if tau0 is not None else max(1.0, float(C.max() - C.min()))
    steps = 0
    best = None
    factor = 0.1
    prev_tau = None
    while tau >= tau_min:
        u_new, P, k, gmax = _newton(C, nu, w, u, tau, max_newton)
        steps += k
        if gmax > 1e-6 * w.max() and prev_tau is not None and factor < 0.95:
            # heavily tied problems need a gentler schedule to stay in Newton's basin
            factor = np.sqrt(factor)
            tau = prev_tau * factor
            continue
        u = u_new
        if tau <= 1e-6:
            for thr in EDGE_THRESHOLDS:
                got = polish(C, nu, w, u, P, thr)
                if got is not None:
                    break
            if got is not None:
                up, theta = got
                return ExpMaxSolution(up, theta, max(kkt_residual(C, nu, w, up, theta)), steps, tau, True)
        best = (u, P, tau)
        prev_tau = tau
        tau *= factor
    u, P, tau = best
    theta = P * (P > 1e-300)
    return ExpMaxSolution(u, theta, max(kkt_residual(C, nu, w, u, theta)), steps, tau, False)
