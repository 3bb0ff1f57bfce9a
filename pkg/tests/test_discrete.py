import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nashot.discrete import (AllocationPlan, PlayerSet, alpha_bounds_check, objective_f2, objective_np1,
                             ratio_residual, reassignment_gain, solve_nash, verify_cyclical_monotonicity)
from nashot.errors import StructureError
from nashot.laguerre import LaguerrePotential, decompose
from nashot.measure import Box, CostSpec, DiscreteMeasure, GridMeasure
from oracles import refine_grid_search, split_objective

UNIT = Box(0, 1, 64)
UNIT_COST = CostSpec.quadratic(Box(0, 1, 1), Box(0, 1, 1))


def random_plan(rng, players, nu, cost):
    """Columns of ν split among the players by Dirichlet fractions."""
    m = len(nu.weights)
    frac = rng.dirichlet(np.ones(players.n), size=m).T
    return AllocationPlan.from_mass(frac * nu.weights[None, :], players, nu, cost)


def random_instance(rng, n, m, dim=1):
    players = PlayerSet(rng.random((n, dim)))
    nu = DiscreteMeasure(rng.random((m, dim)), rng.dirichlet(np.ones(m)))
    box = Box([0] * dim, [1] * dim, [1] * dim)
    return players, nu, CostSpec.quadratic(box, box)


def two_atom_problem():
    players = PlayerSet([0.0, 1.0])
    nu = DiscreteMeasure([0.0, 1.0], [0.5, 0.5])
    return players, nu


# ----------------------------------------------------------------------------- PlayerSet / plan types

def test_players_reject_duplicates_and_empty():
    with pytest.raises(StructureError):
        PlayerSet([0.2, 0.5, 0.2])
    with pytest.raises(StructureError):
        PlayerSet(np.zeros((0, 1)))
    p = PlayerSet([0.1, 0.3])
    assert p.weights.sum() == 1.0 and p.dim == 1


def test_plan_rejects_column_mismatch():
    players, nu = two_atom_problem()
    with pytest.raises(StructureError):
        AllocationPlan.from_mass([[0.5, 0.1], [0.0, 0.5]], players, nu, UNIT_COST)
    with pytest.raises(StructureError):
        AllocationPlan.from_mass([[0.6, 0.5], [-0.1, 0.0]], players, nu, UNIT_COST)


def test_plan_json_is_sparse():
    players, nu = two_atom_problem()
    plan = AllocationPlan.from_mass([[0.5, 0.0], [0.0, 0.5]], players, nu, UNIT_COST)
    doc = json.loads(plan.to_json(0.0))
    assert doc["mass"] == [[0, 0, 0.5], [1, 1, 0.5]]
    assert set(doc) == {"players", "atoms", "mass", "alpha", "kappa", "objective"}


# ----------------------------------------------------------------------------- objectives

def test_single_player_objective_is_log_mean_surplus():
    nu = GridMeasure.uniform(UNIT)
    players = PlayerSet([0.3])
    plan = solve_nash(players, nu, UNIT_COST)
    expected = math.log(np.dot(nu.masses, np.exp(-0.5 * (0.3 - UNIT.axis_centers(0)) ** 2)))
    assert objective_np1(plan, players, UNIT_COST) == pytest.approx(expected, abs=1e-14)
    assert objective_f2(plan, players, UNIT_COST) == pytest.approx(expected, abs=1e-14)
    np.testing.assert_allclose(plan.alpha, [1.0])


def test_nearest_atom_split_has_objective_zero():
    players, nu = two_atom_problem()
    plan = AllocationPlan.from_mass([[0.5, 0.0], [0.0, 0.5]], players, nu, UNIT_COST)
    # ln 2 + ½(ln ½ + ln ½)
    assert objective_np1(plan, players, UNIT_COST) == pytest.approx(0.0, abs=1e-15)
    assert objective_f2(plan, players, UNIT_COST) == pytest.approx(0.0, abs=1e-15)


def test_starved_player_gives_minus_inf():
    players, nu = two_atom_problem()
    plan = AllocationPlan.from_mass([[0.5, 0.5], [0.0, 0.0]], players, nu, UNIT_COST)
    assert objective_np1(plan, players, UNIT_COST) == -math.inf
    assert objective_f2(plan, players, UNIT_COST) == -math.inf


def test_objective_rejects_wrong_player_count():
    players, nu = two_atom_problem()
    plan = AllocationPlan.from_mass([[0.5, 0.0], [0.0, 0.5]], players, nu, UNIT_COST)
    with pytest.raises(StructureError):
        objective_np1(plan, PlayerSet([0.0, 0.5, 1.0]), UNIT_COST)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(1, 64), st.integers(0, 2 ** 32 - 1))
def test_np1_equals_f2_on_feasible_plans(n, m, seed):
    rng = np.random.default_rng(seed)
    players, nu, cost = random_instance(rng, n, m)
    plan = random_plan(rng, players, nu, cost)
    assert abs(objective_np1(plan, players, cost) - objective_f2(plan, players, cost)) <= 1e-10


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.integers(2, 20), st.floats(0.01, 0.99), st.integers(0, 2 ** 32 - 1))
def test_objective_is_concave_along_segments(n, m, t, seed):
    rng = np.random.default_rng(seed)
    players, nu, cost = random_instance(rng, n, m, dim=2)
    P = random_plan(rng, players, nu, cost)
    Q = random_plan(rng, players, nu, cost)
    mix = AllocationPlan.from_mass(t * P.mass + (1 - t) * Q.mass, players, nu, cost)
    lhs = objective_np1(mix, players, cost)
    rhs = t * objective_np1(P, players, cost) + (1 - t) * objective_np1(Q, players, cost)
    assert lhs >= rhs - 1e-10


# ----------------------------------------------------------------------------- solver

def test_symmetric_pair_splits_at_midpoint():
    nu = GridMeasure.uniform(UNIT)
    players = PlayerSet([0.25, 0.75])
    plan = solve_nash(players, nu, UNIT_COST)
    np.testing.assert_allclose(plan.alpha, [0.5, 0.5], atol=1e-12)
    assert plan.kappa[0] == pytest.approx(plan.kappa[1], rel=1e-12)
    owners = plan.owners()
    y = UNIT.axis_centers(0)
    assert np.all(owners[y < 0.5] == 0) and np.all(owners[y > 0.5] == 1)


def test_two_atom_solution_matches_grid_search():
    players, nu = two_atom_problem()
    plan = solve_nash(players, nu, UNIT_COST)
    g = np.linspace(0, 1, 1001)
    F = split_objective(players, nu, UNIT_COST, np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2))
    assert F.max() == pytest.approx(0.0, abs=1e-12)
    assert objective_np1(plan, players, UNIT_COST) == pytest.approx(F.max(), abs=1e-12)
    np.testing.assert_allclose(plan.mass, [[0.5, 0.0], [0.0, 0.5]], atol=1e-12)


def test_single_player_takes_everything():
    nu = GridMeasure.uniform(Box([0, 0], [1, 1], [4, 4]))
    plan = solve_nash(PlayerSet([[0.4, 0.6]]), nu, CostSpec.quadratic(nu.box, nu.box))
    np.testing.assert_allclose(plan.mass, nu.masses[None, :])


@pytest.mark.parametrize("seed", range(6))
def test_pair_matches_refined_grid_search(seed):
    rng = np.random.default_rng(100 + seed)
    m = int(rng.integers(2, 6))
    players, nu, cost = random_instance(rng, 2, m)
    plan = solve_nash(players, nu, cost)
    assert objective_np1(plan, players, cost) == pytest.approx(refine_grid_search(players, nu, cost), abs=1e-6)


def test_pair_exhaustive_grid_two_atoms():
    rng = np.random.default_rng(11)
    players, nu, cost = random_instance(rng, 2, 2)
    g = np.linspace(0, 1, 1001)
    F = split_objective(players, nu, cost, np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2))
    plan = solve_nash(players, nu, cost)
    assert objective_np1(plan, players, cost) == pytest.approx(F.max(), abs=1e-6)


@pytest.mark.parametrize("n,dim,seed", [(2, 1, 0), (4, 1, 1), (8, 1, 2), (3, 2, 3), (8, 2, 4)])
def test_solver_output_is_optimal(n, dim, seed):
    rng = np.random.default_rng(seed)
    box = Box([0] * dim, [1] * dim, [48] if dim == 1 else [12, 12])
    nu = GridMeasure.from_masses(box, 0.5 + rng.random(box.n_cells))
    players = PlayerSet(rng.random((n, dim)))
    cost = CostSpec.quadratic(box, box)
    plan = solve_nash(players, nu, cost, tol=1e-8)
    assert np.abs(plan.mass.sum(axis=0) - nu.masses).max() <= 1e-10
    assert ratio_residual(plan, cost) <= 1e-8
    assert reassignment_gain(plan, cost) <= 1e-8
    assert verify_cyclical_monotonicity(plan, cost, n_tuples=1000, seed=seed).passed
    assert alpha_bounds_check(plan, cost).passed


def test_restarts_agree():
    rng = np.random.default_rng(5)
    nu = GridMeasure.from_masses(UNIT, 0.5 + rng.random(64))
    players = PlayerSet(rng.random(6))
    tol = 1e-8
    a = solve_nash(players, nu, UNIT_COST, tol=tol, seed=1)
    b = solve_nash(players, nu, UNIT_COST, tol=tol, seed=2)
    np.testing.assert_allclose(a.alpha, b.alpha, atol=10 * tol)
    np.testing.assert_allclose(a.kappa, b.kappa, atol=10 * tol)


def test_deterministic():
    rng = np.random.default_rng(6)
    nu = GridMeasure.uniform(Box([0, 0], [1, 1], [10, 10]))
    players = PlayerSet(rng.random((5, 2)))
    cost = CostSpec.quadratic(nu.box, nu.box)
    assert np.array_equal(solve_nash(players, nu, cost).mass, solve_nash(players, nu, cost).mass)


@pytest.mark.parametrize("dim", [1, 2])
def test_support_lies_in_reconstructed_laguerre_cells(dim):
    rng = np.random.default_rng(40 + dim)
    box = Box([0] * dim, [1] * dim, [64] if dim == 1 else [20, 20])
    nu = GridMeasure.from_masses(box, 0.5 + rng.random(box.n_cells))
    players = PlayerSet(rng.random((5, dim)))
    cost = CostSpec.quadratic(box, box)
    plan = solve_nash(players, nu, cost)
    decomp = decompose(LaguerrePotential.from_kappa(players, plan.kappa), nu)
    owner = decomp.cell_index.reshape(box.shape)
    rows, cols = np.nonzero(plan.mass > 1e-14)
    for i, c in zip(rows, cols):
        idx = np.unravel_index(c, box.shape)
        window = tuple(slice(max(k - 1, 0), k + 2) for k in idx)
        assert np.any(owner[window] == i), (i, idx)


# ----------------------------------------------------------------------------- verifiers

def test_single_tuples_never_violate():
    players, nu = two_atom_problem()
    plan = AllocationPlan.from_mass([[0.5, 0.0], [0.0, 0.5]], players, nu, UNIT_COST)
    assert verify_cyclical_monotonicity(plan, UNIT_COST, max_k=1).passed


def test_swapped_pairs_are_caught():
    players, nu = two_atom_problem()
    crossed = AllocationPlan.from_mass([[0.0, 0.5], [0.5, 0.0]], players, nu, UNIT_COST)
    report = verify_cyclical_monotonicity(crossed, UNIT_COST, n_tuples=200, max_k=2)
    assert not report.passed
    # the 2-cycle {(0,1),(1,0)} costs ½+½ against 0 for the reverse pairing
    assert max(v for _, v in report.violations) == pytest.approx(1.0)


def test_alpha_bounds_on_unit_interval():
    players = PlayerSet([0.25, 0.75])
    plan = solve_nash(players, GridMeasure.uniform(UNIT), UNIT_COST)
    report = alpha_bounds_check(plan, UNIT_COST)
    a0 = math.exp(-1)
    assert report.a0 == pytest.approx(a0, abs=1e-15)
    assert report.lower == pytest.approx(a0 / (a0 + 1)) and report.lower == pytest.approx(0.2689414, abs=1e-7)
    assert report.upper == pytest.approx(1 / (1 + a0)) and report.upper == pytest.approx(0.7310586, abs=1e-7)
    assert report.passed


def test_alpha_bounds_collapse_for_one_player():
    plan = solve_nash(PlayerSet([0.5]), GridMeasure.uniform(UNIT), UNIT_COST)
    report = alpha_bounds_check(plan, UNIT_COST)
    assert report.lower == pytest.approx(1.0) and report.upper == pytest.approx(1.0) and report.passed


def test_alpha_bounds_sixteen_players():
    rng = np.random.default_rng(16)
    players = PlayerSet(rng.random(16))
    nu = GridMeasure.uniform(Box(0, 1, 256))
    assert alpha_bounds_check(solve_nash(players, nu, UNIT_COST), UNIT_COST).passed


def test_alpha_bounds_flag_out_of_range_shares():
    players, nu = two_atom_problem()
    plan = AllocationPlan.from_mass([[0.5, 0.5], [0.0, 0.0]], players, nu, UNIT_COST)
    report = alpha_bounds_check(plan, UNIT_COST)
    assert not report.passed and report.worst_excess > 0.2


def test_brute_force_split_search_agrees_on_tiny_lattice():
    # sanity check of the lattice search itself against plain enumeration
    rng = np.random.default_rng(3)
    players, nu, cost = random_instance(rng, 2, 3)
    g = np.linspace(0, 1, 101)
    full = split_objective(players, nu, cost, np.array(list(itertools.product(g, repeat=3)))).max()
    assert refine_grid_search(players, nu, cost, final_step=0.01) >= full - 1e-12
