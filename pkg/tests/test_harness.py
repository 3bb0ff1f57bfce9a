import csv
import io
import json
import math

import numpy as np
import pytest
from scipy.stats import kstest

from nashot import harness
from nashot.discrete import PlayerSet, objective_np1, solve_nash
from nashot.errors import ConvergenceError, StructureError
from nashot.harness import (CSV_COLUMNS, ConvergenceRecord, DensitySpec, ExperimentConfig, averaged_pushforward,
                            evaluate_p3, log_utility_mismatch, plan_from_cells, player_seed, records_csv,
                            run_convergence, sample_players, step4_bound, write_run)
from nashot.laguerre import LaguerrePotential, decompose
from nashot.measure import Box, CostSpec, GridMeasure

UNIT = Box(0, 1, 256)
UNIT_COST = CostSpec.quadratic(UNIT, UNIT)


# ----------------------------------------------------------------------------- sampling

def test_single_draw_and_determinism():
    mu = GridMeasure.uniform(UNIT)
    one = sample_players(mu, 1, 3)
    assert one.n == 1 and one.provenance == "sampled" and one.seed == 3
    a, b = sample_players(mu, 50, 9), sample_players(mu, 50, 9)
    assert np.array_equal(a.points, b.points)
    assert not np.array_equal(a.points, sample_players(mu, 50, 10).points)
    with pytest.raises(StructureError):
        sample_players(mu, 0, 1)


def test_uniform_samples_pass_kolmogorov_distance():
    pts = sample_players(GridMeasure.uniform(UNIT), 10_000, 123).points[:, 0]
    assert kstest(pts, "uniform").statistic <= 0.02


def test_piecewise_samples_follow_the_grid_cdf():
    box = Box(0, 1, 8)
    mu = GridMeasure.from_density(box, [1, 3, 1, 0, 2, 2, 4, 1])
    pts = sample_players(mu, 10_000, 5).points[:, 0]
    edges = box.axis_edges(0)
    cum = np.concatenate([[0], np.cumsum(mu.masses)])
    assert kstest(pts, lambda x: np.interp(x, edges, cum)).statistic <= 0.02
    # nothing lands in the empty cell
    assert not np.any((pts > 3 / 8) & (pts < 4 / 8))


def test_two_dimensional_samples_have_the_right_marginals():
    box = Box([0, 0], [1, 1], [16, 16])
    mu = GridMeasure.from_function(box, lambda x, y: 1 + x)
    pts = sample_players(mu, 10_000, 8).points
    # marginal of x has density (1 + x)/1.5, of y uniform
    assert kstest(pts[:, 0], lambda x: (x + x ** 2 / 2) / 1.5).statistic <= 0.02
    assert kstest(pts[:, 1], "uniform").statistic <= 0.02


def test_sampling_survives_negligible_cells():
    box = Box(0, 1, 64)
    mu = GridMeasure.from_function(box, lambda x: np.exp(-((x - 0.1) ** 2) / (2 * 0.01 ** 2)))
    pts = sample_players(mu, 2000, 1).points
    assert np.all(np.isfinite(pts)) and pts.min() >= 0 and pts.max() <= 1


def test_player_seed_depends_on_both_inputs():
    assert player_seed(0, 4) == player_seed(0, 4)
    assert len({player_seed(0, 4), player_seed(0, 16), player_seed(1, 4)}) == 3


# ----------------------------------------------------------------------------- evaluate_p3

def test_p3_single_player():
    nu = GridMeasure.from_density(UNIT, 1 + UNIT.axis_centers(0))
    pot = LaguerrePotential(PlayerSet([0.4]), [0.0])
    expected = math.log(np.dot(nu.masses, np.exp(-0.5 * (UNIT.axis_centers(0) - 0.4) ** 2)))
    assert evaluate_p3(pot, nu, UNIT_COST) == pytest.approx(expected, abs=1e-14)


def test_p3_matches_np1_of_the_cell_plan():
    nu = GridMeasure.uniform(UNIT)
    players = PlayerSet([0.25, 0.75])
    decomp = decompose(LaguerrePotential.voronoi(players), nu)
    plan = plan_from_cells(decomp, nu, UNIT_COST)
    assert evaluate_p3(decomp.potential, nu, UNIT_COST) == pytest.approx(objective_np1(plan, players, UNIT_COST),
                                                                          abs=1e-9)
    # and the symmetric cells are the Nash solution itself
    nash = solve_nash(players, nu, UNIT_COST)
    assert objective_np1(nash, players, UNIT_COST) == pytest.approx(evaluate_p3(decomp.potential, nu, UNIT_COST),
                                                                     abs=1e-12)


def test_p3_additive_split():
    rng = np.random.default_rng(3)
    box = Box([0, 0], [1, 1], [24, 24])
    nu = GridMeasure.from_masses(box, 0.5 + rng.random(box.n_cells))
    players = PlayerSet(rng.random((5, 2)))
    cost = CostSpec.quadratic(box, box)
    decomp = decompose(LaguerrePotential.voronoi(players), nu)
    s = np.exp(-cost.matrix(players.points, box.centers()))
    own = s[decomp.cell_index, np.arange(box.n_cells)]
    avg = np.bincount(decomp.cell_index, weights=own * nu.masses, minlength=5) / decomp.cell_mass
    split = np.mean(np.log(decomp.cell_mass * 5)) + np.mean(np.log(avg))
    assert evaluate_p3(decomp.potential, nu, cost) == pytest.approx(split, abs=1e-13)


# ----------------------------------------------------------------------------- step 4 bound

def test_step4_bound_single_player():
    nu = GridMeasure.uniform(UNIT)
    decomp = decompose(LaguerrePotential(PlayerSet([0.5]), [0.0]), nu)
    expected = math.exp(0.5) * (1 - math.exp(-1 / 8))
    assert step4_bound(decomp, UNIT_COST) == pytest.approx(expected, abs=1e-14)
    assert expected == pytest.approx(0.1938, abs=1e-4)


def test_step4_bound_shrinks_with_cells():
    nu = GridMeasure.uniform(Box(0, 1, 1024))
    bounds = []
    for n in (4, 16, 64):
        players = PlayerSet((np.arange(n) + 0.5) / n)
        bounds.append(step4_bound(decompose(LaguerrePotential.voronoi(players), nu), UNIT_COST))
    assert bounds[0] > bounds[1] > bounds[2]
    # cells of width 1/64 around their player: s varies by at most 1 − e^{−(1/128)²/2}
    assert bounds[2] <= math.exp(0.5) * (1 - math.exp(-0.5 * (1 / 128 + 1 / 1024) ** 2))


@pytest.mark.parametrize("seed", range(5))
def test_mismatch_is_below_step4_bound(seed):
    rng = np.random.default_rng(seed)
    dim = 1 + seed % 2
    box = Box([0] * dim, [1] * dim, [512] if dim == 1 else [32, 32])
    nu = GridMeasure.from_masses(box, 0.5 + rng.random(box.n_cells))
    cost = CostSpec.quadratic(box, box)
    players = PlayerSet(rng.random((int(rng.integers(2, 12)), dim)))
    decomp = decompose(LaguerrePotential.voronoi(players), nu)
    assert log_utility_mismatch(decomp, nu, cost) <= step4_bound(decomp, cost) + 1e-12


# ----------------------------------------------------------------------------- averaged pushforward

def test_averaged_pushforward_gives_each_player_one_over_n():
    rng = np.random.default_rng(4)
    nu = GridMeasure.from_masses(UNIT, 0.5 + rng.random(256))
    players = PlayerSet(rng.random(6))
    plan = solve_nash(players, nu, UNIT_COST)
    beta = averaged_pushforward(plan, nu)
    share = (plan.mass / plan.alpha[:, None]) / 6
    np.testing.assert_allclose(share.sum(axis=1), np.full(6, 1 / 6), atol=1e-12)
    np.testing.assert_allclose(beta.masses, share.sum(axis=0), atol=1e-15)


# ----------------------------------------------------------------------------- config

def test_config_validation():
    with pytest.raises(StructureError):
        ExperimentConfig(n_schedule=(4, 4, 16))
    with pytest.raises(StructureError):
        ExperimentConfig(nash_tol=0.0)
    with pytest.raises(StructureError):
        ExperimentConfig(mu=DensitySpec("piecewise", {"levels": [1, 0]}))
    with pytest.raises(StructureError):
        DensitySpec("lognormal")
    with pytest.raises(StructureError):
        DensitySpec("truncated-gaussian", {"center": 0.5, "sigma": -1})
    with pytest.raises(StructureError):
        ExperimentConfig.from_dict({"seeds": 3})
    with pytest.raises(StructureError):
        ExperimentConfig(x_box=Box(0, 1, 8), y_box=Box([0, 0], [1, 1], 8))


def test_config_round_trip_and_overrides():
    cfg = ExperimentConfig(x_box=Box(0, 1, 64), y_box=Box(0, 2, 64),
                           mu=DensitySpec("truncated-gaussian", {"center": 0.5, "sigma": 0.2}),
                           nu=DensitySpec("piecewise", {"levels": [1, 2, 3]}), n_schedule=(2, 8), seed=4)
    back = ExperimentConfig.from_json(json.dumps(cfg.to_dict()))
    assert back == cfg
    o = cfg.with_overrides(seed=9, tol=1e-6, resolution=32)
    assert o.seed == 9 and o.nash_tol == o.continuum_tol == 1e-6
    assert o.x_box.resolution == (32,) and o.y_box.hi == (2.0,)


def test_density_families():
    box = Box(0, 1, 6)
    pw = DensitySpec("piecewise", {"levels": [1, 2, 3]}).measure(box)
    np.testing.assert_allclose(pw.density / pw.density[0], [1, 1, 2, 2, 3, 3])
    tg = DensitySpec("truncated-gaussian", {"center": 0.5, "sigma": 0.1}).measure(box)
    np.testing.assert_allclose(tg.density, tg.density[::-1])


# ----------------------------------------------------------------------------- sweep

@pytest.fixture(scope="module")
def small_run():
    cfg = ExperimentConfig(x_box=Box(0, 1, 256), y_box=Box(0, 1, 256), n_schedule=(4, 16, 64), seed=3)
    return run_convergence(cfg)


def test_small_sweep_passes_its_checks(small_run):
    checks = small_run.checks()
    assert all(checks.values()), checks
    assert [r.n for r in small_run.records] == [4, 16, 64]
    assert small_run.f_hat_beta_hat == pytest.approx(0.0, abs=1e-8)
    for r in small_run.records:
        assert r.gap >= 0 and r.f_tilde_n >= r.competitor - 1e-9


def test_sweep_csv_is_reproducible(small_run, tmp_path):
    again = run_convergence(small_run.config)
    assert records_csv(again.records) == records_csv(small_run.records)
    rows = list(csv.reader(io.StringIO(records_csv(small_run.records))))
    assert tuple(rows[0]) == CSV_COLUMNS and len(rows) == 4
    assert rows[1][CSV_COLUMNS.index("wall_ms")] == ""
    timed = list(csv.reader(io.StringIO(records_csv(small_run.records, include_timing=True))))
    assert float(timed[1][CSV_COLUMNS.index("wall_ms")]) > 0


def test_write_run_outputs(small_run, tmp_path):
    out = write_run(small_run, tmp_path / "run")
    names = {p.name for p in out.iterdir()}
    assert {"records.csv", "manifest.json", "beta_hat.csv", "beta_N4.csv", "beta_N64.csv"} <= names
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["passed"] and manifest["config"]["seed"] == 3
    assert set(manifest["player_seeds"]) == {"4", "16", "64"}
    assert {"python", "numpy", "scipy"} <= set(manifest["versions"])


def test_failed_stage_is_recorded_and_the_sweep_continues(monkeypatch):
    real = harness.solve_nash

    def flaky(players, nu, cost, tol):
        if players.n == 8:
            raise ConvergenceError("forced", residual=1.0)
        return real(players, nu, cost, tol=tol)

    monkeypatch.setattr(harness, "solve_nash", flaky)
    cfg = ExperimentConfig(x_box=Box(0, 1, 64), y_box=Box(0, 1, 64), n_schedule=(2, 8, 16))
    run = run_convergence(cfg)
    status = [r.status for r in run.records]
    assert status == ["ok", "failed", "ok"]
    assert "forced" in run.records[1].error
    assert not run.checks()["all_records_ok"] and not run.passed
    assert "failed" in records_csv(run.records)


def test_record_ok_flag():
    r = ConvergenceRecord(4, -0.1, -0.1, 0.0, 0.3, 0.01, 1.0)
    assert r.ok and math.isnan(r.competitor)
