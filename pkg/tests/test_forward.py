import csv

import numpy as np
import pytest

from pfeigen import (Dirac, InvalidArgumentError, Uniform, UnsupportedDiagnosticError,
                     cir_bellman_model, log_lambda_average, neutron_model,
                     pathwise_ratio_diagnostic, rare_event_model, run_backward, run_forward)
from pfeigen.forward import column_log_sums, write_trajectory_csv
from pfeigen.models import ConstantPotentialModel
from pfeigen.oracle import build_grid_operator, iterate_expectation


def test_shapes_and_metadata(small_neutron_run):
    traj, _ = small_neutron_run
    assert traj.states.shape == (41, 60)
    assert traj.log_lambda.shape == (41,)
    assert traj.log_backward_denominators.shape == (40, 60)
    assert (traj.N, traj.horizon, traj.n) == (60, 40, 20)
    assert len(traj.ensembles) == 41


def test_dirac_start_and_state_space(small_neutron_run, neutron):
    traj, _ = small_neutron_run
    assert np.all(traj.layer(0) == 0.0)
    assert neutron.space.contains(traj.states)


def test_uniform_start_covers_space(neutron):
    traj = run_forward(neutron, 500, 2, Uniform(), seed=0)
    x0 = traj.layer(0)
    assert x0.min() < 0.1 and x0.max() > np.pi / 2 - 0.1


def test_reproducible_and_seed_dependent(neutron):
    a = run_forward(neutron, 30, 10, Dirac(0.2), seed=4)
    b = run_forward(neutron, 30, 10, Dirac(0.2), seed=4)
    c = run_forward(neutron, 30, 10, Dirac(0.2), seed=5)
    np.testing.assert_array_equal(a.states, b.states)
    assert not np.array_equal(a.states, c.states)


def test_replicates_are_distinct(neutron):
    a = run_forward(neutron, 30, 10, Dirac(0.2), seed=4, replicate=0)
    b = run_forward(neutron, 30, 10, Dirac(0.2), seed=4, replicate=1)
    assert not np.array_equal(a.states, b.states)


def test_trajectory_is_read_only(small_neutron_run):
    traj, _ = small_neutron_run
    with pytest.raises(ValueError):
        traj.states[0, 0] = 1.0


def test_invalid_arguments(neutron):
    with pytest.raises(InvalidArgumentError):
        run_forward(neutron, 0, 10, Dirac(0.0), seed=0)
    with pytest.raises(InvalidArgumentError):
        run_forward(neutron, 10, 7, Dirac(0.0), seed=0)
    with pytest.raises(InvalidArgumentError):
        run_forward(neutron, 10, 10, Dirac(5.0), seed=0)
    with pytest.raises(InvalidArgumentError):
        run_forward(neutron, 10, 10, "uniform", seed=0)


def test_lambda_matches_cached_log_potential(small_neutron_run, neutron):
    traj, _ = small_neutron_run
    for p in (0, 7, 40):
        g = neutron.potential(traj.layer(p))
        assert traj.log_lambda[p] == pytest.approx(np.log(g.mean()), rel=1e-13)


def test_denominators_cached_equal_recomputed(neutron):
    a = run_forward(neutron, 25, 6, Dirac(0.3), seed=2)
    b = run_forward(neutron, 25, 6, Dirac(0.3), seed=2, store_denominators=False)
    assert b.log_backward_denominators is None
    for p in range(1, 7):
        np.testing.assert_allclose(a.denominators(p), b.denominators(p), rtol=1e-14)
        direct = np.log(np.exp(neutron.log_density_q(a.layer(p - 1)[:, None],
                                                     a.layer(p)[None, :])).sum(axis=0))
        np.testing.assert_allclose(a.denominators(p), direct, rtol=1e-12)
    with pytest.raises(InvalidArgumentError):
        a.denominators(0)


def test_column_log_sums_single_particle(neutron):
    v = column_log_sums(neutron, np.array([0.5]), np.array([0.1, 0.9]))
    np.testing.assert_allclose(v, neutron.log_density_q(0.5, np.array([0.1, 0.9])))


def test_constant_potential_gives_exact_lambda():
    model = ConstantPotentialModel(neutron_model(), 0.75)
    traj = run_forward(model, 10, 8, Dirac(0.0), seed=1)
    np.testing.assert_allclose(traj.log_lambda, np.log(0.75), rtol=0, atol=1e-15)
    assert log_lambda_average(traj, 4) == pytest.approx(np.log(0.75), abs=1e-15)


def test_log_lambda_average_window(small_neutron_run):
    traj, _ = small_neutron_run
    assert log_lambda_average(traj, 5) == pytest.approx(traj.log_lambda[:5].mean())
    with pytest.raises(InvalidArgumentError):
        log_lambda_average(traj, 0)


def test_lambda_product_is_unbiased():
    # E prod_{p<n} lambda_p^N equals the deterministic mass mu Q^n(1)
    model = rare_event_model(2.0, 2.0)
    op = build_grid_operator(model, 1025, "cell")
    exact = iterate_expectation(op, Dirac(0.0), 1.0, 5)
    vals = np.array([np.exp(run_forward(model, 20, 10, Dirac(0.0), seed=s,
                                        store_denominators=False).log_lambda[:5].sum())
                     for s in range(2000)])
    se = vals.std(ddof=1) / np.sqrt(vals.size)
    assert abs(vals.mean() - exact) < 4 * se


def test_neutron_log_lambda_close_to_half(neutron):
    traj = run_forward(neutron, 200, 200, Dirac(0.0), seed=3, store_denominators=False)
    assert log_lambda_average(traj, 100) == pytest.approx(np.log(0.5), abs=0.02)


def test_ratio_diagnostic_passes(small_neutron_run, small_rare_run):
    for traj, bw in (small_neutron_run, small_rare_run):
        probes = traj.model.space.grid(17)
        rep = pathwise_ratio_diagnostic(traj, bw, probes)
        assert rep.passed
        assert rep.lower_bound <= rep.h_min <= rep.h_max <= rep.upper_bound
        assert rep.probes == 17


def test_ratio_diagnostic_catches_scaled_h(small_neutron_run):
    traj, bw = small_neutron_run
    rep = pathwise_ratio_diagnostic(traj, bw.scaled(10.0), traj.model.space.grid(9))
    assert not rep.passed


def test_ratio_diagnostic_unsupported_without_bounds():
    model = cir_bellman_model()
    traj = run_forward(model, 10, 4, Dirac(10.0), seed=0)
    with pytest.raises(UnsupportedDiagnosticError):
        pathwise_ratio_diagnostic(traj, run_backward(traj), [10.0])


def test_trajectory_csv(tmp_path, neutron):
    traj = run_forward(neutron, 3, 2, Dirac(0.0), seed=0)
    write_trajectory_csv(traj, str(tmp_path))
    rows = list(csv.reader(open(tmp_path / "trajectory.csv")))
    assert rows[0] == ["p", "i", "state"] and len(rows) == 1 + 3 * 3
    lam = list(csv.reader(open(tmp_path / "lambda.csv")))
    assert float(lam[2][1]) == traj.log_lambda[1]
