import csv

import numpy as np
import pytest

from conftest import HSTAR_PI_4, h_star_neutron
from pfeigen import (Dirac, EmpiricalMeasure, InvalidArgumentError, eval_h,
                     random_semigroup_apply, rare_event_model, run_backward, run_forward,
                     sample_twisted_chain, twisted_row, window_average_h)
from pfeigen.backward import (sample_twisted_chains, semigroup_log_weights, write_h_csv,
                              write_twisted_path_csv)
from pfeigen.kernel import make_stream
from pfeigen.oracle import build_grid_operator, iterate_expectation


def test_layer_means_equal_one(small_neutron_run, small_rare_run):
    for _, bw in (small_neutron_run, small_rare_run):
        np.testing.assert_allclose(bw.normalizers, 1.0, rtol=0, atol=1e-12)
        assert np.all(bw.h_values > 0)


def test_terminal_layer_is_one(small_neutron_run):
    traj, bw = small_neutron_run
    np.testing.assert_array_equal(bw.layer(2 * traj.n), 1.0)
    with pytest.raises(InvalidArgumentError):
        bw.layer(traj.n - 1)


def test_eval_h_reproduces_stored_layers(small_rare_run):
    traj, bw = small_rare_run
    for p in (traj.n, traj.n + 4, 2 * traj.n - 1):
        np.testing.assert_allclose(eval_h(traj, bw, p, traj.layer(p)), bw.layer(p), rtol=1e-12)


def test_eval_h_scalar_and_range(small_neutron_run):
    traj, bw = small_neutron_run
    assert isinstance(eval_h(traj, bw, traj.n, 0.3), float)
    with pytest.raises(InvalidArgumentError):
        eval_h(traj, bw, 2 * traj.n, 0.3)
    with pytest.raises(InvalidArgumentError):
        eval_h(traj, bw, traj.n, 9.0)


def test_twisted_row_normalizer_is_previous_h(small_neutron_run):
    traj, bw = small_neutron_run
    for p, x in [(traj.n + 1, 0.0), (traj.n + 5, 1.1), (2 * traj.n, 0.7)]:
        row = twisted_row(traj, bw, p, x)
        assert row.probabilities.sum() == pytest.approx(1.0, abs=1e-14)
        assert np.all(row.probabilities >= 0)
        assert row.atoms.size == traj.N
        assert np.exp(row.log_normalizer) == pytest.approx(eval_h(traj, bw, p - 1, x), rel=1e-12)
    with pytest.raises(InvalidArgumentError):
        twisted_row(traj, bw, traj.n, 0.0)


def test_window_average_tracks_exact_eigenfunction(neutron):
    x = np.linspace(0, np.pi / 2, 9)
    traj = run_forward(neutron, 150, 300, Dirac(0.0), seed=0)
    h = window_average_h(traj, run_backward(traj), x, 15)
    np.testing.assert_allclose(h, h_star_neutron(x), rtol=0.04)


def test_window_average_default_and_validation(small_neutron_run):
    traj, bw = small_neutron_run
    assert window_average_h(traj, bw, 0.5) == pytest.approx(
        np.mean([eval_h(traj, bw, p, 0.5) for p in range(traj.n, traj.n + 2)]))
    with pytest.raises(InvalidArgumentError):
        window_average_h(traj, bw, 0.5, 0)


def test_twisted_chain_reproducible(small_neutron_run):
    traj, bw = small_neutron_run
    a, ca = sample_twisted_chain(traj, bw, 0.0, 10, seed=3)
    b, cb = sample_twisted_chain(traj, bw, 0.0, 10, seed=3)
    np.testing.assert_array_equal(a, b)
    assert ca == cb
    assert a[0] == 0.0 and a.size == 11
    assert set(a[1:]).issubset(set(traj.states[traj.n + 1:].ravel()))


def test_twisted_chain_visits_particles_at_matching_times(small_neutron_run):
    traj, bw = small_neutron_run
    path, _ = sample_twisted_chain(traj, bw, 0.3, 6, seed=1)
    for k in range(1, 7):
        assert path[k] in traj.layer(traj.n + k)


def test_twisted_chain_length_validation(small_neutron_run):
    traj, bw = small_neutron_run
    with pytest.raises(InvalidArgumentError):
        sample_twisted_chain(traj, bw, 0.0, traj.n + 1, seed=0)
    path, corr = sample_twisted_chain(traj, bw, 0.0, 0, seed=0)
    assert path.tolist() == [0.0] and corr == 0.0


def test_chain_weight_has_unit_mean():
    # with no event restriction the conditional estimator targets probability one
    model = rare_event_model(2.0, 2.0)
    w = []
    for s in range(1000):
        traj = run_forward(model, 20, 10, Dirac(0.0), seed=s)
        _, corr = sample_twisted_chains(traj, run_backward(traj), 0.0, 5, 1, make_stream(s, 2))
        w.append(np.exp(corr[0]))
    w = np.array(w)
    assert abs(w.mean() - 1.0) < 4 * w.std(ddof=1) / np.sqrt(w.size)


def test_twisted_chain_mean_matches_stationary_law(neutron):
    # the twisted invariant law has mean L/2 by symmetry of h* eta*
    means = []
    for s in range(30):
        traj = run_forward(neutron, 100, 600, Dirac(0.0), seed=s)
        path, _ = sample_twisted_chain(traj, run_backward(traj), 0.0, 300, seed=s)
        means.append(path[20:].mean())
    means = np.array(means)
    se = means.std(ddof=1) / np.sqrt(means.size)
    assert abs(means.mean() - 0.7853981633974483) < 4 * se


def test_semigroup_identity_at_start(small_rare_run):
    traj, _ = small_rare_run
    lw = semigroup_log_weights(traj, Dirac(0.2), 0)
    np.testing.assert_array_equal(lw, [0.0])
    assert random_semigroup_apply(traj, Dirac(0.2), lambda x: x + 1, 0) == pytest.approx(1.2)


def test_semigroup_one_step_matches_lambda(small_rare_run):
    # starting from the time-0 cloud, one step transports mass lambda_0^N
    traj, _ = small_rare_run
    val = random_semigroup_apply(traj, EmpiricalMeasure(traj.layer(0)), np.ones_like, 1)
    assert val == pytest.approx(np.exp(traj.log_lambda[0]), rel=1e-12)


def test_semigroup_total_mass_is_lambda_product(small_rare_run):
    traj, _ = small_rare_run
    val = random_semigroup_apply(traj, EmpiricalMeasure(traj.layer(0)), np.ones_like, 6)
    assert np.log(val) == pytest.approx(traj.log_lambda[:6].sum(), rel=1e-12)


def test_semigroup_is_unbiased():
    model = rare_event_model(2.0, 2.0)
    phi = lambda x: 1.0 + x**2
    exact = iterate_expectation(build_grid_operator(model, 1025, "cell"), Dirac(0.0), phi, 5)
    vals = np.array([random_semigroup_apply(run_forward(model, 20, 10, Dirac(0.0), seed=s),
                                            Dirac(0.0), phi, 5) for s in range(2000)])
    se = vals.std(ddof=1) / np.sqrt(vals.size)
    assert abs(vals.mean() - exact) < 4 * se


def test_semigroup_range_checks(small_rare_run):
    traj, _ = small_rare_run
    with pytest.raises(InvalidArgumentError):
        semigroup_log_weights(traj, Dirac(0.0), traj.horizon + 1)
    with pytest.raises(InvalidArgumentError):
        semigroup_log_weights(traj, Dirac(0.0), 2, start=3)


def test_fixture_h_at_quarter_pi_is_sane(small_neutron_run):
    traj, bw = small_neutron_run
    assert window_average_h(traj, bw, np.pi / 4) == pytest.approx(HSTAR_PI_4, rel=0.1)


def test_csv_writers(tmp_path):
    write_h_csv([0.0, 1.0], [1.1, 0.9], str(tmp_path), h_oracle=[1.0, 1.0])
    rows = list(csv.reader(open(tmp_path / "h_estimate.csv")))
    assert rows[0] == ["x", "h_window", "h_oracle"] and float(rows[2][1]) == 0.9
    write_twisted_path_csv([0.0, 0.5], str(tmp_path))
    rows = list(csv.reader(open(tmp_path / "twisted_path.csv")))
    assert rows[-1] == ["1", "0.5"]
