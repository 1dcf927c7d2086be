import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.append(str(Path(__file__).parent.parent))

from utils.conformal import ConformalSchedule, calibrated_interval
from utils.errors import ConfigurationError, InvalidInputError, NumericalError
from utils.excitation import FunctionSampleSet, SensorGrid
from utils.operator_network import OperatorArchitecture, PredictiveBand, VariationalModel
from utils.persistence import read_json
from utils.reliability import (
    FttfResult,
    PerformanceSpec,
    ReliabilityCurve,
    coverage_report,
    first_time_to_failure,
    fttf_density,
    monte_carlo_reliability,
    nmse,
    performance_margin,
    pof_curve,
    reliability_from_band,
    surrogate_reliability,
    threshold_for_probability,
)


def random_walks(n=200, n_t=41, seed=0):
    rng = np.random.default_rng(seed)
    times = np.linspace(0.0, 2.0, n_t)
    return times, np.cumsum(rng.normal(scale=0.05, size=(n, n_t)), axis=1)


def test_margin_conventions():
    assert performance_margin(0.25, PerformanceSpec(0.25)) == 0.0
    assert performance_margin(0.20, PerformanceSpec(0.25)) == pytest.approx(0.05)
    assert performance_margin(0.30, PerformanceSpec(0.25, 'lower')) == pytest.approx(0.05)
    assert performance_margin(-0.30, PerformanceSpec(0.25, 'absolute')) == pytest.approx(-0.05)
    with pytest.raises(InvalidInputError):
        PerformanceSpec(0.25, 'sideways')


def test_vectorized_margin_matches_scalar_loop():
    _, u = random_walks(n=5, n_t=7)
    spec = PerformanceSpec(0.1, 'absolute')
    expected = np.array([[0.1 - abs(v) for v in row] for row in u])
    np.testing.assert_array_equal(performance_margin(u, spec), expected)


def test_fttf_safe_immediate_and_ramp():
    times = np.array([0.0, 1.0, 2.0, 3.0])
    spec = PerformanceSpec(0.25)
    safe = first_time_to_failure(np.zeros(4), times, spec)
    assert safe.tau[0] == 3.0 and not safe.failed[0]
    immediate = first_time_to_failure(np.full(4, 0.3), times, spec)
    assert immediate.tau[0] == 0.0 and immediate.failed[0]
    # crosses 0.25 between the third and fourth grid points
    ramp = first_time_to_failure(np.array([0.0, 0.1, 0.2, 0.3]), times, spec)
    assert ramp.tau[0] == 3.0 and ramp.failed[0]


def test_fttf_rejects_empty_and_mismatched_input():
    with pytest.raises(InvalidInputError):
        first_time_to_failure(np.zeros((1, 3)), np.zeros(4), PerformanceSpec(1.0))


def test_fttf_monotone_in_threshold():
    times, u = random_walks()
    previous = first_time_to_failure(u, times, PerformanceSpec(0.05, 'absolute')).tau
    for u_crit in (0.1, 0.2, 0.4):
        tau = first_time_to_failure(u, times, PerformanceSpec(u_crit, 'absolute')).tau
        assert np.all(tau >= previous)
        previous = tau


def test_pof_curve_counting_example():
    fttf = FttfResult(np.array([0.5, 1.5, 2.0, 2.0]), np.array([True, True, False, False]))
    curve = pof_curve(fttf, np.array([0.0, 0.5, 1.0, 1.5, 2.0]))
    np.testing.assert_array_equal(curve, [0.0, 0.25, 0.25, 0.5, 0.5])


def test_pof_curve_extremes():
    times = np.linspace(0.0, 1.0, 5)
    none = pof_curve(first_time_to_failure(np.zeros((3, 5)), times, PerformanceSpec(1.0)), times)
    everyone = pof_curve(first_time_to_failure(np.full((3, 5), 2.0), times, PerformanceSpec(1.0)), times)
    assert np.all(none == 0.0)
    assert np.all(everyone == 1.0)


def test_pof_curve_matches_brute_force_double_loop():
    times, u = random_walks()
    spec = PerformanceSpec(0.15, 'absolute')
    curve = monte_carlo_reliability(u, times, spec)
    n, n_t = u.shape
    expected = np.zeros(n_t)
    for k in range(n_t):
        count = 0
        for i in range(n):
            if any(spec.u_crit - abs(u[i, j]) <= 0 for j in range(k + 1)):
                count += 1
        expected[k] = count / n
    assert np.array_equal(curve, expected)
    assert np.all(np.diff(curve) >= 0) and 0.0 <= curve[0] and curve[-1] <= 1.0


def test_per_timestep_threshold_schedule():
    times = np.array([0.0, 1.0, 2.0])
    spec = PerformanceSpec(np.array([1.0, 0.5, 0.1]), 'upper')
    fttf = first_time_to_failure(np.array([[0.2, 0.2, 0.2], [0.6, 0.6, 0.6]]), times, spec)
    np.testing.assert_array_equal(fttf.tau, [2.0, 1.0])
    assert spec.label() == 'upper_schedule'


@pytest.mark.parametrize('direction', ['upper', 'lower', 'absolute'])
def test_threshold_for_probability_hits_its_level(direction):
    times, u = random_walks(n=400)
    for level in (0.2, 0.5, 0.8):
        u_crit = threshold_for_probability(u, level, direction)
        pf = monte_carlo_reliability(u, times, PerformanceSpec(u_crit, direction))
        assert pf[-1] == pytest.approx(level, abs=0.01)


def test_threshold_for_probability_rejects_degenerate_levels():
    _, u = random_walks(n=10)
    for level in (0.0, 1.0):
        with pytest.raises(InvalidInputError):
            threshold_for_probability(u, level)
    with pytest.raises(InvalidInputError):
        threshold_for_probability(u, 0.5, 'sideways')


def test_fttf_density_integrates_to_final_pof():
    times, u = random_walks()
    fttf = first_time_to_failure(u, times, PerformanceSpec(0.15, 'absolute'))
    density = fttf_density(fttf, times, bins=10)
    mass = float(np.sum(density['density'] * (density['bin_right'] - density['bin_left'])))
    assert mass == pytest.approx(pof_curve(fttf, times)[-1])


def test_deterministic_surrogate_collapses_the_bounds():
    times, u = random_walks(n=50)
    band = PredictiveBand(times, u, np.zeros_like(u), 1, 1)
    interval = calibrated_interval(band.mu_hat, band.sigma_hat, np.ones(times.size), 1.0)
    curve = reliability_from_band(band, interval, PerformanceSpec(0.1, 'absolute'))
    assert np.array_equal(curve.pf_lower, curve.pf_mean)
    assert np.array_equal(curve.pf_upper, curve.pf_mean)
    assert not curve.unusable.any()


def test_bounds_are_ordered_for_any_sign():
    times, u = random_walks(n=100, seed=1)
    band = PredictiveBand(times, u, np.full_like(u, 0.02), 1, 1)
    interval = calibrated_interval(band.mu_hat, band.sigma_hat, np.full(times.size, 1.5), 1.96)
    for direction in ('upper', 'lower', 'absolute'):
        curve = reliability_from_band(band, interval, PerformanceSpec(0.1, direction))
        assert np.all(curve.pf_lower <= curve.pf_upper)
        assert np.all(np.diff(curve.pf_lower) >= 0) and np.all(np.diff(curve.pf_upper) >= 0)


def test_infinite_quantile_marks_bounds_unusable():
    times, u = random_walks(n=10)
    band = PredictiveBand(times, u, np.full_like(u, 0.01), 1, 1)
    q = np.ones(times.size)
    q[5] = np.inf
    curve = reliability_from_band(band, calibrated_interval(band.mu_hat, band.sigma_hat, q, 1.0),
                                  PerformanceSpec(0.1, 'absolute'))
    assert curve.unusable.tolist() == [k == 5 for k in range(times.size)]


def test_surrogate_reliability_checks_grids():
    grid = SensorGrid.uniform(0.2, 20.0)
    arch = OperatorArchitecture(n_sensors=grid.count, branch_widths=(3,), trunk_widths=(3,), latent=2,
                                activated_layers=1)
    model = VariationalModel.initialize(arch, seed=2, horizon=grid.horizon)
    inputs = FunctionSampleSet(grid, np.random.default_rng(3).normal(size=(30, grid.count)))
    schedule = ConformalSchedule(grid.times, np.full(grid.count, 1.2), np.full(grid.count, 100), 0.05, 1.96)
    curve = surrogate_reliability(model, schedule, inputs, PerformanceSpec(0.01, 'absolute'), 4, 2, seed=1)
    assert curve.pf_mean.shape == (grid.count,)
    assert curve.n_samples == 30
    assert np.all(curve.pf_lower <= curve.pf_upper)

    shifted = ConformalSchedule(grid.times + 0.5, schedule.q, schedule.n_cal, 0.05, 1.96)
    with pytest.raises(ConfigurationError):
        surrogate_reliability(model, shifted, inputs, PerformanceSpec(0.01), 4, 2)


def test_curve_save_reports_sup_error(tmp_path):
    times = np.array([0.0, 1.0])
    curve = ReliabilityCurve(times, np.array([0.1, 0.3]), np.array([0.0, 0.2]), np.array([0.2, 0.4]), 10,
                             pf_true=np.array([0.1, 0.25]))
    paths = curve.save(tmp_path / 'dof0_upper_0.25')
    summary = read_json(paths['.json'])
    assert summary['sup_error_mean_vs_true'] == pytest.approx(0.05)
    assert summary['final_pf_mean'] == pytest.approx(0.3)
    assert 'pf_true' in curve.to_frame().columns


def test_nmse_anchors():
    rng = np.random.default_rng(4)
    truths = rng.normal(size=(10, 6))
    predictions = truths + rng.normal(scale=0.1, size=truths.shape)
    assert nmse(truths, truths) == 0.0
    assert nmse(np.full_like(truths, truths.mean()), truths) == pytest.approx(1.0)
    expected = np.mean((predictions - truths) ** 2) / np.var(truths)
    assert nmse(predictions, truths) == pytest.approx(expected, rel=1e-12)


def test_nmse_rejects_constant_truth():
    with pytest.raises(NumericalError):
        nmse(np.zeros((2, 2)), np.ones((2, 2)))


def test_coverage_report_extremes():
    times = np.linspace(0.0, 1.0, 4)
    truths = np.random.default_rng(5).normal(size=(20, 4))
    everything = calibrated_interval(np.zeros_like(truths), np.ones_like(truths), np.inf, 1.0)
    report = coverage_report(everything, truths, times)
    assert np.all(report.coverage == 100.0)
    assert report.n_at_or_above == 4 and report.n_below == 0

    nothing = calibrated_interval(truths + 1.0, np.ones_like(truths), 0.0, 1.0)
    report = coverage_report(nothing, truths, times)
    assert np.all(report.coverage == 0.0)
    assert report.n_below + report.n_at_or_above == times.size
    assert report.summary()['maximum'] == 0.0
