import math

import numpy as np
import pytest
from scipy import stats

from weaktraj.bayes import trajectory
from weaktraj.calibration import dephasing_rate, ensemble_dephasing_rate, measurement_strength, sigma_for_strength
from weaktraj.model import Axis, MeasurementConfig, MeasurementRecord, PhysicalParams, Quadrature
from weaktraj.simulator import ExperimentPlan, run_experiment, simulate_record
from weaktraj.tomography import (
    LowCountWarning,
    TomographyTally,
    bin_records,
    compare,
    conditional_tomography,
    correlation_curves,
    estimate_from_tally,
    reconstruct_trajectory,
)

P = PhysicalParams.device()
TAU = 1.792e-6
Z_CFG = MeasurementConfig(Quadrature.Z, TAU)
PHI_CFG = MeasurementConfig(Quadrature.PHI, TAU)
QUARTERS = [k * 16e-9 for k in (28, 56, 84, 112)]


@pytest.fixture(scope="module")
def z_data():
    return run_experiment(ExperimentPlan(60_000), P, Z_CFG, 41)


@pytest.fixture(scope="module")
def phi_data():
    return run_experiment(ExperimentPlan(60_000), P.replace(nbar=0.46), PHI_CFG, 42)


@pytest.fixture(scope="module")
def z_quarters():
    return run_experiment(ExperimentPlan(60_000, measure_durations=QUARTERS), P, Z_CFG, 43)


def _flat_record(n=112):
    return MeasurementRecord.from_instantaneous(np.zeros(n), 16e-9, Quadrature.Z)


def test_bin_count_matches_mixture_density(z_data):
    v = z_data.integrated[:, -1]
    eps = 0.1 * v.std()
    sigma = sigma_for_strength(1.0, measurement_strength(P, TAU))
    p = sum(0.5 * (stats.norm.cdf(eps, mu, sigma) - stats.norm.cdf(-eps, mu, sigma)) for mu in (0.5, -0.5))
    expected = len(z_data) * p
    count = len(bin_records(z_data, TAU, 0.0, eps).indices)
    assert abs(count - expected) < 3 * math.sqrt(expected)


def test_bin_limits(z_data):
    assert len(bin_records(z_data, TAU, 0.0, math.inf).indices) == len(z_data)
    assert len(bin_records(z_data, TAU, 0.0, 0.0).indices) == 0
    with pytest.raises(ValueError):
        bin_records(z_data, 1.8e-6, 0.0, 0.1)


def test_fidelity_correction_examples():
    tally = TomographyTally(np.array([100, 100, 100]), np.array([45, 45, 100]))
    est = estimate_from_tally(tally, 0.95)
    assert est.means[0] == pytest.approx(0.50)
    perfect = estimate_from_tally(tally, 1.0)
    assert perfect.means[2] == 1.0
    assert est.se[0] == pytest.approx(math.sqrt((1 - 0.45**2) / 100) / 0.9)


def test_empty_axis_is_an_error():
    with pytest.raises(ValueError, match="axis Y"):
        estimate_from_tally(TomographyTally(np.array([5, 0, 5]), np.array([1, 0, 1])), 0.95)


def test_synthetic_outcomes_recover_state():
    rng = np.random.default_rng(2)
    truth, f, n = np.array([0.457, 0.0, 0.657]), 0.95, 10_000
    p_plus = f * (1 + truth) / 2 + (1 - f) * (1 - truth) / 2
    results = np.where(rng.random((3, n)) < p_plus[:, None], 1, -1)
    axes = np.repeat(np.arange(3), n)
    est = estimate_from_tally(TomographyTally.from_outcomes(axes, results.ravel()), f)
    assert np.all(np.abs(est.means - truth) < 3 * est.se)


def test_tally_merge_is_associative():
    rng = np.random.default_rng(3)
    axes, results = rng.integers(0, 3, 900), rng.choice([-1, 1], 900)
    whole = TomographyTally.from_outcomes(axes, results)
    parts = [TomographyTally.from_outcomes(axes[s], results[s]) for s in (slice(0, 200), slice(200, 650), slice(650, None))]
    merged = (parts[0] + parts[1]) + parts[2]
    assert np.array_equal(merged.counts, whole.counts) and np.array_equal(merged.sums, whole.sums)
    assert np.array_equal((parts[0] + (parts[1] + parts[2])).sums, whole.sums)


def test_low_count_warning(z_data):
    subset = bin_records(z_data, TAU, 0.0, 0.001)
    with pytest.warns(LowCountWarning):
        conditional_tomography(subset)


def test_unconditioned_tomography(z_data):
    est = conditional_tomography(bin_records(z_data, TAU, 0.0, math.inf))
    expected = np.array([math.exp(-ensemble_dephasing_rate(P) * TAU), 0.0, 0.0])
    assert np.all(np.abs(est.means - expected) < 3 * est.se)


def test_z_correlation_curves(z_data):
    table = correlation_curves(z_data, 40)
    assert table.s == pytest.approx(measurement_strength(P, TAU))
    assert table.agreement() >= 0.95
    ok = np.flatnonzero(table.qualifying())
    assert table.means[ok[0], 2] < -0.8 and table.means[ok[-1], 2] > 0.8
    middle = np.argmin(np.abs(table.centers))
    assert table.theory_center[middle, 0] == pytest.approx(math.exp(-dephasing_rate(P) * TAU), abs=0.02)
    assert np.allclose(table.theory_center[:, 1], 0.0)


def test_phi_correlation_curves_flat_in_z(phi_data):
    table = correlation_curves(phi_data, 40)
    ok = table.qualifying()
    assert table.agreement(axes=(0, 1)) >= 0.95
    assert np.all(np.abs(table.zscores()[ok, 2]) < 3)
    assert np.allclose(table.theory_center[:, 2], 0.0)


def test_correlation_guards(z_data, z_quarters):
    with pytest.raises(ValueError):
        correlation_curves(z_data, 2)
    with pytest.raises(ValueError):
        correlation_curves(z_quarters, 10)
    assert correlation_curves(z_quarters, 10, tau=QUARTERS[1]).tau == pytest.approx(QUARTERS[1])


def test_compare_identical_is_zero():
    traj = trajectory(_flat_record(), P, Z_CFG)
    report = compare(traj, traj)
    assert report.chi2 == 0.0 and np.all(report.rms == 0.0) and np.all(report.max_deviation == 0.0)


def test_compare_grid_mismatch(z_quarters):
    recon = reconstruct_trajectory(z_quarters, _flat_record(), min_count=50)
    short = trajectory(_flat_record(56), P, Z_CFG.replace(duration=56 * 16e-9))
    with pytest.raises(ValueError):
        compare(short, recon)


def test_infinite_window_collapses_to_ensemble(z_quarters):
    recon = reconstruct_trajectory(z_quarters, _flat_record(), epsilon=math.inf)
    decay = np.exp(-ensemble_dephasing_rate(P) * recon.times)
    assert np.all(np.abs(recon.means[:, 0] - decay) < 3 * recon.se[:, 0])
    assert np.all(np.abs(recon.means[:, 2]) < 3 * recon.se[:, 2])
    assert np.all(recon.counts.sum(axis=1) == len(z_quarters) // 4)


def test_fixed_epsilon_is_recorded_per_point(z_quarters):
    eps = 0.05 * float(np.nanstd(z_quarters.integrated[:, -1]))
    recon = reconstruct_trajectory(z_quarters, _flat_record(), epsilon=eps, min_count=10)
    assert np.all(recon.epsilon == eps)


def test_adaptive_window_reaches_min_count(z_quarters):
    recon = reconstruct_trajectory(z_quarters, _flat_record())
    assert recon.ok.all()
    assert np.all(recon.counts[recon.ok] >= 200)


def test_min_count_above_dataset_size(z_quarters):
    with pytest.raises(ValueError, match="matched outcomes"):
        reconstruct_trajectory(z_quarters, _flat_record(), min_count=len(z_quarters))


def test_reconstruction_agrees_with_filter_at_full_efficiency():
    ideal = P.replace(eta=1.0, t2_star=math.inf)
    ds = run_experiment(ExperimentPlan(60_000, measure_durations=QUARTERS), ideal, Z_CFG, 44)
    record, _ = simulate_record(ideal, Z_CFG, (45, 0))
    recon = reconstruct_trajectory(ds, record)
    filt = trajectory(record, ideal, Z_CFG)
    idx = np.searchsorted(filt.times, recon.times)
    dev = np.abs(filt.z[idx] - recon.means[:, 2])[recon.ok]
    assert recon.ok.any()
    assert np.all(dev < 3 * recon.se[recon.ok, 2])


def test_wrong_dephasing_rate_is_flagged(z_quarters):
    record = _flat_record()
    recon = reconstruct_trajectory(z_quarters, record)
    right = compare(trajectory(record, P, Z_CFG), recon)
    wrong = compare(trajectory(record, P, Z_CFG, gamma=2 * dephasing_rate(P)), recon)
    assert not right.systematic()
    assert wrong.systematic()
    assert wrong.chi2 > 3 * right.chi2


def test_readout_axis_partition(z_data):
    subset = bin_records(z_data, TAU, 0.0, 0.05)
    parts = subset.by_axis()
    assert sum(len(v) for v in parts.values()) == len(subset.indices)
    assert np.all(z_data.axis[parts[Axis.Y]] == Axis.Y)
