import math

import numpy as np
import pytest
from scipy import stats

from weaktraj.bayes import trajectory
from weaktraj.calibration import ensemble_dephasing_rate, measurement_strength, sigma_for_strength
from weaktraj.model import PLUS_X, PLUS_Z, Axis, BlochVector, Eigenstate, MeasurementConfig, PhysicalParams, Quadrature
from weaktraj.simulator import (
    ExperimentPlan,
    ResourceLimitError,
    herald,
    herald_misassignment,
    prepare_plus_x,
    pulse,
    run_experiment,
    simulate_phi_record,
    simulate_records,
    simulate_z_record,
    tomography_pulse_and_readout,
)

P = PhysicalParams.device()
TAU = 1.792e-6
Z_CFG = MeasurementConfig(Quadrature.Z, TAU)
PHI_CFG = MeasurementConfig(Quadrature.PHI, TAU)


def _final_vm(dataset):
    return dataset.integrated[:, -1]


@pytest.fixture(scope="module")
def z_ensemble():
    return run_experiment(ExperimentPlan(30_000), P, Z_CFG, 21, keep_traces=True)


def test_eigenstate_is_fixed_point():
    cfg = Z_CFG.replace(initial_state=PLUS_Z)
    for i in range(20):
        record, trace = simulate_z_record(P, cfg, (1, i))
        assert trace.eigenstate_label == Eigenstate.ZERO
        assert np.allclose(trace.bloch_true[:, 2], 1.0)
    ds = run_experiment(ExperimentPlan(3000, herald=False), P, cfg, 2)
    assert _final_vm(ds).mean() == pytest.approx(0.5, abs=0.02)


def test_z_records_follow_two_gaussian_mixture(z_ensemble):
    s = measurement_strength(P, TAU)
    sigma = sigma_for_strength(1.0, s)
    v = _final_vm(z_ensemble)

    def cdf(x):
        return 0.5 * stats.norm.cdf(x, 0.5, sigma) + 0.5 * stats.norm.cdf(x, -0.5, sigma)

    assert stats.kstest(v, cdf).pvalue > 0.001
    # the pooled spread is the mixture's, not a single Gaussian's
    assert v.var() == pytest.approx(sigma**2 + 0.25, rel=0.03)


def test_phi_records_are_state_independent_gaussian():
    ds = run_experiment(ExperimentPlan(20_000), P, PHI_CFG, 4)
    sigma = sigma_for_strength(1.0, measurement_strength(P, TAU))
    assert stats.kstest(_final_vm(ds), "norm", args=(0.0, sigma)).pvalue > 0.001


def test_strength_additivity_under_step_change():
    coarse = MeasurementConfig(Quadrature.Z, TAU, step=32e-9)
    a = _final_vm(run_experiment(ExperimentPlan(20_000), P, Z_CFG, 7))
    b = _final_vm(run_experiment(ExperimentPlan(20_000), P, coarse, 8))
    assert stats.ks_2samp(a, b).pvalue > 0.001


def test_true_state_martingale_and_purity(z_ensemble):
    traces = z_ensemble.true_traces
    z = traces[:, :, 2]
    se = z.std(axis=0) / math.sqrt(len(z))
    assert np.all(np.abs(z.mean(axis=0)) < 3 * se + 1e-12)
    assert np.allclose(np.sum(traces**2, axis=-1), 1.0, atol=1e-9)


def test_full_efficiency_filter_tracks_true_state_exactly():
    ideal = P.replace(eta=1.0, t2_star=math.inf)
    for cfg, sim in ((Z_CFG, simulate_z_record), (PHI_CFG, simulate_phi_record)):
        for i in range(5):
            record, trace = sim(ideal, cfg, (3, i))
            est = trajectory(record, ideal, cfg)
            assert np.max(np.abs(est.bloch[1:] - trace.bloch_true)) < 1e-12
            assert np.allclose(est.purity, 1.0, atol=1e-12)


def test_full_efficiency_has_no_extra_noise():
    ideal = P.replace(eta=1.0, t2_star=math.inf)
    record, trace = simulate_z_record(ideal, Z_CFG, 9)
    latent = trace.full_record_integral
    assert np.allclose(record.integrated, latent, atol=1e-12)


def test_phi_ensemble_coherence_decays_at_full_rate():
    ds = run_experiment(ExperimentPlan(10_000), P, PHI_CFG, 13)
    expected = math.exp(-ensemble_dephasing_rate(P) * TAU)
    assert ensemble_dephasing_rate(P) * TAU == pytest.approx(0.891, abs=0.001)
    x = ds.true_final[:, 0]
    assert x.mean() == pytest.approx(expected, abs=4 * x.std() / math.sqrt(len(x)))


def test_phi_outcomes_on_z_are_uncorrelated_with_signal():
    ds = run_experiment(ExperimentPlan(30_000), P, PHI_CFG, 14)
    assert np.all(ds.true_final[:, 2] == 0.0)
    on_z = ds.axis == Axis.Z
    r = np.corrcoef(_final_vm(ds)[on_z], ds.result[on_z])[0, 1]
    assert abs(r) < 3 / math.sqrt(on_z.sum())


def test_herald_then_rotate_gives_plus_x():
    state = prepare_plus_x(herald(P, 0))
    assert np.array_equal(state.as_array(), [1.0, 0.0, 0.0])
    assert herald_misassignment(42) == pytest.approx(6e-4, rel=0.1)
    assert herald_misassignment(42) < 1e-3
    assert math.sqrt(42) == pytest.approx(6.5, abs=0.02)


@pytest.mark.parametrize("axis", list(Axis))
def test_tomography_pulses_bring_axis_to_z(axis):
    target = np.eye(3)[int(axis)]
    outcomes = [tomography_pulse_and_readout(BlochVector(*target), axis, 1.0, (5, i)).result for i in range(50)]
    assert all(r == 1 for r in outcomes)


def test_pulse_convention_on_equator():
    assert np.allclose(pulse(PLUS_X, "+y", math.pi / 2).as_array(), [0, 0, 1])


def test_equator_readout_is_fair_coin():
    results = np.array([tomography_pulse_and_readout(PLUS_X, Axis.Z, 1.0, (6, i)).result for i in range(4000)])
    assert abs(results.mean()) < 3 / math.sqrt(4000)


@pytest.mark.parametrize("fidelity", [0.95, 0.90])
def test_readout_fidelity_bias(fidelity):
    results = np.array([tomography_pulse_and_readout(PLUS_Z, Axis.Z, fidelity, (7, i)).result for i in range(8000)])
    assert results.mean() == pytest.approx(2 * fidelity - 1, abs=3 * math.sqrt(1 / 8000))


def test_axes_cycle_uniformly():
    ds = run_experiment(ExperimentPlan(99), P, Z_CFG, 1)
    assert np.array_equal(np.bincount(ds.axis), [33, 33, 33])


def test_same_seed_same_bytes_any_schedule():
    plan = ExperimentPlan(500)
    a = run_experiment(plan, P, Z_CFG, 77, workers=1)
    b = run_experiment(plan, P, Z_CFG, 77, workers=2, chunk_size=64)
    c = run_experiment(plan, P, Z_CFG, 78)
    assert a.identical_to(b)
    assert not a.identical_to(c)


def test_repetition_matches_standalone_record():
    ds = run_experiment(ExperimentPlan(10), P, Z_CFG, 31)
    [(record, _)] = simulate_records(P, Z_CFG, [(31, 4)])
    assert np.array_equal(ds.record(4).instantaneous, record.instantaneous)


def test_mixed_durations_schedule():
    plan = ExperimentPlan(60, measure_durations=[0.448e-6, TAU])
    ds = run_experiment(plan, P, Z_CFG, 3)
    assert sorted(set(ds.n_steps.tolist())) == [28, 112]
    assert np.isnan(ds.instantaneous[ds.n_steps == 28, 28:]).all()


def test_resource_guard():
    with pytest.raises(ResourceLimitError, match="repetitions"):
        run_experiment(ExperimentPlan(10_000, max_samples=1_000_000), P, Z_CFG, 0)


@pytest.mark.parametrize(
    "kw", [{"repetitions": 0}, {"repetitions": 10, "readout_fidelity": 0.5}, {"repetitions": 10, "tomography_axes": ()}]
)
def test_bad_plan_rejected(kw):
    with pytest.raises(ValueError):
        ExperimentPlan(**kw)


def test_quadrature_mismatch_rejected():
    with pytest.raises(ValueError):
        simulate_z_record(P, PHI_CFG, 0)
    with pytest.raises(ValueError):
        simulate_phi_record(P, Z_CFG, 0)
