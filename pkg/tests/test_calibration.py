import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weaktraj.calibration import (
    calibrate,
    dephasing_rate,
    fit_eta,
    measurement_strength,
    nbar_from_stark,
    phase_per_photon,
    sigma_for_strength,
    strength_from_histograms,
    strength_from_samples,
)
from weaktraj.model import TWO_PI, PhysicalParams

P = PhysicalParams.device()


@pytest.mark.parametrize("nbar,expected", [(0.4, 3.15), (0.46, 3.62)])
def test_strength_quoted_values(nbar, expected):
    assert measurement_strength(P.replace(nbar=nbar), 1.8e-6) == pytest.approx(expected, abs=0.01)


def test_strength_zero_photons_and_negative_tau():
    assert measurement_strength(P.replace(nbar=0.0), 1.8e-6) == 0.0
    with pytest.raises(ValueError):
        measurement_strength(P, -1e-9)


def test_strength_scaling():
    base = measurement_strength(P, 1e-6)
    assert measurement_strength(P, 2e-6) == pytest.approx(2 * base, rel=1e-14)
    assert measurement_strength(P.replace(nbar=0.8), 1e-6) == pytest.approx(2 * base, rel=1e-14)
    assert measurement_strength(P.replace(eta=0.245), 1e-6) == pytest.approx(base / 2, rel=1e-14)
    assert measurement_strength(P.replace(chi=2 * P.chi), 1e-6) == pytest.approx(4 * base, rel=1e-14)
    assert measurement_strength(P.replace(chi=-P.chi), 1e-6) == pytest.approx(base, rel=1e-14)


@pytest.mark.parametrize("dv,sigma,s", [(1.0, 1.0, 1.0), (1.0, 0.5639, 3.145)])
def test_strength_from_histograms(dv, sigma, s):
    assert strength_from_histograms(dv, sigma) == pytest.approx(s, abs=1e-3)


@pytest.mark.parametrize("dv,s,sigma", [(1.0, 4.0, 0.5), (1.0, 3.15, 0.5634), (2.0, 3.15, 1.1268)])
def test_sigma_for_strength(dv, s, sigma):
    assert sigma_for_strength(dv, s) == pytest.approx(sigma, abs=1e-4)


def test_histogram_guards():
    with pytest.raises(ValueError):
        strength_from_histograms(1.0, 0.0)
    with pytest.raises(ValueError):
        sigma_for_strength(1.0, 0.0)


@given(st.floats(0.01, 100), st.floats(1e-3, 1e3))
def test_sigma_round_trip(s, dv):
    assert strength_from_histograms(dv, sigma_for_strength(dv, s)) == pytest.approx(s, rel=1e-12)


def test_dephasing_rate_examples():
    assert dephasing_rate(P) == pytest.approx(2.78e5, rel=0.005)
    assert dephasing_rate(P.replace(eta=1.0, t2_star=math.inf)) == 0.0
    assert dephasing_rate(P.replace(nbar=0.0)) == pytest.approx(5.0e4)


@settings(max_examples=200)
@given(
    chi_mhz=st.floats(-2.0, 2.0).filter(lambda c: abs(c) > 1e-3),
    kappa_mhz=st.floats(1.0, 50.0),
    nbar=st.floats(0.0, 5.0),
    eta=st.floats(0.01, 1.0),
    tau=st.floats(1e-9, 1e-4),
)
def test_dephasing_strength_identity(chi_mhz, kappa_mhz, nbar, eta, tau):
    params = PhysicalParams.from_mhz(chi_mhz, kappa_mhz, nbar, eta)
    lhs = dephasing_rate(params) * tau
    rhs = measurement_strength(params, tau) * (1 - eta) / (8 * eta)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-300)


@pytest.mark.parametrize("shift_mhz,nbar", [(0.392, 0.4), (0.0, 0.0), (0.4508, 0.46)])
def test_nbar_from_stark(shift_mhz, nbar):
    assert nbar_from_stark(TWO_PI * shift_mhz * 1e6, P.chi) == pytest.approx(nbar, abs=1e-9)


def test_nbar_from_stark_needs_chi():
    with pytest.raises(ValueError):
        nbar_from_stark(1.0, 0.0)


def test_phase_per_photon():
    assert phase_per_photon(P.chi, P.kappa) == pytest.approx(-0.1815, abs=1e-4)
    assert phase_per_photon(0.0, P.kappa) == 0.0
    assert phase_per_photon(-P.chi, P.kappa) == -phase_per_photon(P.chi, P.kappa)
    with pytest.raises(ValueError):
        phase_per_photon(P.chi, 0.0)


@pytest.mark.parametrize("slope,eta", [(7.87, 0.49), (16.06, 1.0)])
def test_fit_eta_examples(slope, eta):
    points = [(n, slope * n) for n in (0.1, 0.2, 0.3, 0.4, 0.46)]
    fit = fit_eta(points, 1.8e-6, P.chi, P.kappa)
    assert fit.eta == pytest.approx(eta, abs=0.005)
    assert fit.residual_norm == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("points", [[(0.4, 3.15)], [(0.4, 3.15), (0.4, 3.2)]])
def test_fit_eta_degenerate(points):
    with pytest.raises(ValueError):
        fit_eta(points, 1.8e-6, P.chi, P.kappa)


def test_strength_from_samples_recovers_s():
    rng = np.random.default_rng(5)
    sigma = sigma_for_strength(1.0, 3.15)
    s, dv, pooled = strength_from_samples(rng.normal(0.5, sigma, 50_000), rng.normal(-0.5, sigma, 50_000))
    assert s == pytest.approx(3.15, rel=0.03)
    assert dv == pytest.approx(1.0, abs=0.01)


def test_calibration_report():
    rep = calibrate(P, 1.8e-6)
    assert rep.s == pytest.approx(3.15, abs=0.01)
    assert rep.gamma * rep.tau == pytest.approx(0.50, abs=0.005)
    assert rep.identity_gap < 1e-12
    assert set(rep.as_dict()) >= {"S", "gamma_per_s", "sigma", "phase_per_photon_rad", "identity_gap"}
    empty = calibrate(P.replace(nbar=0.0), 1.8e-6)
    assert empty.s == 0.0 and empty.gamma == pytest.approx(1 / P.t2_star)
