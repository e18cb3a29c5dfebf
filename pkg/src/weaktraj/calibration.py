"""Scalar physics: measurement strength, dephasing, Stark calibration, efficiency fit."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .model import PhysicalParams


def _strength_rate(chi: float, kappa: float) -> float:
    # S per (second * photon * unit efficiency)
    return 64.0 * chi * chi / kappa


def measurement_strength(params: PhysicalParams, tau) -> float:
    """Dimensionless strength S = 64 tau chi^2 nbar eta / kappa.

    ``tau`` may be an array; the result then has the same shape.
    """
    tau_arr = np.asarray(tau, dtype=float)
    if np.any(tau_arr < 0):
        raise ValueError("tau must be non-negative")
    s = _strength_rate(params.chi, params.kappa) * params.nbar * params.eta * tau_arr
    return float(s) if s.ndim == 0 else s


def full_strength(params: PhysicalParams, tau) -> float:
    """Strength the same measurement would have at unit efficiency."""
    return measurement_strength(params.replace(eta=1.0), tau)


def strength_from_histograms(delta_v: float, sigma: float) -> float:
    """S = delta_v^2 / sigma^2 from the separation and width of the two histograms."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return (delta_v / sigma) ** 2


def sigma_for_strength(delta_v: float, s: float) -> float:
    """Histogram width that yields strength ``s`` at separation ``delta_v``."""
    if not s > 0:
        raise ValueError(f"strength must be positive, got {s}")
    return delta_v / math.sqrt(s)


def measurement_dephasing_rate(params: PhysicalParams) -> float:
    """Dephasing from the undetected fraction of the signal, 8 chi^2 nbar (1 - eta) / kappa."""
    return 8.0 * params.chi**2 * params.nbar * (1.0 - params.eta) / params.kappa


def environmental_dephasing_rate(params: PhysicalParams) -> float:
    return 0.0 if math.isinf(params.t2_star) else 1.0 / params.t2_star


def dephasing_rate(params: PhysicalParams) -> float:
    """Total rate gamma entering the transverse decay exp(-gamma tau) of the filter."""
    return measurement_dephasing_rate(params) + environmental_dephasing_rate(params)


def ensemble_dephasing_rate(params: PhysicalParams) -> float:
    """Coherence decay rate of the unconditioned ensemble, 8 chi^2 nbar / kappa + 1/T2*.

    Independent of eta: it is what an observer who ignores the record sees.
    """
    return 8.0 * params.chi**2 * params.nbar / params.kappa + environmental_dephasing_rate(params)


def nbar_from_stark(stark_shift: float, chi: float) -> float:
    """Photon number from the AC Stark shift, assuming 2|chi| of shift per photon."""
    if chi == 0:
        raise ValueError("chi must be non-zero to invert the Stark shift")
    return abs(stark_shift) / (2.0 * abs(chi))


def phase_per_photon(chi: float, kappa: float) -> float:
    """Mean qubit phase shift per cavity photon, 4 chi / kappa (signed)."""
    if not kappa > 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    return 4.0 * chi / kappa


@dataclass(frozen=True)
class EtaFit:
    eta: float
    slope: float
    residual_norm: float


def fit_eta(points: Sequence[Tuple[float, float]], tau: float, chi: float, kappa: float) -> EtaFit:
    """Efficiency from a line through the origin of S versus nbar.

    The slope of S = (64 tau chi^2 eta / kappa) * nbar is found by least
    squares without an intercept, then divided by 64 tau chi^2 / kappa.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
        raise ValueError("need at least two (nbar, S) points")
    nbar, s = pts[:, 0], pts[:, 1]
    if len(np.unique(nbar)) < 2:
        raise ValueError("degenerate fit: nbar values must be distinct")
    denom = float(nbar @ nbar)
    if denom == 0:
        raise ValueError("degenerate fit: all nbar are zero")
    scale = _strength_rate(chi, kappa) * tau
    if scale == 0:
        raise ValueError("degenerate fit: chi or tau is zero")
    slope = float(nbar @ s) / denom
    residual = float(np.linalg.norm(s - slope * nbar))
    return EtaFit(eta=slope / scale, slope=slope, residual_norm=residual)


def strength_from_samples(v_zero: np.ndarray, v_one: np.ndarray) -> Tuple[float, float, float]:
    """Estimate (S, delta_v, sigma) from integrated values of |0> and |1> preparations.

    sigma is the pooled standard deviation of the two histograms.
    """
    v_zero = np.asarray(v_zero, dtype=float)
    v_one = np.asarray(v_one, dtype=float)
    if len(v_zero) < 2 or len(v_one) < 2:
        raise ValueError("need at least two samples per histogram")
    delta_v = float(np.mean(v_zero) - np.mean(v_one))
    pooled = (np.var(v_zero, ddof=1) * (len(v_zero) - 1) + np.var(v_one, ddof=1) * (len(v_one) - 1)) / (
        len(v_zero) + len(v_one) - 2
    )
    sigma = float(np.sqrt(pooled))
    return strength_from_histograms(delta_v, sigma), delta_v, sigma


@dataclass(frozen=True)
class CalibrationReport:
    tau: float
    s: float
    gamma: float
    gamma_measurement: float
    sigma: float
    phase_per_photon: float
    identity_lhs: float
    identity_rhs: float
    fitted_eta: Optional[float] = None

    def __post_init__(self):
        if self.s < 0 or self.gamma < 0:
            raise ValueError("strength and dephasing rate must be non-negative")

    @property
    def identity_gap(self) -> float:
        """|gamma_meas tau - S (1 - eta) / (8 eta)|, zero up to rounding."""
        return abs(self.identity_lhs - self.identity_rhs)

    def as_dict(self) -> dict:
        out = {
            "tau_s": self.tau,
            "S": self.s,
            "gamma_per_s": self.gamma,
            "gamma_measurement_per_s": self.gamma_measurement,
            "gamma_tau": self.gamma * self.tau,
            "sigma": self.sigma,
            "phase_per_photon_rad": self.phase_per_photon,
            "identity_gamma_meas_tau": self.identity_lhs,
            "identity_S_1meta_over_8eta": self.identity_rhs,
            "identity_gap": self.identity_gap,
        }
        if self.fitted_eta is not None:
            out["fitted_eta"] = self.fitted_eta
        return out


def calibrate(params: PhysicalParams, tau: float, delta_v: float = 1.0) -> CalibrationReport:
    s = measurement_strength(params, tau)
    gamma_meas = measurement_dephasing_rate(params)
    return CalibrationReport(
        tau=tau,
        s=s,
        gamma=dephasing_rate(params),
        gamma_measurement=gamma_meas,
        sigma=sigma_for_strength(delta_v, s) if s > 0 else math.inf,
        phase_per_photon=phase_per_photon(params.chi, params.kappa),
        identity_lhs=gamma_meas * tau,
        identity_rhs=s * (1.0 - params.eta) / (8.0 * params.eta),
    )
