"""Bayesian state estimation from integrated weak-measurement records.

The filter only ever sees (V_m, S, delta_v, gamma, tau); it has no access to
the simulator's latent variables.
"""

from __future__ import annotations

import math
from typing import List, Optional

import numpy as np

from .calibration import dephasing_rate, full_strength, measurement_strength
from .model import (
    PLUS_X,
    BlochVector,
    MeasurementConfig,
    MeasurementRecord,
    PhysicalParams,
    Quadrature,
    TrajectoryEstimate,
    clamp_log_odds,
)


def _gauss_logpdf(v, mean, var):
    return -0.5 * (v - mean) ** 2 / var


def bayes_posterior(prior_p0: float, v_m: float, delta_v: float, s: float) -> float:
    """P(0 | V_m) for histograms centred at +-delta_v/2 with variance delta_v^2 / s.

    With ``s == 0`` the likelihood is flat and the prior is returned.
    """
    if not 0.0 <= prior_p0 <= 1.0:
        raise ValueError("prior must be a probability")
    if s < 0:
        raise ValueError("strength must be non-negative")
    if s == 0 or prior_p0 in (0.0, 1.0):
        return float(prior_p0)
    var = delta_v**2 / s
    l0 = math.log(prior_p0) + _gauss_logpdf(v_m, delta_v / 2, var)
    l1 = math.log1p(-prior_p0) + _gauss_logpdf(v_m, -delta_v / 2, var)
    # logistic of the log-odds, written to avoid overflow
    return 0.5 * (1.0 + math.tanh(0.5 * (l0 - l1)))


def _initial_log_odds(initial: BlochVector):
    if abs(initial.z) >= 1.0:
        if initial.transverse > 1e-12:
            raise ValueError("inconsistent initial state: |z| = 1 with a transverse component")
        return math.copysign(math.inf, initial.z)
    return math.atanh(initial.z)


def z_estimates(v_m, s, delta_v: float, gamma_tau, initial: BlochVector = PLUS_X) -> np.ndarray:
    """Vectorised Z-measurement update; returns an array of shape ``v_m.shape + (3,)``.

    z = tanh(arctanh(z0) + V_m S / (2 delta_v)); the transverse part is the
    exact Bayes factor cosh(L0)/cosh(L) times exp(-gamma tau), laid on the
    initial transverse direction. For a pure initial state this is
    sqrt(1 - z^2) exp(-gamma tau).
    """
    v_m, s, gamma_tau = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (v_m, s, gamma_tau)))
    l0 = _initial_log_odds(initial)
    if math.isinf(l0):
        z = np.full(v_m.shape, initial.z)
        r_perp = np.zeros(v_m.shape)
    else:
        log_odds = clamp_log_odds(l0 + v_m * s / (2.0 * delta_v))
        z = np.tanh(log_odds)
        r_perp = initial.transverse * math.cosh(l0) / np.cosh(log_odds) * np.exp(-gamma_tau)
    phi = initial.azimuth
    return np.stack([r_perp * math.cos(phi), r_perp * math.sin(phi), z], axis=-1)


def phi_estimates(v_m, s, delta_v: float, gamma_tau, initial: BlochVector = PLUS_X) -> np.ndarray:
    """Vectorised phase-measurement update: azimuth turns by -S V_m / (2 delta_v)."""
    v_m, s, gamma_tau = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (v_m, s, gamma_tau)))
    azimuth = initial.azimuth - s * v_m / (2.0 * delta_v)
    r_perp = initial.transverse * np.exp(-gamma_tau)
    z = np.full(v_m.shape, initial.z)
    return np.stack([r_perp * np.cos(azimuth), r_perp * np.sin(azimuth), z], axis=-1)


def estimates(quadrature, v_m, s, delta_v, gamma_tau, initial=PLUS_X) -> np.ndarray:
    if Quadrature.parse(quadrature) is Quadrature.Z:
        return z_estimates(v_m, s, delta_v, gamma_tau, initial)
    return phi_estimates(v_m, s, delta_v, gamma_tau, initial)


def update_z(v_m, s, delta_v, gamma, tau, initial: BlochVector = PLUS_X) -> BlochVector:
    """Posterior Bloch vector after a Z-measurement with integrated value ``v_m``."""
    return BlochVector.from_array(z_estimates(v_m, s, delta_v, gamma * tau, initial))


def update_phi(v_m, s, delta_v, gamma, tau, initial: BlochVector = PLUS_X) -> BlochVector:
    """Posterior Bloch vector after a phase measurement with integrated value ``v_m``."""
    return BlochVector.from_array(phi_estimates(v_m, s, delta_v, gamma * tau, initial))


def _check_grid(record: MeasurementRecord, config: MeasurementConfig):
    if record.quadrature is not config.quadrature:
        raise ValueError(
            f"record quadrature {record.quadrature.value!r} does not match "
            f"config quadrature {config.quadrature.value!r}"
        )
    expected = config.step * np.arange(1, len(record) + 1)
    if not np.allclose(record.times, expected, rtol=1e-9, atol=0.0):
        raise ValueError("record times are not on the configured step grid")


def trajectory(
    record: MeasurementRecord,
    params: PhysicalParams,
    config: MeasurementConfig,
    gamma: Optional[float] = None,
) -> TrajectoryEstimate:
    """Quantum trajectory inferred from the cumulative segments V_m(tau_k).

    Row 0 is the prepared state at tau = 0. ``gamma`` overrides the
    dephasing rate derived from ``params``.
    """
    _check_grid(record, config)
    gamma = dephasing_rate(params) if gamma is None else gamma
    times = record.times
    bloch = estimates(
        config.quadrature,
        record.integrated,
        measurement_strength(params, times),
        config.delta_v,
        gamma * times,
        config.initial_state,
    )
    return TrajectoryEstimate(
        times=np.concatenate([[0.0], times]),
        bloch=np.vstack([config.initial_state.as_array(), bloch]),
        integrated=np.concatenate([[np.nan], record.integrated]),
        gamma=gamma,
    )


def batch_trajectories(integrated: np.ndarray, params, config, gamma: Optional[float] = None) -> np.ndarray:
    """Filter estimates for a (records, steps) matrix of V_m values; shape (records, steps, 3)."""
    gamma = dephasing_rate(params) if gamma is None else gamma
    times = config.step * np.arange(1, integrated.shape[-1] + 1)
    return estimates(
        config.quadrature,
        integrated,
        measurement_strength(params, times),
        config.delta_v,
        gamma * times,
        config.initial_state,
    )


def sequential_equivalence_check(record: MeasurementRecord, params, config) -> float:
    """Max Bloch-component gap between one-shot and segment-by-segment filtering.

    The stepwise path feeds each 16 ns increment to :func:`update_z` with the
    previous posterior as prior; Gaussian likelihoods multiply, so both
    paths agree up to rounding.
    """
    if config.quadrature is not Quadrature.Z:
        raise ValueError("the sequential check applies to Z-measurement records")
    one_shot = trajectory(record, params, config).bloch[1:]
    gamma = dephasing_rate(params)
    dt = config.step
    s_dt = measurement_strength(params, dt)
    state = config.initial_state
    worst = 0.0
    for k, v in enumerate(record.instantaneous):
        state = update_z(v, s_dt, config.delta_v, gamma, dt, state)
        worst = max(worst, float(np.max(np.abs(state.as_array() - one_shot[k]))))
    return worst


def conditional_oracle(
    v_m: float,
    params: PhysicalParams,
    tau: float,
    resolution: int = 64,
    delta_v: float = 1.0,
    initial_z: float = 0.0,
) -> BlochVector:
    """E[true state | V_m] under the latent-record model, by Gauss-Hermite quadrature.

    Given eigenstate c, the latent full-efficiency integral Y has mean
    mu_c = +-delta_v/2 and variance delta_v^2 / S_full; the detected value
    adds independent noise of variance delta_v^2 (1/eta - 1) / S_full. So
    Y | V, c is Gaussian with mean mu_c + eta (V - mu_c) and variance
    (1 - eta) delta_v^2 / S_full, and c | V follows the detected-strength
    mixture. The pure-state functions tanh and sech of Y S_full / (2 delta_v)
    are averaged over that posterior. The result is checked against a
    doubled node count; a gap above 1e-6 raises.
    """
    s_full = full_strength(params, tau)
    s_det = measurement_strength(params, tau)
    env = 1.0 if math.isinf(params.t2_star) else math.exp(-tau / params.t2_star)
    if not -1.0 < initial_z < 1.0:
        raise ValueError("initial_z must lie strictly inside (-1, 1)")
    l0 = math.atanh(initial_z)
    if s_full == 0:
        return BlochVector(math.sqrt(1 - initial_z**2) * env, 0.0, initial_z)
    if params.eta == 1.0:
        arg = l0 + v_m * s_full / (2.0 * delta_v)
        return BlochVector(env / math.cosh(arg), 0.0, math.tanh(arg))

    def integrate(n_nodes: int):
        nodes, weights = np.polynomial.hermite_e.hermegauss(n_nodes)
        weights = weights / weights.sum()
        p0 = (1.0 + initial_z) / 2.0
        var_v = delta_v**2 / s_det
        logw = np.array([
            math.log(p0) + _gauss_logpdf(v_m, delta_v / 2, var_v),
            math.log1p(-p0) + _gauss_logpdf(v_m, -delta_v / 2, var_v),
        ])
        w = np.exp(logw - logw.max())
        w /= w.sum()
        sd = delta_v * math.sqrt((1.0 - params.eta) / s_full)
        ex = ez = 0.0
        for wc, mu in zip(w, (delta_v / 2, -delta_v / 2)):
            y = mu + params.eta * (v_m - mu) + sd * nodes
            arg = clamp_log_odds(l0 + y * s_full / (2.0 * delta_v))
            ex += wc * float(weights @ (1.0 / np.cosh(arg)))
            ez += wc * float(weights @ np.tanh(arg))
        return np.array([ex * env, 0.0, ez])

    coarse, fine = integrate(resolution), integrate(2 * resolution)
    if np.max(np.abs(coarse - fine)) > 1e-6:
        raise ValueError(f"quadrature with {resolution} nodes is not converged to 1e-6; raise resolution")
    return BlochVector.from_array(fine)


def reversal_detector(traj: TrajectoryEstimate, delta: float) -> List[float]:
    """Times where the state returns within ``delta`` of its starting point.

    The reference is the prepared state with its transverse part shrunk by
    the dephasing envelope exp(-gamma tau). An event needs a prior excursion
    beyond 2 * delta; after each event the detector re-arms.
    """
    start = traj.bloch[0]
    envelope = np.exp(-traj.gamma * traj.times)
    reference = np.column_stack([start[0] * envelope, start[1] * envelope, np.full(len(traj), start[2])])
    distance = np.linalg.norm(traj.bloch - reference, axis=1)
    events = []
    armed = False
    for t, d in zip(traj.times[1:], distance[1:]):
        if d > 2 * delta:
            armed = True
        elif armed and d < delta:
            events.append(float(t))
            armed = False
    return events
