"""Synthetic measurement records with a latent pure true state.

Z-quadrature records are sampled eigenstate-first. The measurement is QND
and there is no Hamiltonian evolution between pulses, so drawing the
eigenstate label once and then conditionally independent Gaussian segments
is an exact unraveling; there is no SDE discretization error.

Inefficiency is modelled as extra Gaussian noise added to a latent
full-efficiency record, so the detected strength is exactly eta times the
full strength. T2* is a Gaussian phase random walk whose variance grows as
2 t / T2*.

Phase-quadrature records carry no z information. The qubit phase picks up
a detected kick (tied to the record), an undetected kick (diffusion at the
measurement-induced rate) and the environmental walk.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import rng as rngmod
from .calibration import full_strength, measurement_dephasing_rate, measurement_strength
from .model import (
    PLUS_Z,
    Axis,
    BlochVector,
    Eigenstate,
    EnsembleDataset,
    MeasurementConfig,
    MeasurementRecord,
    PhysicalParams,
    Quadrature,
    Seed,
    TomographyOutcome,
    TrueStateTrace,
    _running_mean,
    clamp_log_odds,
    steps_on_grid,
    validate,
)

HERALD_STRENGTH = 42.0
DEFAULT_FIDELITY = 0.95
DEFAULT_MAX_SAMPLES = 50_000_000
CHUNK_SIZE = 8192
WORKERS_ENV = "WEAKTRAJ_WORKERS"


class ResourceLimitError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentPlan:
    """What to repeat and how often.

    Repetition ``k`` is measured for ``measure_durations[(k // n_axes) % n_durations]``
    and read out along ``tomography_axes[k % n_axes]``, so every
    (duration, axis) pair is visited uniformly.
    """

    repetitions: int
    measure_durations: Optional[Tuple[float, ...]] = None
    tomography_axes: Tuple[Axis, ...] = (Axis.X, Axis.Y, Axis.Z)
    readout_fidelity: float = DEFAULT_FIDELITY
    herald: bool = True
    max_samples: int = DEFAULT_MAX_SAMPLES

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")
        if not 0.5 < self.readout_fidelity <= 1.0:
            raise ValueError(f"readout fidelity must lie in (0.5, 1], got {self.readout_fidelity}")
        axes = tuple(Axis.parse(a) for a in self.tomography_axes)
        if not axes:
            raise ValueError("need at least one tomography axis")
        object.__setattr__(self, "tomography_axes", axes)
        if self.measure_durations is not None:
            durations = tuple(float(d) for d in self.measure_durations)
            if not durations:
                raise ValueError("measure_durations must not be empty")
            object.__setattr__(self, "measure_durations", durations)

    def duration_steps(self, config: MeasurementConfig) -> np.ndarray:
        durations = self.measure_durations or (config.duration,)
        steps = np.array([steps_on_grid(d, config.step) for d in durations], dtype=np.int64)
        if np.any(steps < 1):
            raise ValueError("every measurement duration must span at least one step")
        return steps

    def schedule(self, config: MeasurementConfig) -> Tuple[np.ndarray, np.ndarray]:
        """(n_steps, axis) for every repetition."""
        k = np.arange(self.repetitions)
        n_axes = len(self.tomography_axes)
        steps = self.duration_steps(config)
        axes = np.array([int(a) for a in self.tomography_axes], dtype=np.int8)
        return steps[(k // n_axes) % len(steps)], axes[k % n_axes]


# -- single-qubit pulses ------------------------------------------------------

_AXIS_VECTORS = {
    "x": np.array([1.0, 0.0, 0.0]),
    "y": np.array([0.0, 1.0, 0.0]),
    "z": np.array([0.0, 0.0, 1.0]),
}


def pulse_matrix(axis: str, angle: float) -> np.ndarray:
    """Bloch-sphere action of a pulse of ``angle`` about ``axis`` ('+x', '-y', ...).

    Pulses follow the operator convention exp(+i angle n.sigma / 2), which
    turns the Bloch vector by -angle about n. With it a pi/2 pulse about -y
    takes |0> (+z) to +x. Quarter turns are returned with exact entries.
    """
    sign = -1.0 if axis.startswith("-") else 1.0
    n = sign * _AXIS_VECTORS[axis.lstrip("+-").lower()]
    theta = -angle
    cross = np.array([[0.0, -n[2], n[1]], [n[2], 0.0, -n[0]], [-n[1], n[0], 0.0]])
    mat = np.cos(theta) * np.eye(3) + np.sin(theta) * cross + (1 - np.cos(theta)) * np.outer(n, n)
    if math.isclose(abs(angle) % (math.pi / 2), 0.0, abs_tol=1e-12):
        mat = np.rint(mat)
    return mat


def pulse(state: BlochVector, axis: str, angle: float) -> BlochVector:
    return BlochVector.from_array(pulse_matrix(axis, angle) @ state.as_array())


# Pulse that maps the tomography axis onto z before the projective readout.
TOMOGRAPHY_PULSES = {
    Axis.X: pulse_matrix("+y", math.pi / 2),
    Axis.Y: pulse_matrix("+x", -math.pi / 2),
    Axis.Z: np.eye(3),
}


def herald_misassignment(s: float = HERALD_STRENGTH) -> float:
    """Error of a symmetric-threshold discrimination at strength ``s``: Phi(-sqrt(s)/2)."""
    return 0.5 * math.erfc(math.sqrt(s) / 2.0 / math.sqrt(2.0))


def herald(params: PhysicalParams, rng_seed: Seed = 0) -> BlochVector:
    """Post-selected ground state after the strong herald readout.

    At S = 42 the misassignment probability is about 6e-4, so the herald is
    taken as a perfect |0> preparation and the seed is not consumed.
    """
    return PLUS_Z


def prepare_plus_x(heralded: BlochVector = PLUS_Z) -> BlochVector:
    return pulse(heralded, "-y", math.pi / 2)


def _readout(z_after_pulse, u_project, u_flip, fidelity: float) -> np.ndarray:
    result = np.where(u_project < (1.0 + np.asarray(z_after_pulse)) / 2.0, 1, -1)
    return np.where(u_flip < 1.0 - fidelity, -result, result).astype(np.int8)


def tomography_pulse_and_readout(
    true_state: BlochVector,
    axis,
    fidelity: float = DEFAULT_FIDELITY,
    rng_seed: Seed = 0,
    measure_duration: float = 0.0,
) -> TomographyOutcome:
    """Rotate ``axis`` onto z, read out projectively, flip with probability 1 - fidelity."""
    axis = Axis.parse(axis)
    if not 0.0 <= fidelity <= 1.0:
        raise ValueError("fidelity must be a probability")
    z = (TOMOGRAPHY_PULSES[axis] @ true_state.as_array())[2]
    u = rngmod.substream(rng_seed, rngmod.TOMOGRAPHY).random(2)
    result = int(_readout(z, u[0], u[1], fidelity))
    return TomographyOutcome(axis, result, measure_duration)


# -- record generation --------------------------------------------------------


def _draw_record_noise(seeds: Sequence[Seed], n_steps: int) -> Tuple[np.ndarray, np.ndarray]:
    u = np.empty(len(seeds))
    noise = np.empty((len(seeds), 3, n_steps))
    for i, seed in enumerate(seeds):
        g = rngmod.substream(seed, rngmod.RECORD)
        u[i] = g.random()
        noise[i] = g.standard_normal((3, n_steps))
    return u, noise


def _check_initial(config: MeasurementConfig) -> BlochVector:
    state = config.initial_state
    if not state.is_pure():
        raise ValueError("simulated true states must start pure")
    return state


def _simulate_z(params, config, n_steps, u, noise):
    init = _check_initial(config)
    dv, dt = config.delta_v, config.step
    s_full_dt = full_strength(params, dt)
    if n_steps and s_full_dt <= 0:
        raise ValueError("measurement strength is zero (nbar = 0 or chi = 0); nothing to simulate")
    times = dt * np.arange(1, n_steps + 1)
    sigma = dv / math.sqrt(s_full_dt)

    label = np.where(u < (1.0 + init.z) / 2.0, int(Eigenstate.ZERO), int(Eigenstate.ONE))
    latent = label[:, None] * (dv / 2.0) + sigma * noise[:, 0]
    extra = sigma * math.sqrt(1.0 / params.eta - 1.0)
    detected = latent + extra * noise[:, 1]
    latent_mean = _running_mean(latent)

    if abs(init.z) == 1.0:
        z = np.full(latent.shape, init.z)
        r_perp = np.zeros(latent.shape)
    else:
        log_odds = clamp_log_odds(np.arctanh(init.z) + latent_mean * full_strength(params, times) / (2.0 * dv))
        z = np.tanh(log_odds)
        r_perp = 1.0 / np.cosh(log_odds)

    env_step = 0.0 if math.isinf(params.t2_star) else math.sqrt(2.0 * dt / params.t2_star)
    phase_env = np.cumsum(env_step * noise[:, 2], axis=-1)
    azimuth = init.azimuth - phase_env
    bloch = np.stack([r_perp * np.cos(azimuth), r_perp * np.sin(azimuth), z], axis=-1)
    zeros = np.zeros(latent.shape)
    return dict(
        label=label,
        instantaneous=detected,
        latent=latent_mean,
        phase_detected=zeros,
        phase_undetected=zeros,
        phase_environment=phase_env,
        bloch=bloch,
    )


def _simulate_phi(params, config, n_steps, u, noise):
    init = _check_initial(config)
    dv, dt = config.delta_v, config.step
    s_dt = measurement_strength(params, dt)
    if n_steps and s_dt <= 0:
        raise ValueError("measurement strength is zero (nbar = 0 or chi = 0); nothing to simulate")
    times = dt * np.arange(1, n_steps + 1)

    detected = (dv / math.sqrt(s_dt)) * noise[:, 0]
    phase_det = np.cumsum(s_dt * detected / (2.0 * dv), axis=-1)
    phase_und = np.cumsum(math.sqrt(2.0 * dt * measurement_dephasing_rate(params)) * noise[:, 1], axis=-1)
    env_step = 0.0 if math.isinf(params.t2_star) else math.sqrt(2.0 * dt / params.t2_star)
    phase_env = np.cumsum(env_step * noise[:, 2], axis=-1)

    azimuth = init.azimuth - (phase_det + phase_und + phase_env)
    r_perp = init.transverse
    z = np.full(detected.shape, init.z)
    bloch = np.stack([r_perp * np.cos(azimuth), r_perp * np.sin(azimuth), z], axis=-1)
    # full-efficiency integrated value that would produce the same measurement kick
    latent = 2.0 * dv * (phase_det + phase_und) / full_strength(params, times)
    return dict(
        label=np.zeros(len(u), dtype=int),
        instantaneous=detected,
        latent=latent,
        phase_detected=phase_det,
        phase_undetected=phase_und,
        phase_environment=phase_env,
        bloch=bloch,
    )


def _simulate_batch(params, config, n_steps, seeds):
    u, noise = _draw_record_noise(seeds, n_steps)
    if config.quadrature is Quadrature.Z:
        return _simulate_z(params, config, n_steps, u, noise)
    return _simulate_phi(params, config, n_steps, u, noise)


def _package(out, i, config, seed) -> Tuple[MeasurementRecord, TrueStateTrace]:
    record = MeasurementRecord.from_instantaneous(out["instantaneous"][i], config.step, config.quadrature, seed)
    label = Eigenstate(int(out["label"][i])) if config.quadrature is Quadrature.Z else None
    trace = TrueStateTrace(
        label,
        out["latent"][i],
        out["phase_detected"][i],
        out["phase_undetected"][i],
        out["phase_environment"][i],
        out["bloch"][i],
    )
    return record, trace


def simulate_record(
    params: PhysicalParams, config: MeasurementConfig, rng_seed: Seed = 0
) -> Tuple[MeasurementRecord, TrueStateTrace]:
    validate(params, config)
    out = _simulate_batch(params, config, config.n_steps, [rng_seed])
    return _package(out, 0, config, rng_seed)


def simulate_z_record(params, config, rng_seed: Seed = 0):
    if config.quadrature is not Quadrature.Z:
        raise ValueError("simulate_z_record needs a Z-quadrature configuration")
    return simulate_record(params, config, rng_seed)


def simulate_phi_record(params, config, rng_seed: Seed = 0):
    if config.quadrature is not Quadrature.PHI:
        raise ValueError("simulate_phi_record needs a PHI-quadrature configuration")
    return simulate_record(params, config, rng_seed)


def simulate_records(params, config, seeds: Sequence[Seed]) -> List[Tuple[MeasurementRecord, TrueStateTrace]]:
    validate(params, config)
    out = _simulate_batch(params, config, config.n_steps, list(seeds))
    return [_package(out, i, config, s) for i, s in enumerate(seeds)]


# -- full experiment ----------------------------------------------------------


def _run_chunk(args):
    params, config, master_seed, reps, steps, axes, fidelity, max_steps, keep_traces = args
    n = len(reps)
    inst = np.full((n, max_steps), np.nan)
    label = np.zeros(n, dtype=np.int8)
    final = np.empty((n, 3))
    result = np.empty(n, dtype=np.int8)
    traces = np.full((n, max_steps, 3), np.nan) if keep_traces else None
    for n_steps in np.unique(steps):
        rows = np.flatnonzero(steps == n_steps)
        seeds = [(master_seed, int(k)) for k in reps[rows]]
        out = _simulate_batch(params, config, int(n_steps), seeds)
        inst[rows, :n_steps] = out["instantaneous"]
        label[rows] = out["label"]
        final[rows] = out["bloch"][:, -1]
        if keep_traces:
            traces[rows, :n_steps] = out["bloch"]
    u = np.empty((n, 2))
    for i, k in enumerate(reps):
        u[i] = rngmod.substream((master_seed, int(k)), rngmod.TOMOGRAPHY).random(2)
    z_after = np.empty(n)
    for axis, mat in TOMOGRAPHY_PULSES.items():
        rows = axes == int(axis)
        z_after[rows] = final[rows] @ mat[2]
    result[:] = _readout(z_after, u[:, 0], u[:, 1], fidelity)
    return inst, label, final, result, traces


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be a positive integer") from None


def run_experiment(
    plan: ExperimentPlan,
    params: PhysicalParams,
    config: MeasurementConfig,
    master_seed: int,
    *,
    workers: Optional[int] = None,
    keep_traces: bool = False,
    chunk_size: int = CHUNK_SIZE,
) -> EnsembleDataset:
    """Herald, prepare, measure and read out ``plan.repetitions`` times.

    Repetition ``k`` draws from substreams keyed by ``(master_seed, k)``, so
    the dataset does not depend on ``workers`` or ``chunk_size``.
    """
    validate(params, config)
    if plan.herald:
        prepared = prepare_plus_x(herald(params))
        if config.initial_state != prepared:
            raise ValueError("heralded runs prepare +x; set initial_state accordingly or disable the herald")
    steps, axes = plan.schedule(config)
    total = int(steps.sum()) * (4 if keep_traces else 1)
    if total > plan.max_samples:
        raise ResourceLimitError(
            f"{plan.repetitions} repetitions need {total:,} samples, above the cap of "
            f"{plan.max_samples:,}; lower the repetition count or raise max_samples"
        )
    max_steps = int(steps.max())
    reps = np.arange(plan.repetitions)
    jobs = [
        (params, config, master_seed, reps[a:a + chunk_size], steps[a:a + chunk_size],
         axes[a:a + chunk_size], plan.readout_fidelity, max_steps, keep_traces)
        for a in range(0, plan.repetitions, chunk_size)
    ]
    workers = default_workers() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_chunk, jobs))
    else:
        parts = [_run_chunk(job) for job in jobs]

    return EnsembleDataset(
        config=config,
        params=params,
        master_seed=master_seed,
        readout_fidelity=plan.readout_fidelity,
        repetition=reps,
        n_steps=steps,
        instantaneous=np.concatenate([p[0] for p in parts]),
        axis=axes,
        result=np.concatenate([p[3] for p in parts]),
        eigenstate=np.concatenate([p[1] for p in parts]),
        true_final=np.concatenate([p[2] for p in parts]),
        true_traces=np.concatenate([p[4] for p in parts]) if keep_traces else None,
    )
