"""Conditional tomography: binning by integrated value, fidelity correction,
correlation curves and ensemble-reconstructed trajectories."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .bayes import estimates
from .calibration import dephasing_rate, measurement_strength
from .model import Axis, EnsembleDataset, MeasurementRecord, TrajectoryEstimate, steps_on_grid

DEFAULT_MIN_COUNT = 200
DEFAULT_EPSILON_SCALE = 0.1
WIDENING = (1, 2, 4)


class LowCountWarning(UserWarning):
    pass


def keep_all(indices: np.ndarray) -> np.ndarray:
    """Leakage discard hook; synthetic two-level data never leaves the qubit manifold."""
    return np.ones(len(indices), dtype=bool)


@dataclass(frozen=True, eq=False)
class MatchedSubset:
    dataset: EnsembleDataset
    tau: float
    target_v: float
    epsilon: float
    indices: np.ndarray

    @property
    def axes(self) -> np.ndarray:
        return self.dataset.axis[self.indices]

    @property
    def results(self) -> np.ndarray:
        return self.dataset.result[self.indices]

    def by_axis(self) -> dict:
        axes = self.axes
        return {a: self.indices[axes == int(a)] for a in Axis}

    def counts(self) -> np.ndarray:
        return np.bincount(self.axes, minlength=3)[:3]


def _rows_at(dataset: EnsembleDataset, tau: float) -> np.ndarray:
    k = steps_on_grid(tau, dataset.step)
    rows = np.flatnonzero(dataset.n_steps == k)
    if len(rows) == 0:
        raise ValueError(f"no repetition was read out at tau = {tau:.6g} s")
    return rows


def bin_records(dataset: EnsembleDataset, tau: float, target_v: float, epsilon: float) -> MatchedSubset:
    """Repetitions read out at ``tau`` whose V_m(tau) lies within +-epsilon of ``target_v``."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    rows = _rows_at(dataset, tau)
    k = steps_on_grid(tau, dataset.step)
    values = dataset.integrated[rows, k - 1]
    return MatchedSubset(dataset, tau, target_v, epsilon, rows[np.abs(values - target_v) <= epsilon])


@dataclass(frozen=True)
class TomographyTally:
    """Per-axis outcome counts and sums; adds associatively across subsets."""

    counts: np.ndarray
    sums: np.ndarray

    @classmethod
    def from_outcomes(cls, axes, results) -> "TomographyTally":
        axes = np.asarray(axes, dtype=np.int64)
        results = np.asarray(results, dtype=np.int64)
        return cls(
            np.bincount(axes, minlength=3)[:3],
            np.bincount(axes, weights=results, minlength=3)[:3].astype(np.int64),
        )

    def __add__(self, other: "TomographyTally") -> "TomographyTally":
        return TomographyTally(self.counts + other.counts, self.sums + other.sums)


@dataclass(frozen=True)
class TomographyEstimate:
    means: np.ndarray
    se: np.ndarray
    counts: np.ndarray
    raw_means: np.ndarray
    readout_fidelity: float


def _correction(fidelity: float) -> float:
    if not 0.5 < fidelity <= 1.0:
        raise ValueError(f"readout fidelity must lie in (0.5, 1], got {fidelity}")
    return 2.0 * fidelity - 1.0


def estimate_from_tally(tally: TomographyTally, readout_fidelity: float) -> TomographyEstimate:
    """Linear inversion of the symmetric readout flip: divide by 2F - 1."""
    if np.any(tally.counts == 0):
        missing = [Axis(i).name for i in np.flatnonzero(tally.counts == 0)]
        raise ValueError(f"no tomography outcomes on axis {', '.join(missing)}")
    c = _correction(readout_fidelity)
    raw = tally.sums / tally.counts
    raw_se = np.sqrt(np.clip(1.0 - raw**2, 0.0, None) / tally.counts)
    return TomographyEstimate(raw / c, raw_se / c, tally.counts.copy(), raw, readout_fidelity)


def conditional_tomography(
    subset: MatchedSubset,
    readout_fidelity: Optional[float] = None,
    min_count: int = DEFAULT_MIN_COUNT,
    keep: Callable[[np.ndarray], np.ndarray] = keep_all,
) -> TomographyEstimate:
    """Fidelity-corrected mean of +-1 outcomes along each axis of a matched subset."""
    fidelity = subset.dataset.readout_fidelity if readout_fidelity is None else readout_fidelity
    idx = subset.indices[keep(subset.indices)]
    tally = TomographyTally.from_outcomes(subset.dataset.axis[idx], subset.dataset.result[idx])
    est = estimate_from_tally(tally, fidelity)
    if np.any(est.counts < min_count):
        warnings.warn(
            f"only {int(est.counts.min())} outcomes on some axis (minimum {min_count})",
            LowCountWarning,
            stacklevel=2,
        )
    return est


@dataclass(frozen=True, eq=False)
class CorrelationTable:
    """Binned tomography versus V_m at one measurement time.

    ``theory_center`` evaluates the filter at bin centres (for overlay);
    ``theory_mean`` averages it over the records actually in each bin, which
    is the like-for-like quantity for statistical comparison.
    """

    quadrature: str
    tau: float
    s: float
    gamma_tau: float
    edges: np.ndarray
    centers: np.ndarray
    counts: np.ndarray
    means: np.ndarray
    se: np.ndarray
    theory_center: np.ndarray
    theory_mean: np.ndarray

    def qualifying(self, min_count: int = DEFAULT_MIN_COUNT) -> np.ndarray:
        return np.all(self.counts >= min_count, axis=1)

    def zscores(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return (self.means - self.theory_mean) / self.se

    def agreement(self, min_count: int = DEFAULT_MIN_COUNT, nsigma: float = 3.0, axes=(0, 1, 2)) -> float:
        """Fraction of qualifying bins where every listed axis is within ``nsigma`` SE."""
        ok = self.qualifying(min_count)
        if not ok.any():
            return float("nan")
        within = np.all(np.abs(self.zscores()[:, list(axes)]) < nsigma, axis=1)
        return float(np.mean(within[ok]))

    def columns(self) -> dict:
        cols = {"v_center": self.centers}
        for a, name in enumerate("xyz"):
            cols[f"n_{name}"] = self.counts[:, a]
        for a, name in enumerate("xyz"):
            cols[f"mean_{name}"] = self.means[:, a]
            cols[f"se_{name}"] = self.se[:, a]
        for a, name in enumerate("xyz"):
            cols[f"theory_{name}"] = self.theory_center[:, a]
            cols[f"theory_avg_{name}"] = self.theory_mean[:, a]
        return cols


def single_tau(dataset: EnsembleDataset, tau: Optional[float] = None) -> float:
    durations = dataset.durations
    if tau is None:
        if len(durations) != 1:
            raise ValueError("dataset spans several measurement times; choose one with tau")
        return float(durations[0] * dataset.step)
    _rows_at(dataset, tau)
    return tau


def correlation_curves(
    dataset: EnsembleDataset, n_bins: int, tau: Optional[float] = None
) -> CorrelationTable:
    """Equal-width bins over the observed V_m range with per-bin tomography."""
    if n_bins < 3:
        raise ValueError("need at least 3 bins")
    tau = single_tau(dataset, tau)
    rows = _rows_at(dataset, tau)
    k = steps_on_grid(tau, dataset.step)
    v = dataset.integrated[rows, k - 1]
    axes = dataset.axis[rows].astype(np.int64)
    res = dataset.result[rows].astype(np.int64)
    edges = np.linspace(v.min(), v.max(), n_bins + 1)
    b = np.clip(np.searchsorted(edges, v, side="right") - 1, 0, n_bins - 1)

    counts = np.bincount(b * 3 + axes, minlength=3 * n_bins).reshape(n_bins, 3)
    sums = np.bincount(b * 3 + axes, weights=res, minlength=3 * n_bins).reshape(n_bins, 3)
    c = _correction(dataset.readout_fidelity)
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = sums / counts
        se = np.sqrt(np.clip(1.0 - raw**2, 0.0, None) / counts) / c
    means = raw / c

    cfg, params = dataset.config, dataset.params
    s = measurement_strength(params, tau)
    gamma_tau = dephasing_rate(params) * tau
    centers = 0.5 * (edges[:-1] + edges[1:])
    theory_center = estimates(cfg.quadrature, centers, s, cfg.delta_v, gamma_tau, cfg.initial_state)
    per_record = estimates(cfg.quadrature, v, s, cfg.delta_v, gamma_tau, cfg.initial_state)
    n_in_bin = np.bincount(b, minlength=n_bins)
    with np.errstate(divide="ignore", invalid="ignore"):
        theory_mean = np.column_stack(
            [np.bincount(b, weights=per_record[:, a], minlength=n_bins) / n_in_bin for a in range(3)]
        )
    return CorrelationTable(
        cfg.quadrature.value, tau, s, gamma_tau, edges, centers, counts, means, se, theory_center, theory_mean
    )


@dataclass(frozen=True, eq=False)
class Reconstruction:
    """Tomographically reconstructed trajectory; rows follow ``times``."""

    times: np.ndarray
    target_v: np.ndarray
    epsilon: np.ndarray
    counts: np.ndarray
    means: np.ndarray
    se: np.ndarray
    ok: np.ndarray

    def __len__(self) -> int:
        return len(self.times)


def reconstruct_trajectory(
    dataset: EnsembleDataset,
    reference_record: MeasurementRecord,
    epsilon: Optional[float] = None,
    min_count: int = DEFAULT_MIN_COUNT,
    epsilon_scale: float = DEFAULT_EPSILON_SCALE,
    widening: Sequence[int] = WIDENING,
) -> Reconstruction:
    """Conditional tomography around a reference record at every readout time it covers.

    With ``epsilon=None`` the window starts at ``epsilon_scale`` times the
    spread of V_m(tau_i) and doubles (up to 4x) until every axis has
    ``min_count`` outcomes. A fixed ``epsilon`` is used as given. Points
    still short of ``min_count`` are kept but flagged not ok.
    """
    if reference_record.quadrature is not dataset.config.quadrature:
        raise ValueError("reference record and dataset use different quadratures")
    ks = [int(k) for k in dataset.durations if k <= len(reference_record)]
    if not ks:
        raise ValueError("reference record is shorter than every readout time in the dataset")
    step = dataset.step
    if not np.allclose(reference_record.times[: ks[-1]], step * np.arange(1, ks[-1] + 1), rtol=1e-9, atol=0):
        raise ValueError("reference record is not on the dataset grid")

    n = len(ks)
    out = dict(
        target_v=np.empty(n), epsilon=np.empty(n), counts=np.zeros((n, 3), dtype=np.int64),
        means=np.full((n, 3), np.nan), se=np.full((n, 3), np.nan), ok=np.zeros(n, dtype=bool),
    )
    c = _correction(dataset.readout_fidelity)
    for i, k in enumerate(ks):
        rows = np.flatnonzero(dataset.n_steps == k)
        values = dataset.integrated[rows, k - 1]
        target = float(reference_record.integrated[k - 1])
        if epsilon is None:
            spread = float(np.std(values))
            windows = [epsilon_scale * f * spread for f in widening]
        else:
            windows = [epsilon]
        for eps in windows:
            hit = rows[np.abs(values - target) <= eps]
            tally = TomographyTally.from_outcomes(dataset.axis[hit], dataset.result[hit])
            if tally.counts.min() >= min_count:
                break
        out["target_v"][i], out["epsilon"][i], out["counts"][i] = target, eps, tally.counts
        with np.errstate(divide="ignore", invalid="ignore"):
            raw = tally.sums / tally.counts
            out["means"][i] = raw / c
            out["se"][i] = np.sqrt(np.clip(1.0 - raw**2, 0.0, None) / tally.counts) / c
        out["ok"][i] = tally.counts.min() >= min_count
    if not out["ok"].any():
        raise ValueError(f"no readout time reaches {min_count} matched outcomes per axis")
    return Reconstruction(times=step * np.array(ks, dtype=float), **out)


@dataclass(frozen=True)
class ComparisonReport:
    n_points: int
    rms: np.ndarray
    max_deviation: np.ndarray
    chi2: float

    @property
    def chi2_per_point(self) -> float:
        return self.chi2 / (3 * self.n_points) if self.n_points else float("nan")

    def systematic(self, threshold: float = 3.0) -> bool:
        """True when the normalised chi-square points to a model mismatch."""
        return self.chi2_per_point > threshold

    def as_dict(self) -> dict:
        return {
            "n_points": self.n_points,
            "rms": dict(zip("xyz", map(float, self.rms))),
            "max_deviation": dict(zip("xyz", map(float, self.max_deviation))),
            "chi2": self.chi2,
            "chi2_per_point": self.chi2_per_point,
            "systematic": self.systematic(),
        }


Trajectoryish = Union[TrajectoryEstimate, Reconstruction]


def _grid_values(traj: Trajectoryish, times: np.ndarray) -> np.ndarray:
    values = traj.bloch if isinstance(traj, TrajectoryEstimate) else traj.means
    idx = np.searchsorted(traj.times, times)
    idx = np.clip(idx, 0, len(traj.times) - 1)
    if not np.allclose(traj.times[idx], times, rtol=1e-9, atol=1e-15):
        raise ValueError("time grids of the compared trajectories do not match")
    return values[idx]


def compare(filter_traj: Trajectoryish, reconstructed: Trajectoryish) -> ComparisonReport:
    """Per-axis RMS, max deviation and chi-square of filter versus reconstruction.

    Only points flagged ok in a :class:`Reconstruction` enter the statistics.
    """
    if isinstance(reconstructed, Reconstruction):
        ok = reconstructed.ok
        times = reconstructed.times[ok]
        recon = reconstructed.means[ok]
        se = reconstructed.se[ok]
    else:
        times = reconstructed.times
        recon = reconstructed.bloch
        se = np.zeros_like(recon)
    pred = _grid_values(filter_traj, times)
    dev = pred - recon
    n = len(times)
    if n == 0:
        return ComparisonReport(0, np.full(3, np.nan), np.full(3, np.nan), float("nan"))
    with np.errstate(divide="ignore", invalid="ignore"):
        z2 = np.where(se > 0, (dev / se) ** 2, np.where(dev == 0, 0.0, np.inf))
    return ComparisonReport(
        n_points=n,
        rms=np.sqrt(np.mean(dev**2, axis=0)),
        max_deviation=np.max(np.abs(dev), axis=0),
        chi2=float(np.sum(z2)),
    )
