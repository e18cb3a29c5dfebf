"""Domain types shared across the package.

Every type here is immutable after construction. Validation happens in
``__post_init__`` so that an invalid object can never circulate; numpy
array fields are marked read-only.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterator, Optional, Sequence, Tuple, Union

import numpy as np

TWO_PI = 2.0 * np.pi

#: Default segmentation of the measurement record (seconds).
DEFAULT_STEP = 16e-9

#: |log-odds| beyond this saturates tanh to +-1 in double precision.
LOG_ODDS_CLAMP = 30.0

NORM_TOL = 1e-9

#: Ratio |chi|/kappa above which the dispersive picture is flagged.
DISPERSIVE_LIMIT = 0.2

Seed = Union[int, Tuple[int, int]]


class DispersiveRegimeWarning(UserWarning):
    """|chi|/kappa is large enough that the dispersive approximation is doubtful."""


class Quadrature(str, enum.Enum):
    Z = "z"
    PHI = "phi"

    @classmethod
    def parse(cls, value: Union[str, "Quadrature"]) -> "Quadrature":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown quadrature {value!r}; expected 'z' or 'phi'") from None


class Axis(enum.IntEnum):
    X = 0
    Y = 1
    Z = 2

    @classmethod
    def parse(cls, value: Union[str, int, "Axis"]) -> "Axis":
        if isinstance(value, str):
            return cls[value.upper()]
        return cls(int(value))


class Eigenstate(enum.IntEnum):
    ONE = -1
    ZERO = 1


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


def clamp_log_odds(value):
    return np.clip(value, -LOG_ODDS_CLAMP, LOG_ODDS_CLAMP)


@dataclass(frozen=True)
class BlochVector:
    """Conditional expectation values (<sx>, <sy>, <sz>) of a qubit."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        comps = (self.x, self.y, self.z)
        if not all(math.isfinite(c) for c in comps):
            raise ValueError(f"non-finite Bloch vector {comps}")
        if any(abs(c) > 1.0 + NORM_TOL for c in comps):
            raise ValueError(f"Bloch component outside [-1, 1]: {comps}")
        if self.purity > 1.0 + NORM_TOL:
            raise ValueError(f"Bloch vector norm exceeds 1: |r|^2 = {self.purity!r}")

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "BlochVector":
        x, y, z = (float(v) for v in values)
        return cls(x, y, z)

    @property
    def purity(self) -> float:
        """Squared length x^2 + y^2 + z^2 (1 for a pure state)."""
        return self.x * self.x + self.y * self.y + self.z * self.z

    @property
    def transverse(self) -> float:
        return math.hypot(self.x, self.y)

    @property
    def azimuth(self) -> float:
        return math.atan2(self.y, self.x)

    def is_pure(self, tol: float = NORM_TOL) -> bool:
        return abs(self.purity - 1.0) <= tol

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def __iter__(self) -> Iterator[float]:
        return iter((self.x, self.y, self.z))


PLUS_X = BlochVector(1.0, 0.0, 0.0)
PLUS_Z = BlochVector(0.0, 0.0, 1.0)
MINUS_Z = BlochVector(0.0, 0.0, -1.0)


@dataclass(frozen=True)
class PhysicalParams:
    """Physical constants of the monitored qubit.

    Parameters
    ----------
    chi : float
        Dispersive coupling in rad/s (may be negative).
    kappa : float
        Cavity decay rate in rad/s.
    nbar : float
        Mean intracavity photon number.
    eta : float
        Quantum efficiency of the measurement chain, in (0, 1].
    t2_star : float
        Environmental dephasing time in seconds; ``math.inf`` disables it.
    """

    chi: float
    kappa: float
    nbar: float
    eta: float
    t2_star: float = math.inf

    def __post_init__(self):
        for name in ("chi", "kappa", "nbar", "eta"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.kappa <= 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if self.nbar < 0:
            raise ValueError(f"nbar must be non-negative, got {self.nbar}")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must lie in (0, 1], got {self.eta}")
        if not self.t2_star > 0:
            raise ValueError(f"t2_star must be positive (or inf), got {self.t2_star}")

    @classmethod
    def from_mhz(
        cls,
        chi_mhz: float,
        kappa_mhz: float,
        nbar: float,
        eta: float,
        t2_star_us: float = math.inf,
    ) -> "PhysicalParams":
        """Build from ordinary frequencies (chi/2pi, kappa/2pi in MHz) and T2* in us."""
        return cls(
            chi=TWO_PI * chi_mhz * 1e6,
            kappa=TWO_PI * kappa_mhz * 1e6,
            nbar=nbar,
            eta=eta,
            t2_star=t2_star_us * 1e-6,
        )

    @classmethod
    def device(cls, nbar: float = 0.4, **overrides) -> "PhysicalParams":
        """Device constants of the reference experiment."""
        base = cls.from_mhz(-0.49, 10.8, nbar, 0.49, 20.0)
        return replace(base, **overrides) if overrides else base

    def replace(self, **changes) -> "PhysicalParams":
        return replace(self, **changes)

    @property
    def dispersive_ratio(self) -> float:
        return abs(self.chi) / self.kappa

    @property
    def dispersive_ok(self) -> bool:
        return self.dispersive_ratio <= DISPERSIVE_LIMIT


@dataclass(frozen=True)
class MeasurementConfig:
    quadrature: Quadrature
    duration: float
    step: float = DEFAULT_STEP
    delta_v: float = 1.0
    initial_state: BlochVector = PLUS_X

    def __post_init__(self):
        object.__setattr__(self, "quadrature", Quadrature.parse(self.quadrature))
        if not self.step > 0:
            raise ValueError(f"step must be positive, got {self.step}")
        if not self.delta_v > 0:
            raise ValueError(f"delta_v must be positive, got {self.delta_v}")
        if self.duration < 0:
            raise ValueError(f"duration must be non-negative, got {self.duration}")
        steps_on_grid(self.duration, self.step)

    @property
    def n_steps(self) -> int:
        return steps_on_grid(self.duration, self.step)

    @property
    def times(self) -> np.ndarray:
        """Record grid tau_k = k * step, k = 1..n_steps."""
        return self.step * np.arange(1, self.n_steps + 1)

    def replace(self, **changes) -> "MeasurementConfig":
        return replace(self, **changes)


def steps_on_grid(duration: float, step: float) -> int:
    """Number of grid steps in ``duration``; raises if it is not a whole multiple."""
    ratio = duration / step
    n = int(round(ratio))
    if abs(ratio - n) > 1e-6:
        raise ValueError(
            f"duration {duration:.6g} s is not an integer multiple of the "
            f"{step:.6g} s step ({ratio:.4f} steps)"
        )
    return n


def snap_to_grid(duration: float, step: float = DEFAULT_STEP) -> float:
    """Floor ``duration`` onto the step grid."""
    return step * math.floor(duration / step + 1e-6)


def _running_mean(values: np.ndarray) -> np.ndarray:
    counts = np.arange(1, values.shape[-1] + 1)
    return np.cumsum(values, axis=-1) / counts


@dataclass(frozen=True, eq=False)
class MeasurementRecord:
    """One digitized measurement record.

    ``integrated[k]`` is the running mean of ``instantaneous[:k + 1]``, the
    discrete form of V_m(tau) = (1/tau) * integral of V(t) dt.
    """

    seed: Optional[Seed]
    quadrature: Quadrature
    times: np.ndarray
    instantaneous: np.ndarray
    integrated: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "quadrature", Quadrature.parse(self.quadrature))
        for name in ("times", "instantaneous", "integrated"):
            object.__setattr__(self, name, _frozen_array(getattr(self, name)))
        n = len(self.times)
        if self.instantaneous.shape != (n,) or self.integrated.shape != (n,):
            raise ValueError("times, instantaneous and integrated must be 1-D of equal length")
        if n:
            expected = _running_mean(self.instantaneous)
            scale = max(1.0, float(np.max(np.abs(expected))))
            if not np.allclose(self.integrated, expected, rtol=1e-12, atol=1e-12 * scale):
                raise ValueError("integrated series is not the running mean of instantaneous")

    @classmethod
    def from_instantaneous(
        cls, instantaneous, step: float, quadrature, seed: Optional[Seed] = None
    ) -> "MeasurementRecord":
        v = np.asarray(instantaneous, dtype=float)
        times = step * np.arange(1, len(v) + 1)
        return cls(seed, quadrature, times, v, _running_mean(v))

    def __len__(self) -> int:
        return len(self.times)

    @property
    def step(self) -> float:
        return float(self.times[0]) if len(self.times) else float("nan")

    def truncate(self, n_steps: int) -> "MeasurementRecord":
        return MeasurementRecord(
            self.seed,
            self.quadrature,
            self.times[:n_steps],
            self.instantaneous[:n_steps],
            self.integrated[:n_steps],
        )


@dataclass(frozen=True, eq=False)
class TrueStateTrace:
    """Hidden ground truth produced alongside a simulated record.

    ``bloch_true`` has shape (n_steps, 3) and is unit-norm at every step.
    ``eigenstate_label`` is ``None`` for phase-quadrature records.
    """

    eigenstate_label: Optional[Eigenstate]
    full_record_integral: np.ndarray
    phase_detected: np.ndarray
    phase_undetected: np.ndarray
    phase_environment: np.ndarray
    bloch_true: np.ndarray

    def __post_init__(self):
        for name in (
            "full_record_integral",
            "phase_detected",
            "phase_undetected",
            "phase_environment",
            "bloch_true",
        ):
            object.__setattr__(self, name, _frozen_array(getattr(self, name)))
        if self.bloch_true.size:
            norms = np.sum(self.bloch_true**2, axis=-1)
            if np.max(np.abs(norms - 1.0)) > 1e-9:
                raise ValueError("true state must remain pure")

    @property
    def total_phase(self) -> np.ndarray:
        return self.phase_detected + self.phase_undetected + self.phase_environment

    def state(self, k: int) -> BlochVector:
        return BlochVector.from_array(self.bloch_true[k])


@dataclass(frozen=True, eq=False)
class TrajectoryEstimate:
    """Bloch vectors inferred from a single record.

    Row 0 is the prepared state at tau = 0, rows 1..n follow the record grid.
    """

    times: np.ndarray
    bloch: np.ndarray
    integrated: Optional[np.ndarray] = None
    gamma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "times", _frozen_array(self.times))
        object.__setattr__(self, "bloch", _frozen_array(self.bloch))
        if self.integrated is not None:
            object.__setattr__(self, "integrated", _frozen_array(self.integrated))
        if self.bloch.shape != (len(self.times), 3):
            raise ValueError("bloch must have shape (len(times), 3)")
        if self.bloch.size and np.max(self.purity) > 1.0 + NORM_TOL:
            raise ValueError("trajectory violates the Bloch norm bound")

    @property
    def purity(self) -> np.ndarray:
        return np.sum(self.bloch**2, axis=-1)

    @property
    def x(self) -> np.ndarray:
        return self.bloch[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.bloch[:, 1]

    @property
    def z(self) -> np.ndarray:
        return self.bloch[:, 2]

    def __len__(self) -> int:
        return len(self.times)

    def at(self, k: int) -> BlochVector:
        return BlochVector.from_array(self.bloch[k])


@dataclass(frozen=True)
class TomographyOutcome:
    axis: Axis
    result: int
    measure_duration: float

    def __post_init__(self):
        object.__setattr__(self, "axis", Axis.parse(self.axis))
        if self.result not in (1, -1):
            raise ValueError(f"tomography result must be +1 or -1, got {self.result}")


@dataclass(frozen=True, eq=False)
class EnsembleDataset:
    """Repetitions of the herald / measure / tomography sequence, stored column-wise.

    Indexing yields ``(MeasurementRecord, TomographyOutcome)`` pairs. Records of
    different planned durations share a NaN-padded ``instantaneous`` matrix.
    """

    config: MeasurementConfig
    params: PhysicalParams
    master_seed: int
    readout_fidelity: float
    repetition: np.ndarray
    n_steps: np.ndarray
    instantaneous: np.ndarray
    axis: np.ndarray
    result: np.ndarray
    eigenstate: np.ndarray
    true_final: np.ndarray
    true_traces: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        casts = {
            "repetition": np.int64,
            "n_steps": np.int64,
            "instantaneous": float,
            "axis": np.int8,
            "result": np.int8,
            "eigenstate": np.int8,
            "true_final": float,
        }
        for name, dtype in casts.items():
            object.__setattr__(self, name, _frozen_array(getattr(self, name), dtype))
        if self.true_traces is not None:
            object.__setattr__(self, "true_traces", _frozen_array(self.true_traces))
        n = len(self.repetition)
        for name in ("n_steps", "axis", "result", "eigenstate"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have one entry per repetition")
        if self.instantaneous.ndim != 2 or self.instantaneous.shape[0] != n:
            raise ValueError("instantaneous must have shape (repetitions, steps)")
        if n and not np.all(np.isin(self.result, (-1, 1))):
            raise ValueError("tomography results must be +1 or -1")

    def __len__(self) -> int:
        return len(self.repetition)

    @property
    def step(self) -> float:
        return self.config.step

    @property
    def max_steps(self) -> int:
        return self.instantaneous.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.step * np.arange(1, self.max_steps + 1)

    @cached_property
    def integrated(self) -> np.ndarray:
        out = _running_mean(self.instantaneous)
        out.flags.writeable = False
        return out

    @property
    def durations(self) -> np.ndarray:
        """Distinct planned measurement lengths, in steps."""
        return np.unique(self.n_steps)

    def final_values(self) -> np.ndarray:
        """V_m at each repetition's own tomography time."""
        return self.integrated[np.arange(len(self)), self.n_steps - 1]

    def record(self, i: int) -> MeasurementRecord:
        n = int(self.n_steps[i])
        v = self.instantaneous[i, :n]
        return MeasurementRecord(
            (self.master_seed, int(self.repetition[i])),
            self.config.quadrature,
            self.times[:n],
            v,
            self.integrated[i, :n],
        )

    def outcome(self, i: int) -> TomographyOutcome:
        return TomographyOutcome(
            Axis(int(self.axis[i])), int(self.result[i]), float(self.n_steps[i] * self.step)
        )

    def __getitem__(self, i: int) -> Tuple[MeasurementRecord, TomographyOutcome]:
        return self.record(i), self.outcome(i)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def identical_to(self, other: "EnsembleDataset") -> bool:
        """Bit-level equality of every stored column."""
        if (self.config, self.params, self.master_seed, self.readout_fidelity) != (
            other.config,
            other.params,
            other.master_seed,
            other.readout_fidelity,
        ):
            return False
        names = ("repetition", "n_steps", "instantaneous", "axis", "result", "eigenstate", "true_final")
        for name in names:
            a, b = getattr(self, name), getattr(other, name)
            if a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        return True


def validate(params: PhysicalParams, config: MeasurementConfig):
    """Re-check a (params, config) pair and warn outside the dispersive regime.

    Construction already enforces the hard invariants; this is the single
    entry point pipelines call before simulating.
    """
    if not isinstance(params, PhysicalParams) or not isinstance(config, MeasurementConfig):
        raise TypeError("validate expects PhysicalParams and MeasurementConfig")
    steps_on_grid(config.duration, config.step)
    if not params.dispersive_ok:
        warnings.warn(
            f"|chi|/kappa = {params.dispersive_ratio:.3f} exceeds {DISPERSIVE_LIMIT}; "
            "the dispersive approximation may not hold",
            DispersiveRegimeWarning,
            stacklevel=2,
        )
    return params, config
