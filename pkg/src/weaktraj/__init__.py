"""Simulation and Bayesian tracking of a dispersively monitored qubit."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    PLUS_X,
    PLUS_Z,
    MINUS_Z,
    Axis,
    BlochVector,
    Eigenstate,
    EnsembleDataset,
    MeasurementConfig,
    MeasurementRecord,
    PhysicalParams,
    Quadrature,
    TomographyOutcome,
    TrajectoryEstimate,
    TrueStateTrace,
    validate,
)
from .calibration import (  # noqa: E402
    calibrate,
    dephasing_rate,
    fit_eta,
    measurement_strength,
    nbar_from_stark,
    phase_per_photon,
    sigma_for_strength,
    strength_from_histograms,
)
from .simulator import (  # noqa: E402
    ExperimentPlan,
    herald,
    run_experiment,
    simulate_phi_record,
    simulate_record,
    simulate_z_record,
    tomography_pulse_and_readout,
)
from .bayes import (  # noqa: E402
    bayes_posterior,
    conditional_oracle,
    reversal_detector,
    sequential_equivalence_check,
    trajectory,
    update_phi,
    update_z,
)
from .tomography import (  # noqa: E402
    bin_records,
    compare,
    conditional_tomography,
    correlation_curves,
    reconstruct_trajectory,
)
