"""Post-Markovian master equation tomography for a single qubit.

Typical flow: ``simulate_dataset`` (or ``load_dataset``) -> ``reconstruct_series``
-> ``fit_model`` / ``aic_rank`` -> ``validate_predictions`` and ``n_measure_model``.
"""
from .qstate import (
    BlochVector,
    DensityMatrix,
    StateError,
    bloch_to_density,
    density_to_bloch,
    purity,
    trace_distance,
)
from .model import (
    DampingBasis,
    KernelSpec,
    ModelParams,
    ParameterError,
    damping_basis,
    kernel_laplace,
    kernel_time,
    lindblad_generator_matrix,
)
from .solver import (
    ChoiReport,
    Propagator,
    PropagatorError,
    build_propagator,
    choi_check,
    propagate,
    reference_integrate,
    trajectory,
)
from .experiment import (
    TABLE_I,
    DatasetError,
    PreparationSet,
    ReadoutModel,
    TomographyDataset,
    TomographyRecord,
    load_dataset,
    save_dataset,
    simulate_dataset,
)
from .recon import BlochSeries, bayes_unfold, bootstrap_sigma, mle_bloch, reconstruct_series
from .fit import FitConfig, FitResult, aic_rank, chi_squared, fit_model, fit_nested, validate_predictions
from .nonmark import DistanceSeries, NonMarkovReport, distance_series, n_measure, n_measure_model, sigma_series

__version__ = "0.1.0"
