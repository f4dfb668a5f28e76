"""Filtering and retrodictive smoothing for continuously monitored qubits."""

from .channels import CPMap, DimMismatchError, adjoint_apply, apply, compose, petz_recover
from .classical import ConditionalKernel
from .dynamics import (
    InvalidParamsError,
    MeasurementRecord,
    ModelParams,
    StepOperators,
    build_step_operators,
    filter_trajectory,
    sample_step,
    unconditional_series,
    unconditional_step,
)
from .ensemble import EnsembleSpec, criterion2_enumerate, run_ensemble
from .qmath import NotPSDError, ZeroTraceError, hermitian_sqrt, min_eigenvalue, pinv_sqrt, purity
from .smoothing import (
    DegenerateWeightsError,
    SmoothingResult,
    gw_enumerate,
    gw_smooth,
    petz_fuchs,
    petz_fuchs_recursive,
    retrofilter,
    smooth_trajectory,
    swv_state,
    symmetrized_product,
)

__version__ = "0.1.0"
