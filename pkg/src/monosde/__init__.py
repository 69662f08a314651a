"""Simulation, stochastic flows and Malliavin calculus for SDEs with monotone drift."""

from __future__ import annotations

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DivergenceError,
    MemoryBudgetError,
    ModelEvaluationError,
    MonoSdeError,
    PreconditionError,
    StepError,
)
from .model import AssumptionReport, SdeModel, deriv_apply, eval_diffusion, eval_drift, validate_assumptions
from .paths import (
    BrownianPath,
    CameronMartinDirection,
    TimeGrid,
    cameron_martin_check,
    doleans_exponential,
    sample_brownian,
    sample_ensemble,
    shift_path,
)
from .integrate import (
    LinearSdeCoefficients,
    StatePath,
    implicit_step,
    solve_linear_sde,
    solve_sde,
    strong_error_table,
)
from .variational import (
    DerivativeGrid,
    FlowMatrices,
    SecondOrderGrid,
    flow_matrices,
    flow_tol,
    fundamental_matrix,
    inverse_flow,
    jacobian_flow,
    malliavin_first,
    malliavin_second,
)
from .malliavin import (
    MalliavinMatrix,
    NormEstimate,
    covariance_spectrum,
    gateaux_quotient_test,
    kde_density,
    malliavin_matrix,
    moment_bound_report,
    sobolev_norm_estimate,
)
from .hormander import VectorFieldExpr, bracket_generate, hormander_rank, lie_bracket, stratonovich_drift
from .zoo import model_zoo
from .config import ExperimentConfig
from .experiments import RunManifest, run_experiment
