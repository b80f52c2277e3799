"""Randomized saturation experiments: simulation, exact design moments, and
spillover-robust IV estimation under one-sided non-compliance."""

from .design import DesignDiagnostics, SaturationDesign, assign_offers, sample_saturations, validate_design
from .dgp import ExperimentData, GroupData, SimConfig, oracle_subpopulation_means, simulate_experiment
from .effects import EffectCurve, effect_curve
from .errors import SingularSystemError, UnidentifiedEffectError, ValidationError
from .estimator import (
    EstimateResult,
    IORTestResult,
    complier_theta,
    estimate_all,
    estimate_chat,
    ingest_csv,
    ior_test,
    naive_iv,
    rsiv_complier_theta,
    rsiv_estimate,
    rsiv_pure_control,
)
from .model import (
    BasisSpec,
    Coefficients,
    MeanCoefficients,
    basis_by_name,
    direct_effect,
    indirect_effect,
    linear_basis,
    potential_outcome,
    quadratic_basis,
)
from .moments import (
    MomentMatrices,
    block_inverse,
    pseudo_inverse,
    q_exact,
    q_extended,
    q_linear_closed_form,
)
from .montecarlo import MCReport, MCRow, run_mc

__version__ = "0.1.0"

__all__ = [
    "BasisSpec",
    "Coefficients",
    "DesignDiagnostics",
    "EffectCurve",
    "EstimateResult",
    "ExperimentData",
    "GroupData",
    "IORTestResult",
    "MCReport",
    "MCRow",
    "MeanCoefficients",
    "MomentMatrices",
    "SaturationDesign",
    "SimConfig",
    "SingularSystemError",
    "UnidentifiedEffectError",
    "ValidationError",
    "assign_offers",
    "basis_by_name",
    "block_inverse",
    "complier_theta",
    "direct_effect",
    "effect_curve",
    "estimate_all",
    "estimate_chat",
    "indirect_effect",
    "ingest_csv",
    "ior_test",
    "linear_basis",
    "naive_iv",
    "oracle_subpopulation_means",
    "potential_outcome",
    "pseudo_inverse",
    "q_exact",
    "q_extended",
    "q_linear_closed_form",
    "quadratic_basis",
    "rsiv_complier_theta",
    "rsiv_estimate",
    "rsiv_pure_control",
    "run_mc",
    "sample_saturations",
    "simulate_experiment",
    "validate_design",
]
