"""Minimum effective dose estimation with MED-centred weighted regression."""

from __future__ import annotations

__version__ = "0.1.0"

from robustmed.exceptions import (
    BootstrapError,
    DomainError,
    NoSolutionError,
    NotEstimableError,
    OutOfRegionError,
    ProfilingError,
    RankDeficientError,
    RobustMedError,
    SingularInformationError,
)
from robustmed.fitting import Dataset, FitResult, GridBounds, default_bounds, fit_ols, fit_weighted, refine_bounds
from robustmed.intervals import (
    BootstrapConfig,
    EffectCurveBand,
    invert_band_for_med,
    percentile_bootstrap_band,
    profile_likelihood_band,
)
from robustmed.irwls import Criterion, IrwlsConfig, irwls_fit, irwls_med_ci
from robustmed.mcpmod import Candidate, CandidateSet, PocResult, mcpmod_med, optimal_contrasts, poc_test
from robustmed.med import (
    MedEstimate,
    MedRequest,
    classical_med_ci,
    med_estimator_with_screen,
    med_from_theta,
    med_gradient,
)
from robustmed.models import DoseDesign, ModelKind, Theta, eval_mean, inverse_shape, mean_gradient, standardized_shape
from robustmed.robust import SandwichCov, ScoreFunction, rr_fit, rr_med_ci, sandwich_cov, score_eval
from robustmed.simlab import SimScenario, SimSummary, generate_dataset, run_coverage_study, run_estimation_study
from robustmed.weights import WeightSpec, WeightTag, compute_weight, design_weights

__all__ = [name for name in dir() if not name.startswith("_")]
