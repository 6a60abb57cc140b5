"""Iterated re-weighted least squares for the MED.

Starting from the unweighted fit, weights are recomputed from the
previous MED estimate and the model is refitted with those weights held
fixed, until successive MED estimates (or the mean responses at them)
stop changing.  Whenever the iteration cannot finish cleanly the
unweighted estimates are returned and the result is flagged as not
converged.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from robustmed.exceptions import NotEstimableError, RankDeficientError
from robustmed.fitting import Dataset, FitResult, GridBounds, default_bounds, fit_ols, fit_weighted
from robustmed.med import MedEstimate, MedRequest, information_matrix, med_from_theta, med_gradient, quadform_pinv
from robustmed.models import ModelKind, _shape
from robustmed.weights import WeightSpec, design_weights


class Criterion(str, enum.Enum):
    MED_RELATIVE = "a"
    RESPONSE_AT_MED = "b"


@dataclass(frozen=True)
class IrwlsConfig:
    weight: WeightSpec = field(default_factory=WeightSpec)
    tol: float = 0.001
    max_iter: int = 100
    criterion: Criterion = Criterion.MED_RELATIVE

    def __post_init__(self) -> None:
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        object.__setattr__(self, "criterion", Criterion(getattr(self.criterion, "value", self.criterion)))


def _med_or_none(kind: ModelKind, theta: np.ndarray, delta: float, d0: float) -> Optional[float]:
    try:
        m = med_from_theta(kind, theta, delta, d0)
    except (NotEstimableError, ValueError):
        return None
    return m if np.isfinite(m) and m > 0 else None


def irwls_fit(kind: ModelKind, data: Dataset, bounds: Optional[GridBounds] = None,
              request: MedRequest = MedRequest(0.4), config: IrwlsConfig = IrwlsConfig()):
    """Run IRWLS and return ``(fit, med_estimate)``.

    Iteration 1 is the unweighted fit; iteration ``i >= 2`` refits with
    weights evaluated at the MED of iteration ``i - 1``.  Convergence is
    tested from iteration 2 on.  Non-convergence, a non-positive or a
    not-estimable MED anywhere along the way returns the iteration-1
    estimates with ``converged=False``.
    """
    kind = ModelKind.parse(kind)
    bounds = default_bounds(kind, data.design) if bounds is None else bounds
    design = data.design
    d0 = design.placebo
    ols = fit_ols(kind, data, bounds)
    theta = ols.theta_vec
    med_old = _med_or_none(kind, theta, request.delta, d0)
    trace = [(theta.copy(), med_old)]

    def fallback(reason: str):
        out = replace(ols, converged=False, iterations=len(trace), trace=trace, method="irwls",
                      message=reason)
        est = MedEstimate(med_old_ols, "irwls", info={"converged": False, "reason": reason,
                                                      "iterations": len(trace)})
        return out, est

    med_old_ols = med_old
    if med_old is None:
        return fallback("MED not estimable at the unweighted fit")
    resp_old = float(theta[0] + theta[1] * _shape(kind, med_old, theta[2:]))

    for _ in range(2, config.max_iter + 1):
        w_dose = design_weights(config.weight, med_old, design)
        w_obs = w_dose[data.dose_index]
        try:
            fit = fit_weighted(kind, data, bounds, w_obs)
        except RankDeficientError:
            return fallback("weighted fit is rank deficient")
        theta = fit.theta_vec
        med_new = _med_or_none(kind, theta, request.delta, d0)
        trace.append((theta.copy(), med_new))
        if med_new is None:
            return fallback("MED not estimable or non-positive during iteration")
        if config.criterion is Criterion.MED_RELATIVE:
            change = ((med_new - med_old) / med_old) ** 2
        else:
            resp_new = float(theta[0] + theta[1] * _shape(kind, med_new, theta[2:]))
            change = ((resp_new - resp_old) / resp_old) ** 2 if resp_old != 0 else np.inf
            resp_old = resp_new
        med_old = med_new
        if change <= config.tol:
            out = replace(fit, converged=True, iterations=len(trace), trace=trace, method="irwls")
            return out, MedEstimate(med_new, "irwls", info={"converged": True, "iterations": len(trace)})
    return fallback("maximum number of iterations reached")


def irwls_med_ci(fit: FitResult, request: MedRequest, weight: WeightSpec,
                 design=None, rcond: float = float(np.sqrt(np.finfo(float).eps))) -> MedEstimate:
    """Interval ``MED_W +- u sigma_W / sqrt(n) sqrt(b^T M_W^- b)``.

    ``M_W`` weights each dose's information by the weight evaluated at the
    converged MED.  Only continuous weights and converged fits qualify.
    Small eigenvalues of ``M_W`` (relative to the largest, below
    ``rcond``) are dropped by the generalized inverse.
    """
    if not weight.continuous:
        raise ValueError("the IRWLS interval requires a continuous weight (w1-w6)")
    if not fit.converged:
        raise ValueError("the IRWLS interval requires a converged weighted fit")
    design = fit.design if design is None else design
    kind, theta = fit.kind, fit.theta_vec
    value = med_from_theta(kind, theta, request.delta, design.placebo)
    w = design_weights(weight, value, design)
    M = information_matrix(kind, theta, design, w)
    b = med_gradient(kind, theta, request.delta, design.placebo)[list(kind.free_index)]
    q = quadform_pinv(M, b, rcond=rcond, check_range=False)
    se = fit.sigma / np.sqrt(design.n) * np.sqrt(q)
    half = request.z_ci * se
    return MedEstimate(value, "irwls", lower=max(value - half, 0.0), upper=value + half, se=float(se))
