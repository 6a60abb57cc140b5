"""Robust-regression (M-estimation) MED estimator.

The estimator solves the weighted score equations

    sum_ij (Y_ij - mu(d_i, theta)) * w(d_i, MED(theta)) * dmu/dtheta = 0

by damped Newton-Raphson started at the unweighted least squares fit.
The weights depend on ``theta`` through the MED, so the Jacobian is
taken by central differences of the summed score.  Inference uses the
sandwich covariance ``A^-1 V A^-T`` and the delta method for the MED.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from robustmed.exceptions import (
    DomainError,
    NotEstimableError,
    OutOfRegionError,
    SingularInformationError,
)
from robustmed.fitting import Dataset, FitResult, GridBounds, Theta, default_bounds, fit_ols, unweighted_rss
from robustmed.med import MedEstimate, MedRequest, med_from_theta, med_gradient
from robustmed.models import DoseDesign, ModelKind, _mean_gradient, _shape, validate_gamma
from robustmed.weights import WeightSpec, design_weights

SCORE_TOL = 1e-8
STEP_TOL = 1e-10
MAX_HALVINGS = 10
FD_STEP = 1e-6


@dataclass(frozen=True)
class ScoreFunction:
    kind: ModelKind
    weight: WeightSpec
    request: MedRequest
    design: DoseDesign

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ModelKind.parse(self.kind))
        if not self.weight.continuous:
            raise ValueError("robust regression needs a continuous weight (w1-w6 or unit)")

    def dose_weights(self, theta: NDArray[np.float64]) -> tuple[NDArray[np.float64], float]:
        """Per-dose weights at ``theta`` and the MED they are centred on."""
        try:
            validate_gamma(self.kind, theta[2:])
            med = med_from_theta(self.kind, theta, self.request.delta, self.design.placebo)
        except (NotEstimableError, DomainError) as exc:
            raise OutOfRegionError(f"weight undefined at theta={theta.tolist()}: {exc}") from None
        if not np.isfinite(med) or med <= 0:
            raise OutOfRegionError(f"non-positive MED {med} at theta={theta.tolist()}")
        return design_weights(self.weight, med, self.design), med


@dataclass
class SandwichCov:
    a_matrix: NDArray[np.float64]
    v_matrix: NDArray[np.float64]
    covariance: NDArray[np.float64]
    condition: float
    variant: str = "full"


def score_eval(sf: ScoreFunction, y: float, d: float, theta) -> NDArray[np.float64]:
    """Score contribution of a single observation ``(d, y)``.

    Returns the vector over the free parameters of the model.
    """
    theta = np.asarray(theta.to_array() if isinstance(theta, Theta) else theta, dtype=np.float64)
    w_dose, med = sf.dose_weights(theta)
    doses = sf.design.dose_array
    hits = np.flatnonzero(doses == d)
    if hits.size:
        w = float(w_dose[hits[0]])
    else:
        from robustmed.weights import compute_weight
        w = float(compute_weight(sf.weight, d, med, sf.design))
    h = _mean_gradient(sf.kind, theta, np.asarray(d, dtype=np.float64))[list(sf.kind.free_index)]
    mu = theta[0] + theta[1] * float(_shape(sf.kind, d, theta[2:]))
    return (y - mu) * w * h


class _Problem:
    """Summed score and its ingredients for one dataset."""

    def __init__(self, sf: ScoreFunction, data: Dataset):
        self.sf = sf
        self.kind = sf.kind
        self.free = list(sf.kind.free_index)
        self.n_i, self.ybar, self.within = data.group_stats()
        self.doses = data.design.dose_array
        self.n = data.n

    def parts(self, theta: NDArray[np.float64]):
        w, med = self.sf.dose_weights(theta)
        h = _mean_gradient(self.kind, theta, self.doses)[:, self.free]
        mu = theta[0] + theta[1] * _shape(self.kind, self.doses, theta[2:])
        return w, h, self.ybar - mu, med

    def score(self, theta: NDArray[np.float64]) -> NDArray[np.float64]:
        w, h, resid, _ = self.parts(theta)
        return (self.n_i * w * resid) @ h

    def jacobian(self, theta: NDArray[np.float64]) -> NDArray[np.float64]:
        """Central-difference Jacobian of the summed score over the free parameters."""
        p = len(self.free)
        J = np.empty((p, p))
        for col, j in enumerate(self.free):
            step = FD_STEP * max(abs(theta[j]), 0.1)
            up, dn = theta.copy(), theta.copy()
            up[j] += step
            dn[j] -= step
            J[:, col] = (self.score(up) - self.score(dn)) / (2.0 * step)
        return J

    def expected_jacobian(self, theta: NDArray[np.float64]) -> NDArray[np.float64]:
        w, h, _, _ = self.parts(theta)
        return -(h * (self.n_i * w)[:, None]).T @ h

    def meat(self, theta: NDArray[np.float64]) -> NDArray[np.float64]:
        w, h, resid, _ = self.parts(theta)
        r2 = self.within + self.n_i * resid * resid
        return (h * (w * w * r2)[:, None]).T @ h


def sandwich_cov(kind: ModelKind, data: Dataset, theta_hat, weight: WeightSpec, request: MedRequest,
                 variant: str = "full") -> SandwichCov:
    """Empirical sandwich covariance of the robust-regression estimator.

    ``variant="full"`` differentiates the complete score, including the
    residual-times-weight-derivative term; ``variant="expected"`` keeps
    only ``-w h h^T``, the expectation under a correctly specified model.

    Raises
    ------
    SingularInformationError
        When the bread matrix is numerically singular.
    """
    kind = ModelKind.parse(kind)
    theta = np.asarray(theta_hat.to_array() if isinstance(theta_hat, Theta) else theta_hat, dtype=np.float64)
    prob = _Problem(ScoreFunction(kind, weight, request, data.design), data)
    n = data.n
    if variant == "full":
        A = prob.jacobian(theta) / n
    elif variant == "expected":
        A = prob.expected_jacobian(theta) / n
    else:
        raise ValueError(f"unknown sandwich variant {variant!r}")
    V = prob.meat(theta) / n
    V = 0.5 * (V + V.T)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(V))):
        raise SingularInformationError("non-finite sandwich ingredients")
    cond = float(np.linalg.cond(A))
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularInformationError(f"bread matrix is singular (condition number {cond:.3g})")
    A_inv = np.linalg.inv(A)
    cov = A_inv @ V @ A_inv.T
    cov = 0.5 * (cov + cov.T)
    return SandwichCov(A, V, cov, cond, variant)


def rr_fit(kind: ModelKind, data: Dataset, bounds: Optional[GridBounds] = None,
           request: MedRequest = MedRequest(0.4), weight: WeightSpec = WeightSpec(),
           max_iter: int = 100, variant: str = "full", enforce_bounds: bool = False):
    """Solve the weighted score equations by damped Newton-Raphson.

    The admissible region requires an estimable positive MED; steps leaving
    it are halved.  With ``enforce_bounds`` the nonlinear parameters are
    projected onto ``bounds`` and coordinates held at a bound by an
    outward-pointing score are dropped from the Newton system.
    Returns ``(fit, cov)``.  ``cov`` is ``None`` when the fit did not
    converge or the sandwich could not be formed.  On any failure the
    unweighted least squares estimates are returned with
    ``converged=False``.
    """
    kind = ModelKind.parse(kind)
    bounds = default_bounds(kind, data.design) if bounds is None else bounds
    ols = fit_ols(kind, data, bounds)
    sf = ScoreFunction(kind, weight, request, data.design)
    prob = _Problem(sf, data)
    free = prob.free
    theta = ols.theta_vec.copy()
    lo, hi = np.asarray(bounds.lower), np.asarray(bounds.upper)
    if not enforce_bounds:
        lo, hi = np.full(lo.shape, -np.inf), np.full(hi.shape, np.inf)
    trace: list = []

    def finish(theta_out, converged: bool, reason: str = ""):
        try:
            w_dose, med = sf.dose_weights(theta_out)
        except OutOfRegionError:
            w_dose, med = np.ones(len(data.design.doses)), None
        w_obs = w_dose[data.dose_index]
        mu = theta_out[0] + theta_out[1] * _shape(kind, data.doses, theta_out[2:])
        r = data.response - mu
        rss = unweighted_rss(kind, data, theta_out)
        fit = FitResult(
            kind=kind, theta=Theta.from_array(theta_out),
            sigma=float(np.sqrt(rss / max(data.n - kind.n_free, 1))),
            sse=float(np.sum(w_obs * r * r)), rss=rss, weights_used=w_obs, n=data.n,
            design=data.design, converged=converged, iterations=len(trace), trace=trace, method="rr",
        )
        cov = None
        if converged:
            try:
                cov = sandwich_cov(kind, data, theta_out, weight, request, variant)
            except SingularInformationError as exc:
                reason = str(exc)
        fit.trace = trace
        fit.message = reason
        return fit, cov, reason

    def fallback(reason: str):
        fit, _, _ = finish(ols.theta_vec, False)
        fit.sse, fit.rss, fit.sigma = ols.sse, ols.rss, ols.sigma
        fit.weights_used = ols.weights_used
        fit.message = reason
        return fit, None

    gpos = [free.index(j) for j in range(2, 2 + kind.arity) if j in free]

    def released(th: NDArray[np.float64], P: NDArray[np.float64]) -> NDArray[np.bool_]:
        # coordinates pinned at a bound whose score pushes further outward drop out
        keep = np.ones(len(free), dtype=bool)
        for k, pos in enumerate(gpos):
            g = th[free[pos]]
            if (g >= hi[k] and P[pos] > 0) or (g <= lo[k] and P[pos] < 0):
                keep[pos] = False
        return keep

    def merit(th, P) -> float:
        return float(np.linalg.norm(P[released(th, P)]))

    try:
        P = prob.score(theta)
    except OutOfRegionError:
        return fallback("MED not estimable at the unweighted fit")
    trace.append((theta.copy(), sf.dose_weights(theta)[1]))
    tol = SCORE_TOL * data.n

    for _ in range(max_iter):
        keep = released(theta, P)
        if np.max(np.abs(P[keep]), initial=0.0) <= tol:
            fit, cov, _ = finish(theta, True)
            return fit, cov
        try:
            J = prob.jacobian(theta)
            step = np.zeros(len(free))
            step[keep] = np.linalg.solve(J[np.ix_(keep, keep)], P[keep])
        except (OutOfRegionError, np.linalg.LinAlgError):
            return fallback("singular or undefined Jacobian")
        if not np.all(np.isfinite(step)):
            return fallback("non-finite Newton step")
        norm_p = merit(theta, P)
        scale = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = theta.copy()
            cand[free] -= scale * step
            cand[2:2 + len(lo)] = np.clip(cand[2:2 + len(lo)], lo, hi)
            try:
                P_cand = prob.score(cand)
            except OutOfRegionError:
                P_cand = None
            if P_cand is not None and np.all(np.isfinite(P_cand)) and merit(cand, P_cand) < norm_p:
                break
            scale *= 0.5
        else:
            return fallback("step halving exhausted")
        moved = float(np.linalg.norm(cand - theta))
        theta, P = cand, P_cand
        trace.append((theta.copy(), sf.dose_weights(theta)[1]))
        if moved <= STEP_TOL:
            fit, cov, _ = finish(theta, True)
            return fit, cov
    if np.max(np.abs(P[released(theta, P)]), initial=0.0) <= tol:
        fit, cov, _ = finish(theta, True)
        return fit, cov
    return fallback("maximum number of Newton iterations reached")


def rr_med_ci(theta_hat, cov: SandwichCov, request: MedRequest, n: int, kind: ModelKind,
              d0: float = 0.0) -> MedEstimate:
    """Delta-method interval from the sandwich covariance."""
    kind = ModelKind.parse(kind)
    theta = np.asarray(theta_hat.to_array() if isinstance(theta_hat, Theta) else theta_hat, dtype=np.float64)
    value = med_from_theta(kind, theta, request.delta, d0)
    grad = med_gradient(kind, theta, request.delta, d0)[list(kind.free_index)]
    var = float(grad @ cov.covariance @ grad) / n
    se = float(np.sqrt(max(var, 0.0)))
    half = request.z_ci * se
    return MedEstimate(value, "rr", lower=max(value - half, 0.0), upper=value + half, se=se)
