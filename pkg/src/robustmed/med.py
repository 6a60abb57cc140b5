"""Minimum effective dose: point estimators and the delta-method interval."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.stats import norm

from robustmed.exceptions import NotEstimableError, SingularInformationError
from robustmed.fitting import FitResult
from robustmed.models import (
    DoseDesign,
    ModelKind,
    ThetaLike,
    _mean_gradient,
    _shape,
    _shape_ddose,
    _shape_dgamma,
    as_vector,
    inverse_shape,
)


@dataclass(frozen=True)
class MedRequest:
    """Target effect and error levels.

    ``alpha`` is the one-sided level of the lower limit used by the
    screening estimator (a ``1 - 2 alpha`` two-sided limit) and ``level``
    the two-sided coverage of reported intervals.
    """

    delta: float
    alpha: float = 0.025
    level: float = 0.95

    def __post_init__(self) -> None:
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if not 0.0 < self.alpha < 0.5:
            raise ValueError(f"alpha must lie in (0, 0.5), got {self.alpha}")
        if not 0.0 < self.level < 1.0:
            raise ValueError(f"level must lie in (0, 1), got {self.level}")

    @property
    def z_ci(self) -> float:
        return float(norm.ppf(0.5 + self.level / 2.0))

    @property
    def z_screen(self) -> float:
        return float(norm.ppf(1.0 - self.alpha))


@dataclass
class MedEstimate:
    """MED point estimate with optional interval; ``None`` marks not-estimable."""

    value: Optional[float]
    method: str
    lower: Optional[float] = None
    upper: Optional[float] = None
    se: Optional[float] = None
    info: dict = field(default_factory=dict)

    @property
    def estimable(self) -> bool:
        return self.value is not None

    def covers(self, truth: float) -> bool:
        """Whether the interval contains ``truth``.

        A missing side is read as open (``0`` below, ``inf`` above); an
        interval with both sides missing covers nothing.
        """
        if self.lower is None and self.upper is None:
            return False
        lo = 0.0 if self.lower is None else self.lower
        hi = np.inf if self.upper is None else self.upper
        return bool(lo <= truth <= hi)

    def to_dict(self) -> dict:
        out = {"value": self.value, "lower": self.lower, "upper": self.upper,
               "se": self.se, "method": self.method}
        out.update({k: v for k, v in self.info.items() if isinstance(v, (int, float, str, bool, type(None)))})
        return out


def med_from_theta(kind: ModelKind, theta: ThetaLike, delta: float, d0: float = 0.0) -> float:
    """Dose at which the mean exceeds the mean at ``d0`` by exactly ``delta``.

    Raises
    ------
    NotEstimableError
        If the slope is not positive or ``delta / beta`` exceeds the range
        of the shape.
    """
    kind = ModelKind.parse(kind)
    vec = as_vector(kind, theta)
    beta = vec[1]
    if not beta > 0:
        raise NotEstimableError(f"slope must be positive for an MED, got {beta:.6g}")
    u = float(_shape(kind, d0, vec[2:])) + delta / beta
    return inverse_shape(kind, vec[2:], u)


def med_gradient_fd(kind: ModelKind, theta: ThetaLike, delta: float, d0: float = 0.0,
                    step: float = 1e-6) -> NDArray[np.float64]:
    """Central finite-difference gradient of the MED map."""
    kind = ModelKind.parse(kind)
    vec = as_vector(kind, theta)
    grad = np.zeros(vec.size)
    for j in range(vec.size):
        h = step * max(abs(vec[j]), 1.0)
        up, dn = vec.copy(), vec.copy()
        up[j] += h
        dn[j] -= h
        grad[j] = (med_from_theta(kind, up, delta, d0) - med_from_theta(kind, dn, delta, d0)) / (2 * h)
    return grad


def med_gradient(kind: ModelKind, theta: ThetaLike, delta: float, d0: float = 0.0) -> NDArray[np.float64]:
    """Gradient of ``MED(theta)`` with respect to ``[alpha, beta, *gamma]``.

    Differentiates the identity ``x(MED) = x(d0) + delta / beta``
    implicitly; falls back to central differences where the shape is flat
    at the MED.
    """
    kind = ModelKind.parse(kind)
    vec = as_vector(kind, theta)
    m = med_from_theta(kind, vec, delta, d0)
    gamma = vec[2:]
    slope = float(_shape_ddose(kind, m, gamma))
    if not np.isfinite(slope) or slope <= 1e-12:
        return med_gradient_fd(kind, vec, delta, d0)
    grad = np.zeros(vec.size)
    grad[1] = -delta / vec[1] ** 2 / slope
    at_m = _shape_dgamma(kind, m, gamma)
    at_0 = _shape_dgamma(kind, d0, gamma)
    for j in range(kind.arity):
        grad[2 + j] = (float(at_0[j]) - float(at_m[j])) / slope
    return grad


# ---------------------------------------------------------------------------
# Information matrices
# ---------------------------------------------------------------------------

def information_matrix(kind: ModelKind, theta: NDArray[np.float64], design: DoseDesign,
                       dose_weights: Optional[NDArray[np.float64]] = None) -> NDArray[np.float64]:
    """``sum_j (n_j / n) w_j g_j g_j^T`` over the free parameters."""
    g = _mean_gradient(kind, theta, design.dose_array)[:, list(kind.free_index)]
    w = design.fractions if dose_weights is None else design.fractions * dose_weights
    return (g * w[:, None]).T @ g


def quadform_pinv(M: NDArray[np.float64], b: NDArray[np.float64], rcond: float = 1e-10,
                  check_range: bool = True) -> float:
    """``b^T M^- b`` with a symmetric pseudo-inverse.

    Eigenvalues below ``rcond * max_eigenvalue`` are discarded.  With
    ``check_range`` a :class:`SingularInformationError` is raised when
    ``M`` is rank-deficient and ``b`` has a component outside its range.
    """
    M = 0.5 * (M + M.T)
    if not np.all(np.isfinite(M)) or not np.all(np.isfinite(b)):
        raise SingularInformationError("non-finite information matrix or gradient")
    vals, vecs = np.linalg.eigh(M)
    top = vals.max(initial=0.0)
    if top <= 0:
        raise SingularInformationError("information matrix is zero")
    keep = vals > rcond * top
    coef = vecs.T @ b
    if check_range and not np.all(keep):
        lost = np.linalg.norm(coef[~keep])
        if lost > 1e-6 * max(np.linalg.norm(b), 1e-300):
            raise SingularInformationError("information matrix is singular and the MED gradient leaves its range")
    return float(np.sum(coef[keep] ** 2 / vals[keep]))


def _clamped(value: float, half: float, method: str, se: float, **info) -> MedEstimate:
    return MedEstimate(value=value, method=method, lower=max(value - half, 0.0), upper=value + half,
                       se=se, info=dict(info))


# ---------------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------------

def mean_covariance(fit: FitResult) -> NDArray[np.float64]:
    """Asymptotic covariance ``sigma^2 (sum n_i g_i g_i^T)^-`` of the free parameters."""
    M = information_matrix(fit.kind, fit.theta_vec, fit.design) * fit.design.n
    return fit.sigma ** 2 * np.linalg.pinv(M, rcond=1e-12, hermitian=True)


def med_estimator_with_screen(fit: FitResult, request: MedRequest,
                              dose_grid: Optional[ArrayLike] = None,
                              grid_points: int = 1001) -> MedEstimate:
    """Smallest grid dose whose fitted effect exceeds ``delta`` and whose mean
    is significantly above the placebo mean.

    The significance screen uses the pointwise Wald lower limit
    ``mu(d) - z_{1-alpha} se(mu(d))``.
    """
    kind, theta, design = fit.kind, fit.theta_vec, fit.design
    d0 = design.placebo
    grid = (np.linspace(d0, design.d_max, grid_points) if dose_grid is None
            else np.asarray(dose_grid, dtype=np.float64))
    grid = grid[grid > d0]
    x = _shape(kind, grid, theta[2:])
    x0 = float(_shape(kind, d0, theta[2:]))
    mu = theta[0] + theta[1] * x
    mu0 = theta[0] + theta[1] * x0
    if not theta[1] > 0:
        return MedEstimate(None, "classical", info={"reason": "non-positive slope"})
    g = _mean_gradient(kind, theta, grid)[:, list(kind.free_index)]
    cov = mean_covariance(fit)
    se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", g, cov, g), 0.0))
    lower = mu - request.z_screen * se
    ok = (mu > mu0 + request.delta) & (lower > mu0)
    if not np.any(ok):
        return MedEstimate(None, "classical", info={"reason": "no grid dose passes the screen"})
    return MedEstimate(float(grid[np.argmax(ok)]), "classical")


def classical_med_ci(fit: FitResult, request: MedRequest, design: Optional[DoseDesign] = None) -> MedEstimate:
    """Delta-method interval ``MED(theta) +- u sigma / sqrt(n) sqrt(b^T M^- b)``."""
    design = fit.design if design is None else design
    kind, theta = fit.kind, fit.theta_vec
    try:
        value = med_from_theta(kind, theta, request.delta, design.placebo)
    except NotEstimableError as exc:
        return MedEstimate(None, "classical", info={"reason": str(exc)})
    b = med_gradient(kind, theta, request.delta, design.placebo)[list(kind.free_index)]
    M = information_matrix(kind, theta, design)
    q = quadform_pinv(M, b)
    se = fit.sigma / np.sqrt(design.n) * np.sqrt(q)
    return _clamped(value, request.z_ci * se, "classical", float(se))
