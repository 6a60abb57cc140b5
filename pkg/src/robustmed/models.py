"""Dose-response model families.

Every family is written as ``mu(d) = alpha + beta * x(d)`` where the
standardized shape ``x`` depends only on the nonlinear parameters
``gamma``.  Shapes, their inverses and their derivatives are vectorized
over dose and, where the fitting code needs it, over ``gamma`` as well
(each component of ``gamma`` may be an array that broadcasts against
the dose array).

Parameter vectors are laid out as ``[alpha, beta, *gamma]`` throughout
the package.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import brentq

from robustmed.exceptions import DomainError, NoSolutionError


class ModelKind(str, enum.Enum):
    LINEAR = "linear"
    LINLOG = "linlog"
    EMAX = "emax"
    EXPONENTIAL = "exponential"
    QUADRATIC = "quadratic"
    SIGEMAX = "sigemax"
    POWER = "power"
    TRUNC_LOGISTIC = "trunclogistic"

    @classmethod
    def parse(cls, value: Union[str, "ModelKind"]) -> "ModelKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "").replace("-", "")
        aliases = {"sigmoidemax": "sigemax", "logistic": "trunclogistic", "tlog": "trunclogistic",
                   "exp": "exponential", "quad": "quadratic", "loglinear": "linlog"}
        key = aliases.get(key, key)
        for kind in cls:
            if kind.value == key:
                return kind
        raise ValueError(f"unknown model kind {value!r}; expected one of {[k.value for k in cls]}")

    @property
    def gamma_names(self) -> tuple[str, ...]:
        return _GAMMA_NAMES[self]

    @property
    def arity(self) -> int:
        return len(_GAMMA_NAMES[self])

    @property
    def n_params(self) -> int:
        return 2 + self.arity

    @property
    def param_names(self) -> tuple[str, ...]:
        return ("alpha", "beta") + _GAMMA_NAMES[self]

    @property
    def free_index(self) -> tuple[int, ...]:
        """Indices of the parameters that are estimated from data.

        The log-linear offset is conventionally fixed, so only the
        intercept and slope of that family are free.
        """
        if self is ModelKind.LINLOG:
            return (0, 1)
        return tuple(range(self.n_params))

    @property
    def n_free(self) -> int:
        return len(self.free_index)

    @property
    def monotone(self) -> bool:
        return self is not ModelKind.QUADRATIC


_GAMMA_NAMES: dict[ModelKind, tuple[str, ...]] = {
    ModelKind.LINEAR: (),
    ModelKind.LINLOG: ("c",),
    ModelKind.EMAX: ("ed50",),
    ModelKind.EXPONENTIAL: ("delta",),
    ModelKind.QUADRATIC: ("q",),
    ModelKind.SIGEMAX: ("ed50", "h"),
    ModelKind.POWER: ("p",),
    ModelKind.TRUNC_LOGISTIC: ("s", "m"),
}


@dataclass(frozen=True)
class Theta:
    """Intercept, slope and nonlinear shape parameters of one model."""

    alpha: float
    beta: float
    gamma: tuple[float, ...] = ()

    def to_array(self) -> NDArray[np.float64]:
        return np.array([self.alpha, self.beta, *self.gamma], dtype=np.float64)

    @classmethod
    def from_array(cls, values: ArrayLike) -> "Theta":
        arr = np.asarray(values, dtype=np.float64).ravel()
        return cls(float(arr[0]), float(arr[1]), tuple(float(g) for g in arr[2:]))

    def as_dict(self, kind: ModelKind) -> dict[str, float]:
        return dict(zip(kind.param_names, self.to_array().tolist()))


ThetaLike = Union[Theta, Sequence[float], NDArray[np.float64]]


def as_vector(kind: ModelKind, theta: ThetaLike, *, check: bool = True) -> NDArray[np.float64]:
    """Return ``theta`` as a float array ``[alpha, beta, *gamma]``."""
    vec = theta.to_array() if isinstance(theta, Theta) else np.asarray(theta, dtype=np.float64).ravel()
    if vec.size != kind.n_params:
        raise DomainError(f"{kind.value} expects {kind.n_params} parameters, got {vec.size}")
    if check:
        validate_gamma(kind, vec[2:])
    return vec


def validate_gamma(kind: ModelKind, gamma: Sequence[float]) -> None:
    g = np.asarray(gamma, dtype=np.float64).ravel()
    if g.size != kind.arity:
        raise DomainError(f"{kind.value} expects {kind.arity} nonlinear parameters, got {g.size}")
    if not np.all(np.isfinite(g)):
        raise DomainError(f"non-finite nonlinear parameter for {kind.value}: {g.tolist()}")
    if kind in (ModelKind.LINLOG, ModelKind.EMAX, ModelKind.EXPONENTIAL, ModelKind.POWER):
        if g[0] <= 0:
            raise DomainError(f"{kind.value} requires {kind.gamma_names[0]} > 0, got {g[0]}")
    elif kind is ModelKind.SIGEMAX:
        if g[0] <= 0 or g[1] <= 0:
            raise DomainError(f"sigemax requires ed50 > 0 and h > 0, got {g.tolist()}")
    elif kind is ModelKind.QUADRATIC:
        # The shape is only defined for a negative curvature ratio.
        if g[0] >= 0:
            raise DomainError(f"quadratic requires q < 0, got {g[0]}")
    elif kind is ModelKind.TRUNC_LOGISTIC:
        if g[0] <= 0:
            raise DomainError(f"trunclogistic requires steepness s > 0, got {g[0]}")


@dataclass(frozen=True)
class DoseDesign:
    """Parallel-group design: ascending doses and per-dose patient counts."""

    doses: tuple[float, ...]
    allocations: tuple[int, ...]

    def __post_init__(self) -> None:
        doses = tuple(float(d) for d in self.doses)
        allocs = tuple(int(a) for a in self.allocations)
        object.__setattr__(self, "doses", doses)
        object.__setattr__(self, "allocations", allocs)
        if len(doses) < 2:
            raise ValueError("a design needs at least two doses")
        if len(doses) != len(allocs):
            raise ValueError("doses and allocations differ in length")
        if any(b <= a for a, b in zip(doses, doses[1:])):
            raise ValueError(f"doses must be strictly increasing, got {doses}")
        if doses[0] < 0:
            raise ValueError("doses must be nonnegative")
        if any(a <= 0 for a in allocs):
            raise ValueError(f"allocations must be positive, got {allocs}")

    @classmethod
    def balanced(cls, doses: Sequence[float], n_per_group: int) -> "DoseDesign":
        return cls(tuple(doses), tuple([int(n_per_group)] * len(doses)))

    @property
    def dose_array(self) -> NDArray[np.float64]:
        return np.asarray(self.doses, dtype=np.float64)

    @property
    def n_array(self) -> NDArray[np.float64]:
        return np.asarray(self.allocations, dtype=np.float64)

    @property
    def n(self) -> int:
        return int(sum(self.allocations))

    @property
    def fractions(self) -> NDArray[np.float64]:
        return self.n_array / self.n

    @property
    def placebo(self) -> float:
        return self.doses[0]

    @property
    def d_max(self) -> float:
        return self.doses[-1]

    @property
    def active_doses(self) -> NDArray[np.float64]:
        return self.dose_array[1:]


# ---------------------------------------------------------------------------
# Shapes (no validation; callers validate once)
# ---------------------------------------------------------------------------

def _shape(kind: ModelKind, d, gamma) -> NDArray[np.float64]:
    d = np.asarray(d, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if kind is ModelKind.LINEAR:
            return d * 1.0
        if kind is ModelKind.LINLOG:
            return np.log(d + gamma[0])
        if kind is ModelKind.EMAX:
            return d / (gamma[0] + d)
        if kind is ModelKind.EXPONENTIAL:
            return np.expm1(d / gamma[0])
        if kind is ModelKind.QUADRATIC:
            return d + gamma[0] * d * d
        if kind is ModelKind.SIGEMAX:
            dh = d ** gamma[1]
            return dh / (gamma[0] ** gamma[1] + dh)
        if kind is ModelKind.POWER:
            return d ** gamma[0]
        if kind is ModelKind.TRUNC_LOGISTIC:
            return 1.0 / (1.0 + np.exp(gamma[0] * (gamma[1] - d)))
    raise ValueError(kind)


def _log_ratio(d, e):
    # log(d / e) with the d == 0 limit mapped to 0; the multiplying factor vanishes there
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(d) - np.log(e)
    return np.where(np.asarray(d) > 0, out, 0.0)


def _shape_dgamma(kind: ModelKind, d, gamma) -> list[NDArray[np.float64]]:
    """Partial derivatives of the shape with respect to each gamma component."""
    d = np.asarray(d, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if kind is ModelKind.LINEAR:
            return []
        if kind is ModelKind.LINLOG:
            return [1.0 / (d + gamma[0])]
        if kind is ModelKind.EMAX:
            return [-d / (gamma[0] + d) ** 2]
        if kind is ModelKind.EXPONENTIAL:
            return [-d / gamma[0] ** 2 * np.exp(d / gamma[0])]
        if kind is ModelKind.QUADRATIC:
            return [d * d + 0.0 * gamma[0]]
        if kind is ModelKind.SIGEMAX:
            e, h = gamma[0], gamma[1]
            x = _shape(kind, d, gamma)
            one_minus = 1.0 - x
            return [-h / e * x * one_minus, x * one_minus * _log_ratio(d, e)]
        if kind is ModelKind.POWER:
            return [np.where(d > 0, d ** gamma[0] * np.log(np.where(d > 0, d, 1.0)), 0.0)]
        if kind is ModelKind.TRUNC_LOGISTIC:
            s, m = gamma[0], gamma[1]
            x = _shape(kind, d, gamma)
            xx = x * (1.0 - x)
            return [-xx * (m - d), -xx * s]
    raise ValueError(kind)


def _shape_ddose(kind: ModelKind, d, gamma) -> NDArray[np.float64]:
    d = np.asarray(d, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if kind is ModelKind.LINEAR:
            return np.ones_like(d)
        if kind is ModelKind.LINLOG:
            return 1.0 / (d + gamma[0])
        if kind is ModelKind.EMAX:
            return gamma[0] / (gamma[0] + d) ** 2
        if kind is ModelKind.EXPONENTIAL:
            return np.exp(d / gamma[0]) / gamma[0]
        if kind is ModelKind.QUADRATIC:
            return 1.0 + 2.0 * gamma[0] * d
        if kind is ModelKind.SIGEMAX:
            e, h = gamma[0], gamma[1]
            eh = e ** h
            return h * eh * d ** (h - 1.0) / (eh + d ** h) ** 2
        if kind is ModelKind.POWER:
            return gamma[0] * d ** (gamma[0] - 1.0)
        if kind is ModelKind.TRUNC_LOGISTIC:
            x = _shape(kind, d, gamma)
            return gamma[0] * x * (1.0 - x)
    raise ValueError(kind)


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def standardized_shape(kind: ModelKind, gamma: Sequence[float], d: ArrayLike):
    """Evaluate the standardized shape ``x_gamma(d)``.

    Returns a float for scalar ``d`` and an array otherwise.
    """
    kind = ModelKind.parse(kind)
    validate_gamma(kind, gamma)
    d_arr = np.asarray(d, dtype=np.float64)
    if np.any(d_arr < 0):
        raise DomainError("doses must be nonnegative")
    out = _shape(kind, d_arr, np.asarray(gamma, dtype=np.float64))
    return float(out) if out.ndim == 0 else out


def eval_mean(kind: ModelKind, theta: ThetaLike, d: ArrayLike):
    """Mean response ``alpha + beta * x_gamma(d)``."""
    kind = ModelKind.parse(kind)
    vec = as_vector(kind, theta)
    d_arr = np.asarray(d, dtype=np.float64)
    if np.any(d_arr < 0):
        raise DomainError("doses must be nonnegative")
    out = vec[0] + vec[1] * _shape(kind, d_arr, vec[2:])
    return float(out) if out.ndim == 0 else out


def shape_dose_derivative(kind: ModelKind, gamma: Sequence[float], d: ArrayLike):
    """Derivative of the standardized shape with respect to dose."""
    kind = ModelKind.parse(kind)
    validate_gamma(kind, gamma)
    out = _shape_ddose(kind, np.asarray(d, dtype=np.float64), np.asarray(gamma, dtype=np.float64))
    return float(out) if np.ndim(out) == 0 else out


def mean_gradient(kind: ModelKind, theta: ThetaLike, d: ArrayLike) -> NDArray[np.float64]:
    """Gradient of the mean with respect to ``[alpha, beta, *gamma]``.

    For scalar ``d`` a vector of length ``p`` is returned; for an array of
    doses the result has shape ``d.shape + (p,)``.
    """
    kind = ModelKind.parse(kind)
    vec = as_vector(kind, theta)
    return _mean_gradient(kind, vec, np.asarray(d, dtype=np.float64))


def _mean_gradient(kind: ModelKind, vec: NDArray[np.float64], d: NDArray[np.float64]) -> NDArray[np.float64]:
    gamma = vec[2:]
    cols = [np.ones_like(d), _shape(kind, d, gamma)]
    cols += [vec[1] * g for g in _shape_dgamma(kind, d, gamma)]
    return np.stack(np.broadcast_arrays(*cols), axis=-1)


def inverse_shape(kind: ModelKind, gamma: Sequence[float], u: float) -> float:
    """Dose ``d >= 0`` with ``x_gamma(d) == u``.

    For the quadratic family the smallest nonnegative solution is returned.

    Raises
    ------
    NoSolutionError
        If ``u`` lies outside the range of the shape over ``[0, inf)``.
    """
    kind = ModelKind.parse(kind)
    validate_gamma(kind, gamma)
    g = [float(v) for v in gamma]
    u = float(u)
    if not np.isfinite(u):
        raise NoSolutionError(f"non-finite shape value {u}")

    def _unreachable(lo: float, hi: float) -> NoSolutionError:
        return NoSolutionError(f"{kind.value} shape value {u:.6g} outside attainable range [{lo:.6g}, {hi:.6g})")

    if kind is ModelKind.LINEAR:
        if u < 0:
            raise _unreachable(0.0, np.inf)
        return u
    if kind is ModelKind.LINLOG:
        lo = np.log(g[0])
        if u < lo:
            raise _unreachable(lo, np.inf)
        return float(np.exp(u) - g[0])
    if kind is ModelKind.EMAX:
        if not 0.0 <= u < 1.0:
            raise _unreachable(0.0, 1.0)
        return g[0] * u / (1.0 - u)
    if kind is ModelKind.EXPONENTIAL:
        if u < 0:
            raise _unreachable(0.0, np.inf)
        return g[0] * float(np.log1p(u))
    if kind is ModelKind.QUADRATIC:
        top = -1.0 / (4.0 * g[0])
        if not 0.0 <= u <= top:
            raise _unreachable(0.0, top)
        # rationalized root avoids cancellation for small q*u
        return 2.0 * u / (1.0 + np.sqrt(max(1.0 + 4.0 * g[0] * u, 0.0)))
    if kind is ModelKind.SIGEMAX:
        if not 0.0 <= u < 1.0:
            raise _unreachable(0.0, 1.0)
        return g[0] * (u / (1.0 - u)) ** (1.0 / g[1])
    if kind is ModelKind.POWER:
        if u < 0:
            raise _unreachable(0.0, np.inf)
        return u ** (1.0 / g[0])
    if kind is ModelKind.TRUNC_LOGISTIC:
        lo = float(_shape(kind, 0.0, g))
        if not lo <= u < 1.0:
            raise _unreachable(lo, 1.0)
        if u == lo:
            return 0.0
        hi = max(g[1], 1.0)
        while float(_shape(kind, hi, g)) < u:
            hi *= 2.0
            if hi > 1e12:
                raise _unreachable(lo, 1.0)
        return float(brentq(lambda d: float(_shape(kind, d, g)) - u, 0.0, hi, xtol=1e-15, rtol=1e-15, maxiter=500))
    raise ValueError(kind)
