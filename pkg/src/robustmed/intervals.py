"""Pointwise effect-curve bands and their inversion into MED intervals.

Three band constructions are provided: the percentile bootstrap with
resampling inside dose groups, the profile likelihood for the effect at
each grid dose, and Wald bands from any parameter covariance (used for
the classical and robust-regression effect curves).  ``invert_band_for_med``
turns a band into an MED interval by inverse regression.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.stats import chi2, norm

from robustmed.exceptions import BootstrapError
from robustmed.fitting import (
    Dataset,
    FitResult,
    GridBounds,
    _grid,
    default_bounds,
    fit_ols,
    grid_fit_batch,
)
from robustmed.med import MedEstimate
from robustmed.models import DoseDesign, ModelKind, _mean_gradient, _shape


@dataclass
class EffectCurveBand:
    """Pointwise bounds on ``mu(d) - mu(d0)`` over an ascending dose grid."""

    grid: NDArray[np.float64]
    lower: NDArray[np.float64]
    upper: NDArray[np.float64]
    level: float
    fitted: Optional[NDArray[np.float64]] = None
    n_failed: int = 0
    info: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        if self.fitted is not None:
            self.fitted = np.asarray(self.fitted, dtype=np.float64)
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("band grid must be strictly ascending")
        if self.lower.shape != self.grid.shape or self.upper.shape != self.grid.shape:
            raise ValueError("band bounds must match the grid")
        if np.any(self.lower > self.upper):
            raise ValueError("band lower bound exceeds upper bound")

    def rows(self):
        fitted = self.fitted if self.fitted is not None else np.full_like(self.grid, np.nan)
        return zip(self.grid, self.lower, fitted, self.upper)


@dataclass(frozen=True)
class BootstrapConfig:
    b_samples: int = 1000
    grid_points: int = 201
    seed: int = 0
    level: float = 0.95

    def __post_init__(self) -> None:
        if self.b_samples < 100:
            raise ValueError(f"b_samples must be at least 100, got {self.b_samples}")
        if self.grid_points < 11:
            raise ValueError(f"grid_points must be at least 11, got {self.grid_points}")
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must lie in (0, 1)")


def dose_grid(design: DoseDesign, grid_points: int = 201) -> NDArray[np.float64]:
    """Equispaced grid over ``[d0, d_max]``."""
    return np.linspace(design.placebo, design.d_max, grid_points)


def _effect(kind: ModelKind, theta: NDArray[np.float64], grid: NDArray[np.float64], d0: float):
    """Effect curves for a stack of parameter rows ``(B, p)`` -> ``(B, G)``."""
    theta = np.atleast_2d(theta)
    gam = [theta[:, 2 + j, None] for j in range(kind.arity)]
    x = _shape(kind, grid[None, :], gam)
    x0 = _shape(kind, np.full((1, 1), d0), gam)
    return theta[:, 1, None] * (x - x0)


def _order_stat(sorted_vals: NDArray[np.float64], q: float) -> NDArray[np.float64]:
    # empirical quantile as the ceil(B q)-th order statistic, no interpolation
    b = sorted_vals.shape[0]
    k = min(max(int(math.ceil(b * q - 1e-9)), 1), b)
    return sorted_vals[k - 1]


def bootstrap_effects(kind: ModelKind, data: Dataset, bounds: Optional[GridBounds],
                      config: BootstrapConfig, grid: NDArray[np.float64]):
    """Effect curves of all successful bootstrap refits and the failure count."""
    kind = ModelKind.parse(kind)
    bounds = default_bounds(kind, data.design) if bounds is None else bounds
    rng = np.random.default_rng(np.random.SeedSequence([config.seed]))
    B = config.b_samples
    k = len(data.design.doses)
    wsum = np.empty((B, k))
    ybar = np.empty((B, k))
    within = np.empty((B, k))
    for i in range(k):
        yi = data.response[data.dose_index == i]
        draw = yi[rng.integers(0, yi.size, size=(B, yi.size))]
        wsum[:, i] = yi.size
        ybar[:, i] = draw.mean(axis=1)
        within[:, i] = ((draw - ybar[:, i, None]) ** 2).sum(axis=1)
    batch = grid_fit_batch(kind, data.design.dose_array, wsum, ybar, within, bounds)
    ok = batch.ok & np.all(np.isfinite(batch.theta), axis=1)
    effects = _effect(kind, batch.theta[ok], grid, data.design.placebo)
    return effects, int(B - ok.sum())


def percentile_bootstrap_band(kind: ModelKind, data: Dataset, bounds: Optional[GridBounds] = None,
                              config: BootstrapConfig = BootstrapConfig()) -> EffectCurveBand:
    """Percentile bootstrap band with resampling inside each dose group.

    Raises
    ------
    BootstrapError
        If more than 20% of the refits fail.
    """
    kind = ModelKind.parse(kind)
    fit = fit_ols(kind, data, bounds)
    grid = dose_grid(data.design, config.grid_points)
    effects, failed = bootstrap_effects(kind, data, bounds, config, grid)
    if failed > 0.2 * config.b_samples:
        raise BootstrapError(f"{failed} of {config.b_samples} bootstrap refits failed")
    srt = np.sort(effects, axis=0)
    a = (1.0 - config.level) / 2.0
    lower = _order_stat(srt, a)
    upper = _order_stat(srt, 1.0 - a)
    at0 = grid == data.design.placebo
    lower[at0] = 0.0
    upper[at0] = 0.0
    fitted = _effect(kind, fit.theta_vec, grid, data.design.placebo)[0]
    return EffectCurveBand(grid, lower, upper, config.level, fitted, n_failed=failed,
                           info={"method": "pboot", "b_samples": config.b_samples})


def invert_band_for_med(band: EffectCurveBand, delta: float) -> MedEstimate:
    """MED interval by inverse regression on a pointwise band.

    The lower limit is the first grid dose where the upper band reaches
    ``delta``, the upper limit the first where the lower band does, and
    the point estimate the first where the fitted effect does.  A side
    without a crossing is reported as ``None``.
    """
    def first_above(curve: Optional[NDArray[np.float64]]) -> Optional[float]:
        if curve is None:
            return None
        hit = np.flatnonzero(curve >= delta)
        return float(band.grid[hit[0]]) if hit.size else None

    value = first_above(band.fitted)
    lower = first_above(band.upper)
    upper = first_above(band.lower)
    info = {"lower_estimable": lower is not None, "upper_estimable": upper is not None}
    return MedEstimate(value, band.info.get("method", "band"), lower=lower, upper=upper, info=info)


# ---------------------------------------------------------------------------
# Profile likelihood
# ---------------------------------------------------------------------------

def _centered_moments(x: NDArray[np.float64], n_i: NDArray[np.float64], ybar: NDArray[np.float64]):
    """``Sxx``, ``Sxy`` and the slope-optimal SSE part for designs ``x`` of shape ``(..., k)``."""
    n = n_i.sum()
    xc = x - (x * n_i).sum(axis=-1, keepdims=True) / n
    yc = ybar - (ybar * n_i).sum() / n
    sxx = (n_i * xc * xc).sum(axis=-1)
    sxy = (n_i * xc * yc).sum(axis=-1)
    return sxx, sxy


def _effect_limits(kind: ModelKind, gam: NDArray[np.float64], dg: NDArray[np.float64], d0: float,
                   doses: NDArray[np.float64], n_i, ybar, base: float, threshold: float):
    """Per-gamma effect intervals ``{e : SSE_gamma(e) <= threshold}``.

    ``gam`` has shape ``(G, M, q)`` (or ``(M, q)`` broadcast over the
    grid doses ``dg`` of shape ``(G,)``).  Returns lower/upper arrays of
    shape ``(G, M)`` with ``+inf/-inf`` where a gamma is infeasible.
    """
    cols = [gam[..., j] for j in range(kind.arity)]
    x = _shape(kind, doses, [c[..., None] for c in cols])
    sxx, sxy = _centered_moments(x, n_i, ybar)
    xg = _shape(kind, dg[:, None], cols)
    x0 = _shape(kind, np.float64(d0), cols)
    dx = xg - x0
    with np.errstate(divide="ignore", invalid="ignore"):
        bc = sxy / sxx
        slack = threshold - (base - sxy * bc)
        r = np.sqrt(np.maximum(slack, 0.0) / sxx)
    feasible = (sxx > 0) & (slack >= 0) & np.isfinite(r)
    lo = np.where(dx >= 0, dx * (bc - r), dx * (bc + r))
    hi = np.where(dx >= 0, dx * (bc + r), dx * (bc - r))
    lo = np.where(feasible, lo, np.inf)
    hi = np.where(feasible, hi, -np.inf)
    return np.broadcast_to(lo, np.broadcast_shapes(lo.shape, dx.shape)), \
        np.broadcast_to(hi, np.broadcast_shapes(hi.shape, dx.shape))


def profile_likelihood_band(kind: ModelKind, data: Dataset, bounds: Optional[GridBounds] = None,
                            level: float = 0.95, grid: Optional[ArrayLike] = None,
                            grid_points: int = 201) -> EffectCurveBand:
    """Profile likelihood band for the effect ``beta (x(d_g) - x(d0))``.

    With the effect pinned to ``e`` the slope is ``e / (x(d_g) - x(d0))``;
    ``alpha`` and ``sigma`` are profiled in closed form and ``gamma`` over
    the fitting grid plus one refinement pass.  For a fixed ``gamma`` the
    profiled sum of squares is quadratic in ``e``, so the set where the
    deviance ``n log(SSE(e) / SSE_min)`` stays below the chi-square
    quantile is an explicit interval; the band is the hull of these
    intervals over ``gamma``.
    """
    kind = ModelKind.parse(kind)
    design = data.design
    bounds = default_bounds(kind, design) if bounds is None else bounds
    fit = fit_ols(kind, data, bounds)
    g = dose_grid(design, grid_points) if grid is None else np.asarray(grid, dtype=np.float64)
    d0 = design.placebo
    n_i, ybar, within = data.group_stats()
    doses = design.dose_array
    W = float(within.sum())
    yc = ybar - (ybar * n_i).sum() / n_i.sum()
    base = W + float((n_i * yc * yc).sum())
    crit = float(chi2.ppf(level, 1))
    n = data.n

    active = g > d0
    dg = g[active]
    theta_hat = fit.theta_vec
    if kind.arity == 0 or bounds.fixed:
        gam_sets = [np.asarray(theta_hat[2:], dtype=np.float64)[None, :]]
    else:
        gam_sets = [_grid(np.asarray(bounds.lower), np.asarray(bounds.upper), bounds.grid_points),
                    theta_hat[None, 2:]]
    all_gam = np.concatenate(gam_sets, axis=0)

    if kind.arity:
        x_all = _shape(kind, doses, [all_gam[:, j, None] for j in range(kind.arity)])
    else:
        x_all = _shape(kind, doses, theta_hat[2:])[None, :]
    sxx, sxy = _centered_moments(x_all, n_i, ybar)
    with np.errstate(divide="ignore", invalid="ignore"):
        sse_gam = np.where(sxx > 0, base - sxy * sxy / sxx, np.inf)
    sse_min = float(min(fit.rss, np.min(sse_gam)))
    if sse_min <= 0:
        lo = hi = _effect(kind, theta_hat, dg, d0)[0]
        return _pinned_band(g, active, lo, hi, level, kind, theta_hat, d0, {"method": "proflik"})
    threshold = sse_min * math.exp(crit / n)

    lo_c, hi_c = _effect_limits(kind, all_gam, dg, d0, doses, n_i, ybar, base, threshold)
    lo = lo_c.min(axis=1)
    hi = hi_c.max(axis=1)
    if kind.arity and not bounds.fixed:
        lower_b = np.asarray(bounds.lower)
        upper_b = np.asarray(bounds.upper)
        dif = (upper_b - lower_b) / bounds.grid_points
        for pick, agg in ((np.argmin(lo_c, axis=1), "lo"), (np.argmax(hi_c, axis=1), "hi")):
            start = all_gam[pick]                                           # (G, q)
            fine = _grid(np.maximum(start - 1.1 * dif, lower_b), np.minimum(start + 1.1 * dif, upper_b),
                         bounds.grid_points)                                # (G, M, q)
            flo, fhi = _effect_limits(kind, fine, dg, d0, doses, n_i, ybar, base, threshold)
            if agg == "lo":
                lo = np.minimum(lo, flo.min(axis=1))
            else:
                hi = np.maximum(hi, fhi.max(axis=1))
    failed = ~(np.isfinite(lo) & np.isfinite(hi))
    fitted_eff = _effect(kind, theta_hat, dg, d0)[0]
    # a grid dose whose profile failed is bridged by its neighbours
    if np.any(failed) and not np.all(failed):
        idx = np.arange(dg.size)
        lo[failed] = np.interp(idx[failed], idx[~failed], lo[~failed])
        hi[failed] = np.interp(idx[failed], idx[~failed], hi[~failed])
    lo = np.minimum(lo, fitted_eff)
    hi = np.maximum(hi, fitted_eff)
    info = {"method": "proflik", "sse_min": sse_min, "threshold": threshold}
    band = _pinned_band(g, active, lo, hi, level, kind, theta_hat, d0, info)
    band.n_failed = int(failed.sum())
    return band


def _pinned_band(g, active, lo_active, hi_active, level, kind, theta, d0, info) -> EffectCurveBand:
    lower = np.zeros_like(g)
    upper = np.zeros_like(g)
    lower[active] = lo_active
    upper[active] = hi_active
    fitted = _effect(kind, theta, g, d0)[0]
    return EffectCurveBand(g, lower, upper, level, fitted, info=info)


# ---------------------------------------------------------------------------
# Wald bands
# ---------------------------------------------------------------------------

def wald_effect_band(kind: ModelKind, theta: ArrayLike, covariance: NDArray[np.float64], design: DoseDesign,
                     level: float = 0.95, grid: Optional[ArrayLike] = None, grid_points: int = 201,
                     method: str = "wald") -> EffectCurveBand:
    """Delta-method band for the effect curve.

    ``covariance`` is the covariance of the free parameters of ``theta``
    (already divided by the sample size).
    """
    kind = ModelKind.parse(kind)
    vec = np.asarray(theta, dtype=np.float64)
    g = dose_grid(design, grid_points) if grid is None else np.asarray(grid, dtype=np.float64)
    free = list(kind.free_index)
    d0 = design.placebo
    jac = _mean_gradient(kind, vec, g)[:, free] - _mean_gradient(kind, vec, np.array([d0]))[:, free]
    se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", jac, covariance, jac), 0.0))
    fitted = _effect(kind, vec, g, d0)[0]
    z = float(norm.ppf(0.5 + level / 2.0))
    return EffectCurveBand(g, fitted - z * se, fitted + z * se, level, fitted, info={"method": method})


def classical_effect_band(fit: FitResult, level: float = 0.95, grid_points: int = 201) -> EffectCurveBand:
    from robustmed.med import mean_covariance
    return wald_effect_band(fit.kind, fit.theta_vec, mean_covariance(fit), fit.design, level,
                            grid_points=grid_points, method="classical")
