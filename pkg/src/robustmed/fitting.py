"""Grid-search nonlinear least squares with fixed observation weights.

The nonlinear parameters are scanned on a rectangular grid.  At every
grid point the model is linear in ``(alpha, beta)`` and the weighted
linear problem is solved exactly; the best grid point seeds one pass of
bound refinement, after which the overall best candidate is returned.

Because all patients in a dose group share the same covariate, every
objective only needs per-dose sufficient statistics: the summed weight,
the weighted mean response and the weighted within-group sum of
squares.  The batch solver works on stacks of such statistics, which is
what makes bootstrap refits cheap.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from robustmed.exceptions import RankDeficientError
from robustmed.models import DoseDesign, ModelKind, Theta, _shape, as_vector


class DataFormatError(ValueError):
    """Malformed dataset input."""


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Dataset:
    """Observed responses, each attached to a dose of ``design``."""

    design: DoseDesign
    dose_index: NDArray[np.intp]
    response: NDArray[np.float64]

    def __post_init__(self) -> None:
        idx = np.asarray(self.dose_index, dtype=np.intp)
        resp = np.asarray(self.response, dtype=np.float64)
        object.__setattr__(self, "dose_index", idx)
        object.__setattr__(self, "response", resp)
        if idx.shape != resp.shape or idx.ndim != 1:
            raise DataFormatError("dose_index and response must be 1-D arrays of equal length")
        k = len(self.design.doses)
        if idx.size and (idx.min() < 0 or idx.max() >= k):
            raise DataFormatError("dose index out of range for the design")
        counts = np.bincount(idx, minlength=k)
        if tuple(int(c) for c in counts) != self.design.allocations:
            raise DataFormatError(
                f"per-dose counts {counts.tolist()} do not match allocations {list(self.design.allocations)}"
            )
        if not np.all(np.isfinite(resp)):
            raise DataFormatError("responses must be finite")

    @classmethod
    def from_arrays(
        cls,
        doses: ArrayLike,
        responses: ArrayLike,
        design_doses: Optional[Sequence[float]] = None,
    ) -> "Dataset":
        """Build a dataset from per-observation doses.

        Doses are matched to ``design_doses`` by exact value; when no design
        is given it is formed from the distinct observed doses.
        """
        d = np.asarray(doses, dtype=np.float64)
        y = np.asarray(responses, dtype=np.float64)
        grid = np.unique(d) if design_doses is None else np.asarray(design_doses, dtype=np.float64)
        idx = np.searchsorted(grid, d)
        idx_clipped = np.minimum(idx, grid.size - 1)
        bad = grid[idx_clipped] != d
        if np.any(bad):
            raise DataFormatError(f"dose {d[bad][0]!r} is not part of the design {grid.tolist()}")
        counts = np.bincount(idx_clipped, minlength=grid.size)
        design = DoseDesign(tuple(grid.tolist()), tuple(int(c) for c in counts))
        return cls(design, idx_clipped, y)

    @property
    def n(self) -> int:
        return int(self.response.size)

    @property
    def doses(self) -> NDArray[np.float64]:
        return self.design.dose_array[self.dose_index]

    def group_stats(self, weights: Optional[NDArray[np.float64]] = None):
        """Per-dose summed weight, weighted mean and weighted within-group SS."""
        k = len(self.design.doses)
        w = np.ones(self.n) if weights is None else np.asarray(weights, dtype=np.float64)
        wsum = np.bincount(self.dose_index, weights=w, minlength=k)
        ybar = np.bincount(self.dose_index, weights=w * self.response, minlength=k) / wsum
        dev = self.response - ybar[self.dose_index]
        within = np.bincount(self.dose_index, weights=w * dev * dev, minlength=k)
        return wsum, ybar, within

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["dose", "response"])
            for d, y in zip(self.doses, self.response):
                writer.writerow([repr(float(d)), repr(float(y))])


def read_dataset_csv(path: str | Path, design_doses: Optional[Sequence[float]] = None) -> Dataset:
    """Read a ``dose,response`` CSV file."""
    path = Path(path)
    doses: list[float] = []
    responses: list[float] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: line 1: empty file") from None
        cols = [h.strip().lower() for h in header]
        if "dose" not in cols or "response" not in cols:
            raise DataFormatError(f"{path}: line 1: header must contain 'dose' and 'response', got {header}")
        i_d, i_y = cols.index("dose"), cols.index("response")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                doses.append(float(row[i_d]))
                responses.append(float(row[i_y]))
            except (ValueError, IndexError):
                raise DataFormatError(f"{path}: line {lineno}: cannot parse {row!r}") from None
            if doses[-1] < 0 or not np.isfinite(doses[-1]) or not np.isfinite(responses[-1]):
                raise DataFormatError(f"{path}: line {lineno}: invalid values {row!r}")
    if not doses:
        raise DataFormatError(f"{path}: no observations")
    try:
        return Dataset.from_arrays(doses, responses, design_doses)
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from None


@dataclass(frozen=True)
class GridBounds:
    """Search box for the nonlinear parameters.

    ``fixed`` holds nonlinear parameters that are not estimated (the
    log-linear offset); it is empty for every other family.
    """

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    grid_points: int = 30
    fixed: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "lower", tuple(float(v) for v in self.lower))
        object.__setattr__(self, "upper", tuple(float(v) for v in self.upper))
        object.__setattr__(self, "fixed", tuple(float(v) for v in self.fixed))
        if len(self.lower) != len(self.upper):
            raise ValueError("lower and upper bounds differ in length")
        if any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
            raise ValueError(f"need lower < upper, got {self.lower} and {self.upper}")
        if self.grid_points < 2:
            raise ValueError("grid_points must be at least 2")


def default_bounds(kind: ModelKind, design: DoseDesign, grid_points: int = 30,
                   linlog_offset: Optional[float] = None) -> GridBounds:
    kind = ModelKind.parse(kind)
    dmax = design.d_max
    if kind is ModelKind.LINEAR:
        return GridBounds((), (), grid_points)
    if kind is ModelKind.LINLOG:
        off = 0.01 * dmax if linlog_offset is None else linlog_offset
        return GridBounds((), (), grid_points, fixed=(off,))
    if kind is ModelKind.EMAX:
        return GridBounds((0.001 * dmax,), (1.5 * dmax,), grid_points)
    if kind is ModelKind.SIGEMAX:
        return GridBounds((0.001 * dmax, 0.5), (1.5 * dmax, 10.0), grid_points)
    if kind is ModelKind.EXPONENTIAL:
        return GridBounds((0.1 * dmax,), (2.0 * dmax,), grid_points)
    if kind is ModelKind.QUADRATIC:
        return GridBounds((-2.0 / dmax,), (-0.001 / dmax,), grid_points)
    if kind is ModelKind.POWER:
        return GridBounds((0.05,), (4.0,), grid_points)
    if kind is ModelKind.TRUNC_LOGISTIC:
        return GridBounds((0.5 / dmax, 0.0), (50.0 / dmax, dmax), grid_points)
    raise ValueError(kind)


@dataclass
class FitResult:
    """Outcome of a (weighted) least squares or estimating-equation fit."""

    kind: ModelKind
    theta: Theta
    sigma: float
    sse: float
    rss: float
    weights_used: NDArray[np.float64]
    n: int
    design: DoseDesign
    converged: bool = True
    iterations: int = 1
    trace: list = field(default_factory=list)
    method: str = "ols"
    message: str = ""

    @property
    def theta_vec(self) -> NDArray[np.float64]:
        return self.theta.to_array()

    def to_dict(self) -> dict:
        return {
            "model": self.kind.value,
            "method": self.method,
            "theta": self.theta.as_dict(self.kind),
            "sigma": self.sigma,
            "sse": self.sse,
            "rss": self.rss,
            "n": self.n,
            "converged": self.converged,
            "iterations": self.iterations,
            "message": self.message,
            "trace": [{"theta": list(map(float, t)), "med": m} for t, m in self.trace],
        }


# ---------------------------------------------------------------------------
# Grid machinery
# ---------------------------------------------------------------------------

def refine_bounds(start: Sequence[float], bounds: GridBounds) -> GridBounds:
    """Shrink ``bounds`` to a window of 2.2 grid spacings around ``start``."""
    lo = np.asarray(bounds.lower)
    hi = np.asarray(bounds.upper)
    s = np.asarray(start, dtype=np.float64)
    dif = (hi - lo) / bounds.grid_points
    new_lo = np.maximum(s - 1.1 * dif, lo)
    new_hi = np.minimum(s + 1.1 * dif, hi)
    return GridBounds(tuple(new_lo), tuple(new_hi), bounds.grid_points, bounds.fixed)


def _grid(lower: NDArray, upper: NDArray, n: int) -> NDArray[np.float64]:
    """Cartesian grid in lexicographic order; ``lower``/``upper`` may carry a batch axis."""
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    t = np.linspace(0.0, 1.0, n)
    axes = lower[..., None] + (upper - lower)[..., None] * t  # (..., q, n)
    q = lower.shape[-1]
    combos = np.array(list(itertools.product(range(n), repeat=q)), dtype=np.intp)  # (n**q, q)
    return np.stack([axes[..., j, combos[:, j]] for j in range(q)], axis=-1)


def _solve_linear(x: NDArray, wsum: NDArray, ybar: NDArray, within: NDArray):
    """Weighted regression of group means on ``[1, x]`` for stacks of designs.

    ``x`` has shape ``(..., M, k)``; the statistics have shape ``(..., 1, k)``
    or broadcast to it.  The two-column system is factorized by modified
    Gram-Schmidt (centering against the weighted intercept column), i.e. a
    thin QR of ``sqrt(W) [1, x]``.  Returns ``alpha, beta, sse`` with
    ``sse = inf`` wherever the design column is (numerically) constant.
    """
    wtot = wsum.sum(axis=-1)
    xbar = (wsum * x).sum(axis=-1) / wtot
    ymean = (wsum * ybar).sum(axis=-1) / wtot
    xc = x - xbar[..., None]
    sxx = (wsum * xc * xc).sum(axis=-1)
    sxy = (wsum * xc * (ybar - ymean[..., None])).sum(axis=-1)
    scale = (wsum * x * x).sum(axis=-1)
    ok = np.isfinite(sxx) & (sxx > 1e-13 * np.maximum(scale, 1e-300))
    with np.errstate(divide="ignore", invalid="ignore"):
        beta = np.where(ok, sxy / np.where(ok, sxx, 1.0), 0.0)
    alpha = ymean - beta * xbar
    resid = ybar - alpha[..., None] - beta[..., None] * x
    sse = (wsum * resid * resid).sum(axis=-1) + within.sum(axis=-1)
    sse = np.where(ok & np.isfinite(sse), sse, np.inf)
    return alpha, beta, sse


def _lexargmin(sse: NDArray, gam: NDArray) -> NDArray[np.intp]:
    """Row-wise argmin of ``sse`` with ties broken by lexicographically smallest gamma."""
    best = sse.min(axis=-1, keepdims=True)
    mask = sse <= best
    for j in range(gam.shape[-1]):
        g = np.where(mask, gam[..., j], np.inf)
        mask &= g <= g.min(axis=-1, keepdims=True)
    return np.argmax(mask, axis=-1)


@dataclass
class BatchFit:
    theta: NDArray[np.float64]   # (B, p)
    sse: NDArray[np.float64]     # (B,)
    ok: NDArray[np.bool_]        # (B,)


def grid_fit_batch(kind: ModelKind, dose: NDArray, wsum: NDArray, ybar: NDArray, within: NDArray,
                   bounds: GridBounds) -> BatchFit:
    """Fit ``kind`` to a stack of per-dose statistics, each of shape ``(B, k)``."""
    wsum = np.atleast_2d(wsum)
    ybar = np.atleast_2d(ybar)
    within = np.atleast_2d(within)
    B = wsum.shape[0]
    p = kind.n_params

    if kind.arity == 0 or bounds.fixed:
        gamma = np.asarray(bounds.fixed, dtype=np.float64)
        x = _shape(kind, dose, gamma)
        alpha, beta, sse = _solve_linear(x[None, :], wsum, ybar, within)
        theta = np.empty((B, p))
        theta[:, 0], theta[:, 1] = alpha, beta
        theta[:, 2:] = gamma
        return BatchFit(theta, sse, np.isfinite(sse))

    lower = np.asarray(bounds.lower)
    upper = np.asarray(bounds.upper)
    n = bounds.grid_points
    coarse = _grid(lower, upper, n)                                      # (G, q)
    xc = _shape(kind, dose[None, :], [coarse[:, j, None] for j in range(kind.arity)])  # (G, k)
    a_c, b_c, s_c = _solve_linear(xc[None], wsum[:, None, :], ybar[:, None, :], within[:, None, :])
    i_c = _lexargmin(s_c, np.broadcast_to(coarse, (B,) + coarse.shape))
    start = coarse[i_c]                                                  # (B, q)

    dif = (upper - lower) / n
    r_lo = np.maximum(start - 1.1 * dif, lower)
    r_hi = np.minimum(start + 1.1 * dif, upper)
    fine = _grid(r_lo, r_hi, n)                                          # (B, G, q)
    xf = _shape(kind, dose[None, None, :], [fine[..., j, None] for j in range(kind.arity)])
    a_f, b_f, s_f = _solve_linear(xf, wsum[:, None, :], ybar[:, None, :], within[:, None, :])

    rows = np.arange(B)
    cand_g = np.concatenate([start[:, None, :], fine], axis=1)
    cand_s = np.concatenate([s_c[rows, i_c][:, None], s_f], axis=1)
    cand_a = np.concatenate([a_c[rows, i_c][:, None], a_f], axis=1)
    cand_b = np.concatenate([b_c[rows, i_c][:, None], b_f], axis=1)
    j = _lexargmin(cand_s, cand_g)
    theta = np.empty((B, p))
    theta[:, 0] = cand_a[rows, j]
    theta[:, 1] = cand_b[rows, j]
    theta[:, 2:] = cand_g[rows, j]
    sse = cand_s[rows, j]
    return BatchFit(theta, sse, np.isfinite(sse))


def unweighted_rss(kind: ModelKind, data: Dataset, theta: NDArray[np.float64]) -> float:
    mu = theta[0] + theta[1] * _shape(kind, data.doses, theta[2:])
    r = data.response - mu
    return float(r @ r)


def _check_rank(kind: ModelKind, data: Dataset, weights: NDArray[np.float64]) -> None:
    wsum = np.bincount(data.dose_index, weights=weights, minlength=len(data.design.doses))
    distinct = int(np.count_nonzero(wsum > 0))
    if distinct < kind.n_free + 1:
        raise RankDeficientError(
            f"rank deficient design: {kind.value} has {kind.n_free} parameters and needs "
            f"at least {kind.n_free + 1} distinct doses, got {distinct}"
        )


def fit_weighted(kind: ModelKind, data: Dataset, bounds: Optional[GridBounds] = None,
                 weights: Optional[ArrayLike] = None) -> FitResult:
    """Minimize ``sum w_ij (Y_ij - alpha - beta x_gamma(d_i))^2`` over the refined grid.

    ``weights`` are per observation and must be strictly positive; the
    default is unit weights.  ``sigma`` is estimated from the unweighted
    residuals at the returned parameters with ``n - p`` degrees of freedom.
    """
    kind = ModelKind.parse(kind)
    bounds = default_bounds(kind, data.design) if bounds is None else bounds
    w = np.ones(data.n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (data.n,):
        raise ValueError(f"expected {data.n} weights, got shape {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("weights must be finite and strictly positive")
    _check_rank(kind, data, w)
    wsum, ybar, within = data.group_stats(w)
    batch = grid_fit_batch(kind, data.design.dose_array, wsum[None], ybar[None], within[None], bounds)
    if not batch.ok[0]:
        raise RankDeficientError(f"design matrix [1, x(d)] is singular at every grid point for {kind.value}")
    theta = batch.theta[0]
    as_vector(kind, theta)
    rss = unweighted_rss(kind, data, theta)
    dof = max(data.n - kind.n_free, 1)
    return FitResult(
        kind=kind,
        theta=Theta.from_array(theta),
        sigma=float(np.sqrt(max(rss, 0.0) / dof)),
        sse=float(max(batch.sse[0], 0.0)),
        rss=rss,
        weights_used=w,
        n=data.n,
        design=data.design,
        method="ols" if weights is None else "wls",
    )


def fit_ols(kind: ModelKind, data: Dataset, bounds: Optional[GridBounds] = None) -> FitResult:
    """Unweighted least squares fit; identical to ``fit_weighted`` with unit weights."""
    return fit_weighted(kind, data, bounds, None)


def sse_at(kind: ModelKind, data: Dataset, theta: ArrayLike, weights: Optional[ArrayLike] = None) -> float:
    """Weighted sum of squares at an arbitrary parameter vector."""
    kind = ModelKind.parse(kind)
    vec = as_vector(kind, theta)
    w = np.ones(data.n) if weights is None else np.asarray(weights, dtype=np.float64)
    mu = vec[0] + vec[1] * _shape(kind, data.doses, vec[2:])
    r = data.response - mu
    return float(np.sum(w * r * r))
