"""Plug-in and doubly robust dose-response estimators.

The doubly robust pipeline builds the pseudo-outcome

    phi = [R (Y - mu) / rho + mu - tau] * w + theta0(A)

on a held-out fold and smooths it against the treatment with a local
linear regression. Nuisances are fit on one fold, the initial estimate
``theta0`` and the marginal treatment density on a second, and the
smoothing happens on a third; the three roles are rotated cyclically and
the curves averaged.

Confidence intervals target the *smoothed* curve (the true curve convolved
with the local linear kernel), not the curve itself: the ``O(h^2)``
smoothing bias is not corrected.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from statistics import NormalDist
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, split_folds
from .errors import DataError, FitError
from .nuisance import (
    DEFAULT_CLIP_RHO_MIN,
    DEFAULT_CLIP_W_MAX,
    DENSITY_FLOOR,
    Component,
    NuisanceBundle,
    NuisanceLearners,
    estimate_marginal_density,
    fit_nuisances,
)
from .smoother import (
    SmoothResult,
    default_bandwidth_grid,
    get_kernel,
    local_linear_at,
    local_linear_point,
    loocv_bandwidth,
)

METHODS = ("plugin", "dr", "oracle", "supervised")
CURVE_COLUMNS = ("a", "theta_hat", "se", "ci_lower", "ci_upper", "method", "bandwidth", "n_effective")
SE_SUBSAMPLE = 2000


def z_quantile(level: float) -> float:
    """Two-sided standard normal critical value for a confidence level."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"confidence level must be in (0, 1), got {level}")
    return NormalDist().inv_cdf(0.5 + level / 2.0)


@dataclass(frozen=True)
class EstimationConfig:
    """Settings for :func:`dr_estimate` and friends.

    ``bandwidth`` fixes the smoothing bandwidth; otherwise it is chosen by
    leave-one-out cross-validation over ``bandwidth_grid`` or, if that is
    unset, over ``grid_points`` geometric multiples of the treatment range
    between ``grid_lo`` and ``grid_hi``.
    """

    method: str = "dr"
    kernel: str = "epanechnikov"
    bandwidth: float | None = None
    bandwidth_grid: tuple[float, ...] | None = None
    grid_lo: float = 0.05
    grid_hi: float = 1.0
    grid_points: int = 20
    grid: tuple[float, ...] | None = None
    clip_rho_min: float = DEFAULT_CLIP_RHO_MIN
    clip_w_max: float = DEFAULT_CLIP_W_MAX
    rotate: bool = True
    ci_level: float = 0.95
    seed: int = 0
    quadratic_a: bool = True
    interactions: tuple[int, ...] | None = None
    degenerate: str = "raise"
    threads: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        get_kernel(self.kernel)
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if not 0 < self.clip_rho_min <= 1 or not self.clip_w_max > 0:
            raise ValueError("clip_rho_min must be in (0, 1] and clip_w_max positive")
        z_quantile(self.ci_level)
        if self.degenerate not in ("raise", "nw"):
            raise ValueError("degenerate must be 'raise' or 'nw'")


def default_grid(A, count: int = 25) -> np.ndarray:
    """``count`` equally spaced points between the 5th and 95th percentiles."""
    lo, hi = np.quantile(np.asarray(A, dtype=float), [0.05, 0.95])
    return np.linspace(lo, hi, count)


# ---------------------------------------------------------------------------
# result container
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DoseResponseEstimate:
    """Estimated curve on a grid.

    ``se``, ``ci_lower`` and ``ci_upper`` are NaN for methods without a
    variance estimate. ``bandwidth`` is the smoothing bandwidth (the mean
    over cross-fitting rotations if they chose different values; see
    ``diagnostics['bandwidths']``).
    """

    grid: np.ndarray
    theta_hat: np.ndarray
    se: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    method: str
    bandwidth: float = math.nan
    n_effective: np.ndarray | None = None
    level: float = 0.95
    diagnostics: dict = field(default_factory=dict)

    @classmethod
    def build(cls, grid, theta, se, method, level=0.95, **kw) -> "DoseResponseEstimate":
        grid = np.asarray(grid, dtype=float)
        theta = np.asarray(theta, dtype=float)
        if se is None:
            se = np.full_like(theta, np.nan)
        se = np.asarray(se, dtype=float)
        half = z_quantile(level) * se
        return cls(grid, theta, se, theta - half, theta + half, method, level=level, **kw)

    def at(self, a: float) -> float:
        j = int(np.argmin(np.abs(self.grid - a)))
        return float(self.theta_hat[j])

    def to_csv(self, path) -> None:
        neff = self.n_effective if self.n_effective is not None else [None] * self.grid.size
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(CURVE_COLUMNS)
            for j in range(self.grid.size):
                wr.writerow([
                    repr(float(self.grid[j])), repr(float(self.theta_hat[j])),
                    _cell(self.se[j]), _cell(self.ci_lower[j]), _cell(self.ci_upper[j]),
                    self.method, _cell(self.bandwidth),
                    "" if neff[j] is None else str(int(neff[j])),
                ])

    @classmethod
    def from_csv(cls, path) -> "DoseResponseEstimate":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise DataError("curve file has no rows")
        missing = set(CURVE_COLUMNS) - set(rows[0])
        if missing:
            raise DataError(f"curve file lacks columns {sorted(missing)}")
        col = lambda k: np.array([_num(r[k]) for r in rows])  # noqa: E731
        neff = [r["n_effective"] for r in rows]
        return cls(col("a"), col("theta_hat"), col("se"), col("ci_lower"), col("ci_upper"),
                   rows[0]["method"], float(col("bandwidth")[0]),
                   None if any(v == "" for v in neff) else np.array([int(v) for v in neff]))


def _cell(x) -> str:
    x = float(x)
    return "" if math.isnan(x) else repr(x)


def _num(s: str) -> float:
    return math.nan if s == "" else float(s)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class InitialEstimate:
    """``theta0(a) = mean_j tau(a, V_j)`` over a fold of covariates."""

    tau: Component
    V: np.ndarray

    def __post_init__(self):
        if np.asarray(self.V).shape[0] == 0:
            raise DataError("initial estimate needs a non-empty fold")

    def __call__(self, a) -> np.ndarray:
        return self.tau.average_over(np.atleast_1d(np.asarray(a, dtype=float)), self.V)


def initial_estimate(tau: Component, fold: Dataset, a) -> np.ndarray | float:
    """Mean of ``tau(a, V_i)`` over the rows of ``fold``."""
    if fold.n == 0:
        raise DataError("initial estimate needs a non-empty fold")
    out = InitialEstimate(tau, fold.V)(a)
    return float(out[0]) if np.ndim(a) == 0 else out


def plugin_estimate(tau: Component | None, data: Dataset, grid) -> DoseResponseEstimate:
    """``theta(a) = mean_i tau(a, V_i)`` over all rows."""
    if tau is None or not callable(tau):
        raise ValueError("plugin estimate needs a fitted tau component")
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    return DoseResponseEstimate.build(grid, tau.average_over(grid, data.V), None, "plugin")


@dataclass(frozen=True, eq=False)
class PseudoOutcomeSet:
    """Pseudo-outcomes on one fold, with clipping counters."""

    A: np.ndarray
    phi: np.ndarray
    R: np.ndarray
    rows: np.ndarray | None = None
    theta0: Callable | None = None
    n_rho_clipped: int = 0
    n_w_capped: int = 0
    n_pi_floored: int = 0

    @property
    def n(self) -> int:
        return int(self.phi.shape[0])


def pseudo_outcomes(bundle: NuisanceBundle, theta0: Callable, rows: Dataset,
                    row_ids: np.ndarray | None = None) -> PseudoOutcomeSet:
    """Evaluate the pseudo-outcome on every row of ``rows``."""
    A, X, V, R = rows.A, rows.X, rows.V, rows.R
    mu = bundle.mu(A, X)
    tau = bundle.tau(A, V)
    rho_raw = bundle.rho(A, X)
    rho = np.clip(rho_raw, bundle.clip_rho_min, 1.0)
    pi = bundle.pi(A, V)
    w_obj = bundle.w
    f = w_obj.f(A)
    w = w_obj.from_values(f, pi)
    resid = np.where(R == 1, np.nan_to_num(rows.Y - mu), 0.0)
    phi = (resid / rho + mu - tau) * w + theta0(A)
    if not np.all(np.isfinite(phi)):
        raise FloatingPointError("non-finite pseudo-outcome")
    return PseudoOutcomeSet(
        A, phi, R, row_ids, theta0,
        n_rho_clipped=int(np.sum(rho_raw < bundle.clip_rho_min)),
        n_w_capped=int(np.sum(w >= bundle.clip_w_max)),
        n_pi_floored=int(np.sum(pi < DENSITY_FLOOR)),
    )


def _subsample_columns(nz: np.ndarray, A: np.ndarray, budget: int) -> tuple[np.ndarray, float]:
    """Evenly spaced (in treatment order) subset of ``nz`` and its scale factor."""
    if nz.size <= budget:
        return nz, 1.0
    srt = nz[np.argsort(A[nz], kind="stable")]
    pick = srt[np.round(np.linspace(0, srt.size - 1, budget)).astype(int)]
    return pick, nz.size / budget


def influence_se(po: PseudoOutcomeSet, fit: SmoothResult, tau: Component, V: np.ndarray,
                 subsample: int = SE_SUBSAMPLE) -> np.ndarray:
    """Influence-function standard error at each center of ``fit``.

    For row ``i`` of the smoothing fold the estimated influence value is

        n W_i (phi_i - fitted_i) + sum_t W_t tau(A_t, V_i) - theta(a)

    with ``W`` the smoother weights at ``a``; the standard error is
    ``sqrt(mean(value**2) / n)``. For components without a factorized
    cross sum, at most ``subsample`` treatment values enter the middle term.
    """
    A, phi = po.A, po.phi
    n = A.shape[0]
    ks, h = fit.kernel, fit.h
    out = np.empty(fit.centers.shape[0])
    for j, a in enumerate(fit.centers):
        S0, S1, S2 = fit.sums[j, :3]
        u = (A - a) / h
        k = ks(u) / h
        if fit.fallback[j]:
            W = k / S0
            fitted = np.full(n, fit.estimate[j])
        else:
            W = k * (S2 - S1 * u) / (S0 * S2 - S1 * S1)
            fitted = fit.estimate[j] + fit.slope[j] * u
        term1 = n * W * (phi - fitted)
        nz = np.flatnonzero(W != 0.0)
        if tau.factorized:
            term2 = tau.weighted_cross(A[nz], W[None, nz], V)[0]
        else:
            cols, scale = _subsample_columns(nz, A, subsample)
            term2 = scale * tau.weighted_cross(A[cols], W[None, cols], V)[0]
        infl = term1 + term2 - fit.estimate[j]
        out[j] = math.sqrt(float(np.mean(infl * infl)) / n)
    return out


def oracle_estimate(true_phi, A, a: float, h: float, kernel="epanechnikov") -> float:
    """Local linear regression of known pseudo-outcomes on the treatment."""
    return local_linear_point(A, true_phi, a, h, kernel)[0]


# ---------------------------------------------------------------------------
# cross-fitting
# ---------------------------------------------------------------------------

@dataclass
class _PassResult:
    theta: np.ndarray
    se: np.ndarray
    h: float
    n_eff: np.ndarray
    fallback: int
    clips: tuple[int, int, int]
    selection: object = None


def _select_h(po: PseudoOutcomeSet, cfg: EstimationConfig):
    if cfg.bandwidth is not None:
        return float(cfg.bandwidth), None
    grid = cfg.bandwidth_grid
    if grid is None:
        grid = default_bandwidth_grid(po.A, cfg.grid_lo, cfg.grid_hi, cfg.grid_points)
    sel = loocv_bandwidth(po.A, po.phi, grid, cfg.kernel)
    return sel.h, sel


def _smoothing_pass(bundle: NuisanceBundle, sel_rows: Dataset, smooth_rows: Dataset, grid,
                    cfg: EstimationConfig, theta0: Callable | None = None) -> _PassResult:
    """Initial estimate, marginal density and bandwidth on one fold; smoothing on another."""
    if theta0 is None:
        theta0 = InitialEstimate(bundle.tau, sel_rows.V)
    if bundle.f is None:
        bundle = bundle.with_marginal(estimate_marginal_density(bundle.pi, sel_rows.V))
    if cfg.bandwidth is None:
        po_sel = pseudo_outcomes(bundle, theta0, sel_rows)
        h, sel = _select_h(po_sel, cfg)
    else:
        h, sel = float(cfg.bandwidth), None
    po = pseudo_outcomes(bundle, theta0, smooth_rows)
    fit = local_linear_at(po.A, po.phi, grid, h, cfg.kernel, cfg.degenerate)
    se = influence_se(po, fit, bundle.tau, smooth_rows.V)
    return _PassResult(fit.estimate, se, h, fit.n_effective, int(fit.fallback.sum()),
                       (po.n_rho_clipped, po.n_w_capped, po.n_pi_floored), sel)


def _combine(passes: Sequence[_PassResult], grid, method, cfg: EstimationConfig,
             extra: dict | None = None) -> DoseResponseEstimate:
    r = len(passes)
    theta = np.mean([p.theta for p in passes], axis=0)
    se = np.sqrt(np.sum([p.se ** 2 for p in passes], axis=0)) / r
    hs = [p.h for p in passes]
    diag = {
        "bandwidths": hs,
        "fallback_points": sum(p.fallback for p in passes),
        "rho_clipped": sum(p.clips[0] for p in passes),
        "w_capped": sum(p.clips[1] for p in passes),
        "pi_floored": sum(p.clips[2] for p in passes),
        "selections": [p.selection for p in passes],
        **(extra or {}),
    }
    return DoseResponseEstimate.build(
        grid, theta, se, method, cfg.ci_level, bandwidth=float(np.mean(hs)),
        n_effective=np.sum([p.n_eff for p in passes], axis=0).astype(int), diagnostics=diag)


def _run(tasks: Sequence[Callable[[], _PassResult]], threads: int) -> list[_PassResult]:
    if threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=min(threads, len(tasks))) as ex:
            return list(ex.map(lambda t: t(), tasks))
    return [t() for t in tasks]


def _eval_grid(data: Dataset, cfg: EstimationConfig, grid) -> np.ndarray:
    if grid is None:
        grid = cfg.grid
    g = default_grid(data.A) if grid is None else np.atleast_1d(np.asarray(grid, dtype=float))
    return np.sort(g)


def dr_estimate(data: Dataset, config: EstimationConfig | None = None, grid=None, *,
                bundle: NuisanceBundle | None = None, learners: NuisanceLearners | None = None,
                method: str = "dr", constant_rho: float | None = None) -> DoseResponseEstimate:
    """Three-fold cross-fitted doubly robust estimate.

    Parameters
    ----------
    data : Dataset
    config : EstimationConfig, optional
    grid : array_like, optional
        Evaluation points; defaults to ``config.grid`` or 25 points between
        the 5th and 95th treatment percentiles.
    bundle : NuisanceBundle, optional
        Use these nuisances instead of fitting them (e.g. known truths).
    learners : NuisanceLearners, optional
        Replacement fitting routines.
    """
    cfg = config or EstimationConfig()
    grid = _eval_grid(data, cfg, grid)
    if data.n_labeled == 0:
        raise DataError("no labeled rows")
    folds = split_folds(data, cfg.seed, 3)
    parts = [data.subset(folds.indices(j)) for j in range(3)]
    rotations = range(3) if cfg.rotate else range(1)

    def task(r):
        def go():
            d1, d2, t = parts[r], parts[(r + 1) % 3], parts[(r + 2) % 3]
            b = bundle
            if b is None:
                try:
                    b = fit_nuisances(d1, quadratic_a=cfg.quadratic_a, interactions=cfg.interactions,
                                      learners=learners, constant_rho=constant_rho,
                                      clip_rho_min=cfg.clip_rho_min, clip_w_max=cfg.clip_w_max)
                except FitError as exc:
                    raise FitError(f"rotation {r}, nuisance fold: {exc}") from exc
            else:
                b = replace(b, clip_rho_min=cfg.clip_rho_min, clip_w_max=cfg.clip_w_max)
            return _smoothing_pass(b, d2, t, grid, cfg)
        return go

    passes = _run([task(r) for r in rotations], cfg.threads)
    return _combine(passes, grid, method, cfg, {"folds": folds})


def supervised_estimate(data: Dataset, config: EstimationConfig | None = None, grid=None, *,
                        learners: NuisanceLearners | None = None) -> DoseResponseEstimate:
    """Doubly robust estimate from labeled rows only, ignoring surrogates."""
    cfg = config or EstimationConfig()
    grid = _eval_grid(data, cfg, grid)
    lab = data.labeled().without_surrogates()
    if lab.n < 3:
        raise DataError("supervised estimate needs at least three labeled rows")
    return dr_estimate(lab, cfg, grid, learners=learners, method="supervised", constant_rho=1.0)


def crossfit_plugin(data: Dataset, config: EstimationConfig | None = None, grid=None, *,
                    learners: NuisanceLearners | None = None) -> DoseResponseEstimate:
    """Plug-in estimate with nuisances fit on one half and averaged over the other, then swapped."""
    cfg = config or EstimationConfig()
    grid = _eval_grid(data, cfg, grid)
    folds = split_folds(data, cfg.seed, 2)
    halves = [data.subset(folds.indices(j)) for j in range(2)]
    est = []
    for r in range(2):
        fit_rows, eval_rows = halves[r], halves[1 - r]
        try:
            b = fit_nuisances(fit_rows, quadratic_a=cfg.quadratic_a, interactions=cfg.interactions,
                              learners=learners, constant_rho=1.0)
        except FitError as exc:
            raise FitError(f"rotation {r}, nuisance fold: {exc}") from exc
        est.append(b.tau.average_over(grid, eval_rows.V))
    return DoseResponseEstimate.build(grid, np.mean(est, axis=0), None, "plugin")


def split_sample_estimate(data: Dataset, bundle: NuisanceBundle, config: EstimationConfig,
                          grid, fold_seed: int | np.random.SeedSequence,
                          oracle: tuple[NuisanceBundle, Callable] | None = None) -> dict:
    """Two-fold protocol for externally supplied nuisances.

    The sample is split in half (D, T). The initial estimate, the marginal
    density (if the bundle has none) and the bandwidth come from D; the
    smoothing is done on T; then the halves swap and results are averaged.
    ``oracle=(true_bundle, true_theta)`` adds the same smoother applied to
    the true pseudo-outcomes with the bandwidths chosen for the estimate.

    Returns a dict mapping method tag to :class:`DoseResponseEstimate`.
    """
    grid = np.sort(np.atleast_1d(np.asarray(grid, dtype=float)))
    seed = fold_seed.generate_state(1)[0] if isinstance(fold_seed, np.random.SeedSequence) else fold_seed
    folds = split_folds(data, int(seed), 2)
    halves = [data.subset(folds.indices(j)) for j in range(2)]
    b = replace(bundle, clip_rho_min=config.clip_rho_min, clip_w_max=config.clip_w_max)
    passes = [_smoothing_pass(b, halves[r], halves[1 - r], grid, config) for r in range(2)]
    out = {"dr": _combine(passes, grid, "dr", config, {"folds": folds})}
    if oracle is not None:
        tb, ttheta = oracle
        opasses = []
        for r in range(2):
            cfg_r = replace(config, bandwidth=passes[r].h)
            opasses.append(_smoothing_pass(tb, halves[r], halves[1 - r], grid, cfg_r, theta0=ttheta))
        out["oracle"] = _combine(opasses, grid, "oracle", config)
    return out


def estimate(data: Dataset, config: EstimationConfig | None = None, grid=None) -> DoseResponseEstimate:
    """Dispatch on ``config.method`` (``oracle`` requires known nuisances and is not available here)."""
    cfg = config or EstimationConfig()
    if cfg.method == "dr":
        return dr_estimate(data, cfg, grid)
    if cfg.method == "plugin":
        return crossfit_plugin(data, cfg, grid)
    if cfg.method == "supervised":
        return supervised_estimate(data, cfg, grid)
    raise ValueError("the oracle estimator needs the true pseudo-outcomes; use oracle_estimate")


def selection_pseudo_outcomes(data: Dataset, config: EstimationConfig | None = None, *,
                              learners: NuisanceLearners | None = None) -> PseudoOutcomeSet:
    """Pseudo-outcomes used for bandwidth selection in the first rotation.

    Nuisances are fit on the first fold and the pseudo-outcomes evaluated on
    the second, exactly as inside :func:`dr_estimate`.
    """
    cfg = config or EstimationConfig()
    folds = split_folds(data, cfg.seed, 3)
    d1, d2 = data.subset(folds.indices(0)), data.subset(folds.indices(1))
    try:
        b = fit_nuisances(d1, quadratic_a=cfg.quadratic_a, interactions=cfg.interactions,
                          learners=learners, clip_rho_min=cfg.clip_rho_min, clip_w_max=cfg.clip_w_max)
    except FitError as exc:
        raise FitError(f"rotation 0, nuisance fold: {exc}") from exc
    b = b.with_marginal(estimate_marginal_density(b.pi, d2.V))
    return pseudo_outcomes(b, InitialEstimate(b.tau, d2.V), d2, folds.indices(1))
