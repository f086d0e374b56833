"""Nuisance components: outcome regressions, label propensity, treatment densities.

Every fitted nuisance is a *component*: an immutable object evaluated as
``comp(a, Z)`` on a vector of treatments and a matching matrix of
covariates (``X = (V, S)`` for the outcome and label models, ``V`` for
``tau`` and the treatment density). Components also expose two
aggregate evaluations used by the estimator,

* ``average_over(a, Z)`` -- ``mean_j comp(a_i, Z_j)`` for each ``a_i``;
* ``weighted_cross(t, W, Z)`` -- ``sum_k W[l, k] comp(t_k, Z_i)`` for each
  weight row ``l`` and covariate row ``i``.

The base class evaluates these by brute force over pairs; linear models
override them with exact factorized forms.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import _backend
from .data import Dataset
from .errors import FitError

RIDGE = 1e-10
DENSITY_FLOOR = 1e-12
DEFAULT_CLIP_RHO_MIN = 0.01
DEFAULT_CLIP_W_MAX = 50.0
_PAIR_BUDGET = 4_000_000


def expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def normal_pdf(x, mean=0.0, sd=1.0):
    z = (np.asarray(x, dtype=float) - mean) / sd
    return np.exp(-0.5 * z * z) / (sd * math.sqrt(2.0 * math.pi))


# ---------------------------------------------------------------------------
# feature maps
# ---------------------------------------------------------------------------

def _cov_rows(Z, n_cov: int) -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 2 and Z.shape[1] == n_cov:
        return Z
    return Z.reshape(-1, n_cov)


@dataclass(frozen=True)
class FeatureMap:
    """Basis expansion of ``(a, z)`` built from terms ``a**power * z[col]``.

    ``terms`` is a tuple of ``(power, col)`` pairs where ``col`` is a covariate
    column index or ``None`` for the constant 1.
    """

    n_cov: int
    terms: tuple[tuple[int, int | None], ...]

    @classmethod
    def standard(cls, n_cov: int, *, include_a: bool = True, quadratic_a: bool = False,
                 interactions: Sequence[int] = ()) -> "FeatureMap":
        terms: list[tuple[int, int | None]] = [(0, None)]
        terms += [(0, j) for j in range(n_cov)]
        if include_a:
            terms.append((1, None))
            terms += [(1, int(j)) for j in interactions]
            if quadratic_a:
                terms.append((2, None))
        return cls(n_cov, tuple(terms))

    @property
    def size(self) -> int:
        return len(self.terms)

    @property
    def powers(self) -> np.ndarray:
        return np.array([p for p, _ in self.terms], dtype=float)

    def cov_part(self, Z: np.ndarray) -> np.ndarray:
        Z = _cov_rows(Z, self.n_cov)
        cols = [np.ones(Z.shape[0]) if c is None else Z[:, c] for _, c in self.terms]
        return np.column_stack(cols) if cols else np.zeros((Z.shape[0], 0))

    def a_part(self, a: np.ndarray) -> np.ndarray:
        return np.asarray(a, dtype=float)[:, None] ** self.powers[None, :]

    def __call__(self, a, Z) -> np.ndarray:
        a = np.atleast_1d(np.asarray(a, dtype=float))
        return self.a_part(a) * self.cov_part(Z)

    def names(self, cov_names: Sequence[str], a_name: str = "A") -> list[str]:
        out = []
        for p, c in self.terms:
            parts = ([a_name if p == 1 else f"{a_name}^{p}"] if p else []) + ([cov_names[c]] if c is not None else [])
            out.append("*".join(parts) or "1")
        return out


def outcome_feature_maps(p: int, q: int, quadratic_a: bool = True,
                         interactions: Sequence[int] | None = None) -> tuple[FeatureMap, FeatureMap]:
    """Feature maps for the outcome model on ``X=(V,S)`` and ``tau`` on ``V``.

    ``interactions`` lists the ``V`` columns that interact with the treatment
    (default: all of them). Setting ``quadratic_a=False`` drops the ``a**2``
    term from both maps.
    """
    inter = tuple(range(p)) if interactions is None else tuple(interactions)
    mu_map = FeatureMap.standard(p + q, quadratic_a=quadratic_a, interactions=inter)
    tau_map = FeatureMap.standard(p, quadratic_a=quadratic_a, interactions=inter)
    return mu_map, tau_map


def propensity_feature_map(d: int) -> FeatureMap:
    return FeatureMap.standard(d)


def density_feature_map(p: int) -> FeatureMap:
    return FeatureMap.standard(p, include_a=False)


# ---------------------------------------------------------------------------
# components
# ---------------------------------------------------------------------------

def _as_rows(Z, n: int) -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z.reshape(n, -1) if n else Z.reshape(0, 0)
    return Z


class Component:
    """Fitted nuisance function of ``(a, z)``.

    ``factorized`` is True when :meth:`weighted_cross` is exact and cheap
    (no pairwise evaluation).
    """

    factorized = False

    def __call__(self, a, Z) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def average_over(self, a, Z) -> np.ndarray:
        a = np.atleast_1d(np.asarray(a, dtype=float))
        Z = np.asarray(Z, dtype=float)
        r = Z.shape[0]
        if r == 0:
            raise ValueError("cannot average over an empty set of rows")
        out = np.empty(a.shape[0])
        step = max(1, _PAIR_BUDGET // r)
        for s in range(0, a.shape[0], step):
            blk = a[s:s + step]
            vals = self(np.repeat(blk, r), np.tile(Z, (blk.shape[0], 1)))
            out[s:s + step] = vals.reshape(blk.shape[0], r).mean(axis=1)
        return out

    def weighted_cross(self, t, W, Z) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        W = np.atleast_2d(np.asarray(W, dtype=float))
        Z = np.asarray(Z, dtype=float)
        r = Z.shape[0]
        out = np.zeros((W.shape[0], r))
        keep = np.flatnonzero(np.any(W != 0.0, axis=0))
        if keep.size == 0:
            return out
        t, W = t[keep], W[:, keep]
        step = max(1, _PAIR_BUDGET // max(t.shape[0], 1))
        for s in range(0, r, step):
            rows = Z[s:s + step]
            m = rows.shape[0]
            vals = self(np.tile(t, m), np.repeat(rows, t.shape[0], axis=0)).reshape(m, t.shape[0])
            out[:, s:s + step] = W @ vals.T
        return out

    def shifted(self, delta: float) -> "Component":
        return ShiftedComponent(self, float(delta))


@dataclass(frozen=True)
class LinearComponent(Component):
    """``features(a, z) @ coef``."""

    features: FeatureMap
    coef: np.ndarray
    factorized = True

    def __call__(self, a, Z):
        a = np.atleast_1d(np.asarray(a, dtype=float))
        return self.features(a, _as_rows(Z, a.shape[0])) @ self.coef

    def average_over(self, a, Z):
        a = np.atleast_1d(np.asarray(a, dtype=float))
        cm = self.features.cov_part(Z).mean(axis=0)
        return self.features.a_part(a) @ (self.coef * cm)

    def weighted_cross(self, t, W, Z):
        W = np.atleast_2d(np.asarray(W, dtype=float))
        M = W @ self.features.a_part(np.asarray(t, dtype=float))
        return (M * self.coef) @ self.features.cov_part(Z).T

    def shifted(self, delta):
        try:
            k = self.features.terms.index((0, None))
        except ValueError:
            return ShiftedComponent(self, float(delta))
        coef = np.array(self.coef, dtype=float)
        coef[k] += delta
        return LinearComponent(self.features, coef)


@dataclass(frozen=True)
class ShiftedComponent(Component):
    base: Component
    delta: float

    @property
    def factorized(self):
        return self.base.factorized

    def __call__(self, a, Z):
        return self.base(a, Z) + self.delta

    def average_over(self, a, Z):
        return self.base.average_over(a, Z) + self.delta

    def weighted_cross(self, t, W, Z):
        W = np.atleast_2d(np.asarray(W, dtype=float))
        return self.base.weighted_cross(t, W, Z) + self.delta * W.sum(axis=1)[:, None]


@dataclass(frozen=True)
class ConstantComponent(Component):
    value: float
    factorized = True

    def __call__(self, a, Z):
        return np.full(np.atleast_1d(a).shape[0], float(self.value))

    def average_over(self, a, Z):
        return self(a, Z)

    def weighted_cross(self, t, W, Z):
        W = np.atleast_2d(np.asarray(W, dtype=float))
        return np.repeat(self.value * W.sum(axis=1)[:, None], np.asarray(Z).shape[0], axis=1)


@dataclass(frozen=True)
class LogisticComponent(Component):
    """``expit(features(a, z) @ coef)``."""

    features: FeatureMap
    coef: np.ndarray

    def __call__(self, a, Z):
        a = np.atleast_1d(np.asarray(a, dtype=float))
        return expit(self.features(a, _as_rows(Z, a.shape[0])) @ self.coef)


@dataclass(frozen=True)
class LogitShiftedComponent(Component):
    """Probability component with ``delta`` added on the logit scale."""

    base: Component
    delta: float

    def __call__(self, a, Z):
        p = np.clip(self.base(a, Z), 1e-15, 1 - 1e-15)
        return expit(logit(p) + self.delta)


@dataclass(frozen=True)
class GaussianDensity(Component):
    """Conditional density ``N(a; mean_features(z) @ coef, sd**2)``."""

    mean_features: FeatureMap
    coef: np.ndarray
    sd: float

    def mean(self, Z) -> np.ndarray:
        Z = _cov_rows(Z, self.mean_features.n_cov)
        return self.mean_features.cov_part(Z) @ self.coef

    def __call__(self, a, Z):
        a = np.atleast_1d(np.asarray(a, dtype=float))
        return normal_pdf(a, self.mean(_as_rows(Z, a.shape[0])), self.sd)

    def average_over(self, a, Z):
        a = np.atleast_1d(np.asarray(a, dtype=float))
        return _backend.gauss_average_density(a, np.ascontiguousarray(self.mean(Z)), self.sd)

    def shifted(self, delta):
        """Density with the conditional mean moved by ``delta``."""
        coef = np.array(self.coef, dtype=float)
        coef[self.mean_features.terms.index((0, None))] += delta
        return GaussianDensity(self.mean_features, coef, self.sd)


class Marginal:
    """Marginal treatment density ``f(a)``."""

    def __call__(self, a) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def translated(self, delta: float) -> "Marginal":
        return TranslatedMarginal(self, float(delta))


@dataclass(frozen=True)
class NormalMarginal(Marginal):
    mean: float
    var: float

    def __call__(self, a):
        return normal_pdf(np.atleast_1d(a), self.mean, math.sqrt(self.var))

    def translated(self, delta):
        return NormalMarginal(self.mean + delta, self.var)


@dataclass(frozen=True)
class TranslatedMarginal(Marginal):
    base: Marginal
    delta: float

    def __call__(self, a):
        return self.base(np.atleast_1d(np.asarray(a, dtype=float)) - self.delta)


@dataclass(frozen=True, eq=False)
class MarginalDensity(Marginal):
    """``f(a) = mean_j pi(a | V_j)`` over a captured fold of covariates."""

    pi: Component
    V: np.ndarray

    def __post_init__(self):
        V = np.array(self.V, dtype=float, copy=True)
        if V.shape[0] == 0:
            raise ValueError("marginal density needs a non-empty fold")
        V.setflags(write=False)
        object.__setattr__(self, "V", V)

    def __call__(self, a):
        return self.pi.average_over(np.atleast_1d(np.asarray(a, dtype=float)), self.V)


@dataclass(frozen=True)
class StabilizedWeight(Component):
    """``w(a, v) = min(f(a) / max(pi(a|v), 1e-12), cap)``."""

    f: Marginal
    pi: Component
    cap: float = DEFAULT_CLIP_W_MAX

    def __call__(self, a, V):
        a = np.atleast_1d(np.asarray(a, dtype=float))
        return self.from_values(self.f(a), self.pi(a, V))

    def from_values(self, f_vals, pi_vals):
        return np.minimum(np.asarray(f_vals) / np.maximum(pi_vals, DENSITY_FLOOR), self.cap)


# ---------------------------------------------------------------------------
# bundle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NuisanceBundle:
    """All nuisance estimates needed by the pseudo-outcome.

    ``rho`` is clipped to ``[clip_rho_min, 1]`` and the stabilized weight
    capped at ``clip_w_max`` whenever they are evaluated through the bundle.
    ``f`` may be left unset until a marginal density is attached with
    :meth:`with_marginal`.
    """

    mu: Component
    tau: Component
    rho: Component
    pi: Component
    f: Marginal | None = None
    clip_rho_min: float = DEFAULT_CLIP_RHO_MIN
    clip_w_max: float = DEFAULT_CLIP_W_MAX
    info: dict = field(default_factory=dict, compare=False)

    def with_marginal(self, f: Marginal) -> "NuisanceBundle":
        return replace(self, f=f)

    @property
    def w(self) -> StabilizedWeight:
        if self.f is None:
            raise ValueError("bundle has no marginal density; call with_marginal first")
        return StabilizedWeight(self.f, self.pi, self.clip_w_max)

    def rho_at(self, a, X) -> np.ndarray:
        return np.clip(self.rho(a, X), self.clip_rho_min, 1.0)

    def w_at(self, a, V) -> np.ndarray:
        return self.w(a, V)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def _informative_columns(design: np.ndarray, features: FeatureMap) -> np.ndarray:
    """Indices of columns to keep: the intercept plus non-constant columns."""
    keep = []
    for k, term in enumerate(features.terms):
        col = design[:, k]
        if term == (0, None) or (col.size and np.ptp(col) > 0.0):
            keep.append(k)
    return np.asarray(keep, dtype=int)


def least_squares(design: np.ndarray, y: np.ndarray, features: FeatureMap | None = None,
                  what: str = "regression") -> np.ndarray:
    """Ridge-guarded normal-equation least squares.

    Constant non-intercept columns are dropped (coefficient 0). Raises
    :class:`FitError` if there are fewer than ``k+1`` rows or the design is
    rank deficient.
    """
    n, k_all = design.shape
    keep = _informative_columns(design, features) if features is not None else np.arange(k_all)
    Xd = design[:, keep]
    k = Xd.shape[1]
    if n < k + 1:
        raise FitError(f"{what}: need at least {k + 1} rows for {k} features, got {n}")
    if np.linalg.matrix_rank(Xd) < k:
        raise FitError(f"{what}: design matrix is rank deficient")
    G = Xd.T @ Xd
    G[np.diag_indices(k)] += RIDGE * max(np.trace(G) / k, 1.0)
    beta = np.linalg.solve(G, Xd.T @ y)
    coef = np.zeros(k_all)
    coef[keep] = beta
    return coef


def fit_outcome_regression(data: Dataset, features: FeatureMap) -> LinearComponent:
    """Least-squares fit of ``Y`` on ``features(A, X)`` over labeled rows."""
    lab = np.flatnonzero(data.R == 1)
    if lab.size == 0:
        raise FitError("outcome regression: no labeled rows")
    X = data.X[lab]
    design = features(data.A[lab], X)
    return LinearComponent(features, least_squares(design, data.Y[lab], features, "outcome regression"))


def fit_tau(data: Dataset, mu: Component, features: FeatureMap) -> LinearComponent:
    """Regress ``mu(A_i, X_i)`` on ``features(A, V)`` using every row."""
    target = mu(data.A, data.X)
    design = features(data.A, data.V)
    return LinearComponent(features, least_squares(design, target, features, "tau regression"))


def fit_label_propensity(data: Dataset, features: FeatureMap, max_iter: int = 100,
                         tol: float = 1e-8) -> LogisticComponent:
    """Logistic regression of ``R`` on ``features(A, X)`` by Newton's method."""
    R = data.R.astype(float)
    n1 = int(R.sum())
    if n1 == 0 or n1 == data.n:
        raise FitError("label propensity: both labeled and unlabeled rows are required")
    design_all = features(data.A, data.X)
    keep = _informative_columns(design_all, features)
    D = design_all[:, keep]
    n, k = D.shape
    if np.linalg.matrix_rank(D) < k:
        raise FitError("label propensity: design matrix is rank deficient")
    beta = np.zeros(k)
    icpt = [j for j, kk in enumerate(keep) if features.terms[kk] == (0, None)]
    if icpt:
        beta[icpt[0]] = float(logit(n1 / n))
    for _ in range(max_iter):
        prob = expit(D @ beta)
        grad = D.T @ (R - prob) / n
        if np.max(np.abs(grad)) < tol:
            break
        H = (D * (prob * (1 - prob))[:, None]).T @ D / n
        H[np.diag_indices(k)] += RIDGE
        beta = beta + np.linalg.solve(H, grad)
        if not np.all(np.isfinite(beta)) or np.max(np.abs(beta)) > 50.0:
            raise FitError("label propensity: coefficients diverge (complete separation?); "
                           "use simpler features or rely on clipping")
    else:
        raise FitError(f"label propensity: Newton iterations did not converge in {max_iter} steps")
    coef = np.zeros(features.size)
    coef[keep] = beta
    return LogisticComponent(features, coef)


def fit_conditional_density(data: Dataset, features: FeatureMap) -> GaussianDensity:
    """Gaussian conditional density of ``A`` with mean linear in ``features(V)``."""
    design = features.cov_part(data.V)
    k = design.shape[1]
    if data.n < k + 2:
        raise FitError(f"treatment density: need at least {k + 2} rows, got {data.n}")
    coef = least_squares(design, data.A, features, "treatment density")
    resid = data.A - design @ coef
    var = float(np.mean(resid ** 2))
    # relative test: the ridge guard leaves residuals of order 1e-10 * scale
    if var <= 1e-16 * float(np.mean((data.A - data.A.mean()) ** 2)) or var <= 1e-300:
        raise FitError("treatment density: zero residual variance (degenerate density)")
    return GaussianDensity(features, coef, math.sqrt(var))


def estimate_marginal_density(pi: Component, V_fold: np.ndarray) -> MarginalDensity:
    """``f(a) = mean_j pi(a | V_j)`` over the rows of ``V_fold``."""
    V_fold = np.asarray(V_fold, dtype=float)
    if V_fold.shape[0] == 0:
        raise ValueError("marginal density needs a non-empty fold")
    return MarginalDensity(pi, V_fold)


def make_stabilized_weight(f: Marginal, pi: Component, cap: float = DEFAULT_CLIP_W_MAX) -> StabilizedWeight:
    if not cap > 0:
        raise ValueError("weight cap must be positive")
    return StabilizedWeight(f, pi, float(cap))


def oracle_noisy_bundle(truth: NuisanceBundle, alpha: float, n: int,
                        rng: np.random.Generator) -> NuisanceBundle:
    """Perturb true nuisances by errors of order ``n**-alpha``.

    Four constants ``eps_k ~ N(n**-alpha, n**-2alpha)`` are drawn once. The
    treatment-density mean moves by ``eps_1`` (and the marginal with it),
    ``eps_2`` and ``eps_3`` are added to ``mu`` and ``tau``, and ``eps_4``
    to the logit of ``rho``.
    """
    if not alpha > 0 or n < 1:
        raise ValueError("alpha must be positive and n >= 1")
    scale = float(n) ** (-alpha)
    eps = rng.normal(scale, scale, size=4)
    rho = truth.rho
    if isinstance(rho, ConstantComponent):
        rho_hat: Component = ConstantComponent(float(expit(logit(rho.value) + eps[3])))
    else:
        rho_hat = LogitShiftedComponent(rho, float(eps[3]))
    return replace(
        truth,
        mu=truth.mu.shifted(eps[1]),
        tau=truth.tau.shifted(eps[2]),
        rho=rho_hat,
        pi=truth.pi.shifted(eps[0]),
        f=None if truth.f is None else truth.f.translated(float(eps[0])),
        info={**truth.info, "eps": tuple(float(e) for e in eps)},
    )


# ---------------------------------------------------------------------------
# pluggable learners
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NuisanceLearners:
    """Fitting routines used by :func:`fit_nuisances`.

    Each entry may be replaced by any callable with the same signature that
    returns a :class:`Component` (for example a wrapper around another
    regression library).
    """

    outcome: Callable[[Dataset, FeatureMap], Component] = fit_outcome_regression
    tau: Callable[[Dataset, Component, FeatureMap], Component] = fit_tau
    propensity: Callable[[Dataset, FeatureMap], Component] = fit_label_propensity
    density: Callable[[Dataset, FeatureMap], Component] = fit_conditional_density


def fit_nuisances(data: Dataset, *, quadratic_a: bool = True, interactions: Sequence[int] | None = None,
                  learners: NuisanceLearners | None = None, constant_rho: float | None = None,
                  clip_rho_min: float = DEFAULT_CLIP_RHO_MIN,
                  clip_w_max: float = DEFAULT_CLIP_W_MAX) -> NuisanceBundle:
    """Fit ``mu``, ``tau``, ``rho`` and ``pi`` on one fold.

    The marginal density is left unset. When every row is labeled the label
    propensity is the constant 1; ``constant_rho`` forces a constant value.
    """
    learners = learners or NuisanceLearners()
    mu_map, tau_map = outcome_feature_maps(data.p, data.q, quadratic_a, interactions)
    mu = learners.outcome(data, mu_map)
    tau = learners.tau(data, mu, tau_map)
    if constant_rho is not None:
        rho: Component = ConstantComponent(float(constant_rho))
    elif data.n_labeled == data.n:
        rho = ConstantComponent(1.0)
    else:
        rho = learners.propensity(data, propensity_feature_map(data.p + data.q))
    pi = learners.density(data, density_feature_map(data.p))
    return NuisanceBundle(mu, tau, rho, pi, None, clip_rho_min, clip_w_max)
