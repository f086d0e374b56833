"""Gaussian data-generating process and the Monte Carlo experiment harness.

Design
------
``V ~ N(0, I_4)``, ``A | V ~ N(lambda(V), 1)`` with
``lambda(V) = 1 + 0.2 V1 + 0.2 V2 - 0.2 V3 + 0.3 V4``, labels ``R ~ Bern(0.5)``
and ``Y | A, X ~ N(mu(A, X), 1)`` with

    mu = 1 + 0.1 S1 - 0.1 S2 + 0.2 V1 + 0.2 V2 + 0.3 V3 - 0.1 V4
           + A (1 - 0.1 V1 + 0.1 V3) - A^2.

Surrogates are ``S ~ N(0, I_2)`` (``independent``) or
``S ~ N((V1 + A, V2 - A), I_2)`` (``dependent``). The true curve is
``1 + a - a^2`` for the independent design and ``1 + 1.2 a - a^2`` for the
dependent one. The marginal of ``A`` is ``N(1, 1.21)`` in both.

Replication ``m`` at sample size ``n`` draws from
``SeedSequence(seed, spawn_key=(n, m))``, so different nuisance-error rates
and estimators share the same data (common random numbers) and results do
not depend on how replications are scheduled.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import _backend
from .data import Dataset
from .errors import (
    BandwidthSelectionError,
    DegenerateWindowError,
    DoseDRError,
    SimulationError,
)
from .estimator import (
    EstimationConfig,
    crossfit_plugin,
    dr_estimate,
    pseudo_outcomes,
    split_sample_estimate,
    supervised_estimate,
    z_quantile,
)
from .nuisance import (
    ConstantComponent,
    GaussianDensity,
    LinearComponent,
    NormalMarginal,
    NuisanceBundle,
    density_feature_map,
    normal_pdf,
    oracle_noisy_bundle,
    outcome_feature_maps,
)
from .smoother import get_kernel, local_linear_at

VARIANTS = ("independent", "dependent")
ESTIMATORS = ("plugin", "dr", "oracle", "supervised")
LAMBDA_COEF = np.array([1.0, 0.2, 0.2, -0.2, 0.3])
A_MEAN, A_VAR = 1.0, 1.21
MAX_FAIL_RATE = 0.05
RESULT_COLUMNS = ("n", "alpha", "estimator", "dgp_variant", "M", "rmse", "bias", "sd",
                  "mean_se", "coverage", "fail_count", "seed", "outcome_model")


def _variant(v: str) -> str:
    v = {"independent_surrogates": "independent", "dependent_surrogates": "dependent"}.get(v, v)
    if v not in VARIANTS:
        raise ValueError(f"unknown design variant {v!r}")
    return v


def true_theta(a, variant: str = "independent"):
    """True dose-response curve."""
    a = np.asarray(a, dtype=float)
    slope = 1.2 if _variant(variant) == "dependent" else 1.0
    out = 1.0 + slope * a - a * a
    return float(out) if out.ndim == 0 else out


def true_theta_second_derivative(variant: str = "independent") -> float:
    _variant(variant)
    return -2.0


def true_bundle(variant: str = "independent", label_prob: float = 0.5,
                surrogate_scale: float = 1.0) -> NuisanceBundle:
    """Exact nuisances of the design as fitted-component objects."""
    variant = _variant(variant)
    mu_map, tau_map = outcome_feature_maps(4, 2, True)
    s = 0.1 * surrogate_scale
    # mu over X=(V1..V4, S1, S2): 1, V, S, A, A*V, A^2
    mu_coef = np.array([1.0, 0.2, 0.2, 0.3, -0.1, s, -s, 1.0, -0.1, 0.0, 0.1, 0.0, -1.0])
    # tau over V: 1, V, A, A*V, A^2  (surrogate mean substituted)
    if variant == "independent":
        tau_coef = np.array([1.0, 0.2, 0.2, 0.3, -0.1, 1.0, -0.1, 0.0, 0.1, 0.0, -1.0])
    else:
        tau_coef = np.array([1.0, 0.2 + s, 0.2 - s, 0.3, -0.1, 1.0 + 2 * s, -0.1, 0.0, 0.1, 0.0, -1.0])
    return NuisanceBundle(
        mu=LinearComponent(mu_map, mu_coef),
        tau=LinearComponent(tau_map, tau_coef),
        rho=ConstantComponent(float(label_prob)),
        pi=GaussianDensity(density_feature_map(4), LAMBDA_COEF.copy(), 1.0),
        f=NormalMarginal(A_MEAN, A_VAR),
        info={"variant": variant, "label_prob": label_prob, "surrogate_scale": surrogate_scale},
    )


def dgp_sample(n: int, variant: str = "independent", rng: np.random.Generator | int | None = None, *,
               label_prob: float = 0.5, surrogate_scale: float = 1.0) -> tuple[Dataset, NuisanceBundle]:
    """Draw ``n`` rows and return them with the exact nuisances.

    ``surrogate_scale`` multiplies the surrogate coefficients of the outcome
    model (1 reproduces the reference design).
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    truth = true_bundle(variant, label_prob, surrogate_scale)
    V = rng.standard_normal((n, 4))
    A = V @ LAMBDA_COEF[1:] + LAMBDA_COEF[0] + rng.standard_normal(n)
    S = rng.standard_normal((n, 2))
    if truth.info["variant"] == "dependent":
        S += np.column_stack([V[:, 0] + A, V[:, 1] - A])
    R = (rng.random(n) < label_prob).astype(np.int8)
    X = np.hstack([V, S])
    Y = truth.mu(A, X) + rng.standard_normal(n)
    Y = np.where(R == 1, Y, np.nan)
    return Dataset(V, S, A, Y, R), truth


def true_pseudo_outcomes(data: Dataset, truth: NuisanceBundle) -> np.ndarray:
    """Pseudo-outcomes with exact nuisances and the exact curve as initial estimate."""
    mu = truth.mu(data.A, data.X)
    tau = truth.tau(data.A, data.V)
    rho = truth.rho_at(data.A, data.X)
    w = truth.w(data.A, data.V)
    resid = np.where(data.R == 1, np.nan_to_num(data.Y - mu), 0.0)
    return (resid / rho + mu - tau) * w + true_theta(data.A, truth.info["variant"])


ROBUSTNESS_ARMS = ("outcome", "weights", "both")


def robustness_arm(arm: str, variant: str = "independent", pi_shift: float = 0.5,
                   rho_value: float = 0.7, mu_shift: float = 1.0) -> tuple[NuisanceBundle, Callable]:
    """Nuisances with one arm distorted, plus the matching initial estimate.

    ``arm="outcome"`` keeps the outcome models exact and distorts the
    treatment density mean (by ``pi_shift``) and the label propensity (set to
    ``rho_value``). ``arm="weights"`` keeps density and propensity exact and
    shifts ``mu`` and ``tau`` by ``mu_shift``. ``arm="both"`` is exact. The
    initial estimate is the covariate average of the returned ``tau``.
    """
    truth = true_bundle(variant)
    if arm == "outcome":
        b = replace(truth, pi=truth.pi.shifted(pi_shift), f=truth.f.translated(pi_shift),
                    rho=ConstantComponent(float(rho_value)))
        shift = 0.0
    elif arm == "weights":
        b = replace(truth, mu=truth.mu.shifted(mu_shift), tau=truth.tau.shifted(mu_shift))
        shift = float(mu_shift)
    elif arm == "both":
        b, shift = truth, 0.0
    else:
        raise ValueError(f"arm must be one of {ROBUSTNESS_ARMS}")
    v = truth.info["variant"]
    return b, lambda a: true_theta(a, v) + shift


def robustness_regression(arm: str, n: int = 1_000_000, a: float = 1.0, h: float | None = None,
                          seed: int = 0, variant: str = "independent",
                          kernel="epanechnikov") -> tuple[float, float]:
    """Local linear regression at ``a`` of pseudo-outcomes built from :func:`robustness_arm`.

    Returns ``(estimate, se)`` where ``se`` is the heteroskedasticity-robust
    standard error ``sqrt(sum W_i^2 r_i^2)`` of the linear smoother. The
    default bandwidth is ``n**(-1/5)``.
    """
    h = float(n) ** -0.2 if h is None else float(h)
    data, _ = dgp_sample(n, variant, np.random.default_rng(seed))
    b, theta0 = robustness_arm(arm, variant)
    po = pseudo_outcomes(b, theta0, data)
    fit = local_linear_at(po.A, po.phi, [a], h, kernel)
    S0, S1, S2 = fit.sums[0, :3]
    u = (po.A - a) / h
    W = get_kernel(kernel)(u) / h * (S2 - S1 * u) / (S0 * S2 - S1 * S1)
    r = po.phi - (fit.estimate[0] + fit.slope[0] * u)
    return float(fit.estimate[0]), float(np.sqrt(np.sum(W * W * r * r)))


# ---------------------------------------------------------------------------
# smoothed target
# ---------------------------------------------------------------------------

def _local_linear_from_sums(S0, S1, S2, T0, T1):
    return (S2 * T0 - S1 * T1) / (S0 * S2 - S1 * S1)


def smoothed_target(a: float, h: float, variant: str = "independent", kernel="epanechnikov",
                    nodes: int = 400) -> float:
    """Population local linear fit of the true curve at ``a`` (Gauss-Legendre quadrature)."""
    ks = get_kernel(kernel)
    x, wq = np.polynomial.legendre.leggauss(nodes)
    u = x * ks.radius if ks.compact else x * 12.0
    wq = wq * (ks.radius if ks.compact else 12.0)
    t = a + h * u
    base = wq * ks(u) * normal_pdf(t, A_MEAN, math.sqrt(A_VAR))
    th = true_theta(t, variant)
    S0, S1, S2 = base.sum(), (base * u).sum(), (base * u * u).sum()
    T0, T1 = (base * th).sum(), (base * u * th).sum()
    return float(_local_linear_from_sums(S0, S1, S2, T0, T1))


def smoothed_target_oracle(a: float, hs, variant: str = "independent", kernel="epanechnikov",
                           draws: int = 10_000_000, seed: int = 20240611,
                           chunk: int = 1_000_000) -> np.ndarray:
    """Local linear fit at ``a`` of true pseudo-outcomes over a very large sample.

    Kernel sums are accumulated chunk by chunk for every bandwidth in
    ``hs``, so one pass serves the whole list.
    """
    ks = get_kernel(kernel)
    hs = np.atleast_1d(np.asarray(hs, dtype=float))
    acc = np.zeros((hs.size, 5))
    ss = np.random.SeedSequence(seed)
    n_chunks = -(-int(draws) // chunk)
    for c, child in enumerate(ss.spawn(n_chunks)):
        m = min(chunk, int(draws) - c * chunk)
        data, truth = dgp_sample(m, variant, np.random.default_rng(child))
        phi = true_pseudo_outcomes(data, truth)
        order = np.argsort(data.A, kind="stable")
        As, ps = np.ascontiguousarray(data.A[order]), np.ascontiguousarray(phi[order])
        for j, h in enumerate(hs):
            mom = _backend.window_moments(As, ps, np.array([a], dtype=float), float(h), ks.id, ks.radius)
            acc[j] += mom[0, :5] * h  # undo the 1/h so sums are comparable across chunks
    return _local_linear_from_sums(*(acc[:, k] for k in range(5)))


def variance_gap(a: float, n: int, h: float, kernel="epanechnikov", label_prob: float = 0.5,
                 surrogate_scale: float = 1.0, draws: int = 1_000_000, seed: int = 7,
                 variant: str = "independent") -> float:
    """Predicted variance difference between supervised and semi-supervised estimates.

    ``(1/rho - 1) E[Var(mu | A, V) w^2 | A = a] int K^2 / (n h f(a))`` with the
    conditional expectation computed by Monte Carlo over ``V``.
    """
    ks = get_kernel(kernel)
    truth = true_bundle(variant, label_prob, surrogate_scale)
    rng = np.random.default_rng(seed)
    V = rng.standard_normal((draws, 4))
    var_mu = 2.0 * (0.1 * surrogate_scale) ** 2  # unit-variance surrogates given (A, V)
    pi = truth.pi(np.full(draws, a), V)
    f = float(truth.f(a)[0])
    # E[g(V) | A=a] = E_V[g(V) pi(a|V)] / f(a)
    w = f / pi
    cond = float(np.mean(var_mu * w * w * pi)) / f
    return (1.0 / label_prob - 1.0) * cond * ks.int_K2 / (n * h * f)


def conditional_w2(a: float = 1.0) -> float:
    """Closed form of ``E[w^2 | A=a]`` for the design."""
    s2 = A_VAR - 1.0
    m = a - A_MEAN
    f = float(normal_pdf(a, A_MEAN, math.sqrt(A_VAR)))
    e_inv_pi = math.sqrt(2 * math.pi) / math.sqrt(1 - s2) * math.exp(m * m / (2 * (1 - s2)))
    return f * e_inv_pi


# ---------------------------------------------------------------------------
# experiment specification and results
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimulationSpec:
    """One Monte Carlo experiment.

    ``alpha`` is a tuple of nuisance-error exponents (synthetic-noise mode) or
    the string ``"fit"`` (nuisances fitted by the built-in parametric
    learners). ``bandwidth`` may be ``None`` (cross-validated), a number, or
    ``"rule"`` for ``n**-0.2 * range(A) / 2``.
    """

    n: tuple[int, ...] = (500,)
    alpha: tuple[float, ...] | str = (0.1,)
    M: int = 100
    variant: str = "independent"
    estimators: tuple[str, ...] = ("plugin", "dr")
    misspecify_outcome: bool = False
    seed: int = 0
    a_star: float = 1.0
    kernel: str = "epanechnikov"
    bandwidth: float | str | None = None
    label_prob: float = 0.5
    surrogate_scale: float = 1.0
    clip_rho_min: float = 0.01
    clip_w_max: float = 50.0
    rotate: bool = True
    ci_level: float = 0.95
    grid_lo: float = 0.05
    grid_hi: float = 1.0
    grid_points: int = 20
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "n", tuple(int(x) for x in np.atleast_1d(self.n)))
        if isinstance(self.alpha, str):
            if self.alpha != "fit":
                raise ValueError("alpha must be numbers or 'fit'")
        else:
            object.__setattr__(self, "alpha", tuple(float(x) for x in np.atleast_1d(self.alpha)))
            if any(not x > 0 for x in self.alpha):
                raise ValueError("alpha must be positive")
        object.__setattr__(self, "variant", _variant(self.variant))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if any(x < 50 for x in self.n):
            raise ValueError("n must be at least 50")
        if self.M < 1:
            raise ValueError("M must be at least 1")
        bad = set(self.estimators) - set(ESTIMATORS)
        if bad:
            raise ValueError(f"unknown estimators {sorted(bad)}")
        if self.fit_mode and "oracle" in self.estimators:
            raise ValueError("the oracle estimator is only available with synthetic nuisance errors")
        if not self.fit_mode and "supervised" in self.estimators:
            raise ValueError("the supervised estimator needs fitted nuisances (alpha='fit')")
        if isinstance(self.bandwidth, str) and self.bandwidth != "rule":
            raise ValueError("bandwidth must be a number, 'rule' or None")
        get_kernel(self.kernel)

    @property
    def fit_mode(self) -> bool:
        return self.alpha == "fit"

    @property
    def outcome_model(self) -> str:
        return "misspecified" if self.misspecify_outcome else "correct"


@dataclass(frozen=True)
class ReplicationResult:
    """One estimator's output on one replication."""

    n: int
    alpha: float | str
    estimator: str
    m: int
    estimate: float
    se: float = math.nan
    ci_lower: float = math.nan
    ci_upper: float = math.nan
    bandwidth: float = math.nan
    target: float = math.nan
    failed: bool = False
    retried: bool = False
    error: str = ""
    rho_clipped: int = 0
    w_capped: int = 0

    @property
    def covered(self) -> bool | None:
        if math.isnan(self.se):
            return None
        return bool(self.ci_lower <= self.target <= self.ci_upper)


@dataclass
class SimulationResults:
    spec: SimulationSpec
    replications: list[ReplicationResult]
    table: list[dict] = field(default_factory=list)

    def estimates(self, n: int, alpha, estimator: str) -> np.ndarray:
        return np.array([r.estimate for r in self.select(n, alpha, estimator) if not r.failed])

    def select(self, n: int, alpha, estimator: str) -> list[ReplicationResult]:
        return [r for r in self.replications
                if r.n == n and r.alpha == alpha and r.estimator == estimator]

    def row(self, n: int, alpha, estimator: str, outcome_model: str | None = None) -> dict:
        for r in self.table:
            if (r["n"] == n and r["alpha"] == alpha and r["estimator"] == estimator
                    and (outcome_model is None or r["outcome_model"] == outcome_model)):
                return r
        raise KeyError((n, alpha, estimator, outcome_model))


def _fallback_h(n: int, A) -> float:
    return float(n) ** -0.2 * float(np.ptp(A)) / 2.0


def _config_for(spec: SimulationSpec, data: Dataset, fold_seed: int) -> EstimationConfig:
    bw = spec.bandwidth
    if bw == "rule":
        bw = _fallback_h(data.n, data.A)
    return EstimationConfig(
        kernel=spec.kernel, bandwidth=bw, clip_rho_min=spec.clip_rho_min, clip_w_max=spec.clip_w_max,
        rotate=spec.rotate, ci_level=spec.ci_level, seed=fold_seed, quadratic_a=not spec.misspecify_outcome,
        grid_lo=spec.grid_lo, grid_hi=spec.grid_hi, grid_points=spec.grid_points,
    )


def _with_retry(fn: Callable[[EstimationConfig], object], cfg: EstimationConfig, data: Dataset):
    try:
        return fn(cfg), False
    except BandwidthSelectionError:
        return fn(replace(cfg, bandwidth=_fallback_h(data.n, data.A))), True


def _result_from(est, n, alpha, name, m, variant, kernel, retried=False) -> ReplicationResult:
    theta = float(est.theta_hat[0])
    se = float(est.se[0])
    h = float(est.bandwidth)
    target = smoothed_target(float(est.grid[0]), h, variant, kernel) if not math.isnan(h) else math.nan
    d = est.diagnostics
    return ReplicationResult(n, alpha, name, m, theta, se, float(est.ci_lower[0]), float(est.ci_upper[0]),
                             h, target, False, retried, "", int(d.get("rho_clipped", 0)),
                             int(d.get("w_capped", 0)))


def _failure(n, alpha, name, m, exc) -> ReplicationResult:
    return ReplicationResult(n, alpha, name, m, math.nan, failed=True,
                             error=f"{type(exc).__name__}: {exc}")


_CAUGHT = (DoseDRError, DegenerateWindowError, FloatingPointError, np.linalg.LinAlgError)


def replicate(spec: SimulationSpec, n: int, m: int) -> list[ReplicationResult]:
    """Run every (alpha, estimator) cell of replication ``m`` at sample size ``n``."""
    ss = np.random.SeedSequence(entropy=spec.seed, spawn_key=(n, m))
    data_ss, noise_ss, fold_ss = ss.spawn(3)
    data, truth = dgp_sample(n, spec.variant, np.random.default_rng(data_ss),
                             label_prob=spec.label_prob, surrogate_scale=spec.surrogate_scale)
    fold_seed = int(fold_ss.generate_state(1)[0])
    cfg = _config_for(spec, data, fold_seed)
    grid = np.array([spec.a_star])
    out: list[ReplicationResult] = []
    if spec.fit_mode:
        runners = {
            "plugin": lambda c: crossfit_plugin(data, c, grid),
            "dr": lambda c: dr_estimate(data, c, grid),
            "supervised": lambda c: supervised_estimate(data, c, grid),
        }
        for name in spec.estimators:
            try:
                est, retried = _with_retry(runners[name], cfg, data)
                out.append(_result_from(est, n, "fit", name, m, spec.variant, spec.kernel, retried))
            except _CAUGHT as exc:
                out.append(_failure(n, "fit", name, m, exc))
        return out
    theta_fn = lambda a: true_theta(a, spec.variant)  # noqa: E731
    for alpha in spec.alpha:
        # one noise stream per replication: errors for different alpha differ only in scale
        bundle = oracle_noisy_bundle(truth, alpha, n, np.random.default_rng(noise_ss))
        if "plugin" in spec.estimators:
            val = float(bundle.tau.average_over(grid, data.V)[0])
            out.append(ReplicationResult(n, alpha, "plugin", m, val))
        wanted = [e for e in spec.estimators if e in ("dr", "oracle")]
        if not wanted:
            continue
        oracle = (truth, theta_fn) if "oracle" in wanted else None
        try:
            res, retried = _with_retry(
                lambda c: split_sample_estimate(data, bundle, c, grid, fold_seed, oracle), cfg, data)
            for name in wanted:
                out.append(_result_from(res[name], n, alpha, name, m, spec.variant, spec.kernel, retried))
        except _CAUGHT as exc:
            out.extend(_failure(n, alpha, name, m, exc) for name in wanted)
    return out


def _replicate_star(args):
    return replicate(*args)


def run_replications(spec: SimulationSpec, progress: Callable[[str], None] | None = None) -> list[ReplicationResult]:
    """All replications of ``spec``, ordered by ``(n, m)`` regardless of ``threads``."""
    results: list[ReplicationResult] = []
    for n in spec.n:
        jobs = [(spec, n, m) for m in range(spec.M)]
        if spec.threads > 1:
            with ProcessPoolExecutor(max_workers=spec.threads) as ex:
                chunks = list(ex.map(_replicate_star, jobs, chunksize=max(1, spec.M // (4 * spec.threads))))
        else:
            chunks = [replicate(*j) for j in jobs]
        for c in chunks:
            results.extend(c)
        if progress is not None:
            alphas = ["fit"] if spec.fit_mode else spec.alpha
            for a in alphas:
                progress(f"n={n} alpha={a}: {spec.M} replications done")
    return results


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------

def rmse_summary(estimates, truth: float) -> dict:
    """RMSE, bias and SD (``ddof=1``) of a vector of estimates."""
    e = np.asarray(estimates, dtype=float)
    M = e.size
    err = e - truth
    return {
        "rmse": float(math.sqrt(np.mean(err * err))) if M else math.nan,
        "bias": float(np.mean(err)) if M else math.nan,
        "sd": float(np.std(e, ddof=1)) if M > 1 else math.nan,
        "M": M,
    }


def rmse_difference_se(est_a, est_b, truth: float) -> float:
    """Delta-method Monte Carlo SE of ``RMSE_a - RMSE_b`` for paired replications."""
    ea = (np.asarray(est_a, dtype=float) - truth) ** 2
    eb = (np.asarray(est_b, dtype=float) - truth) ** 2
    ra, rb = math.sqrt(ea.mean()), math.sqrt(eb.mean())
    d = ea / (2 * ra) - eb / (2 * rb)
    return float(np.std(d, ddof=1) / math.sqrt(d.size))


def summarize(spec: SimulationSpec, reps: Sequence[ReplicationResult]) -> list[dict]:
    """Results table rows, one per (n, alpha, estimator)."""
    theta = true_theta(spec.a_star, spec.variant)
    alphas = ["fit"] if spec.fit_mode else list(spec.alpha)
    rows = []
    for n in spec.n:
        for alpha in alphas:
            for name in spec.estimators:
                cell = [r for r in reps if r.n == n and r.alpha == alpha and r.estimator == name]
                ok = [r for r in cell if not r.failed]
                fails = len(cell) - len(ok)
                if cell and fails > MAX_FAIL_RATE * len(cell):
                    first = next(r.error for r in cell if r.failed)
                    raise SimulationError(f"{fails}/{len(cell)} replications failed for n={n}, "
                                          f"alpha={alpha}, {name}; first error: {first}")
                stats = rmse_summary([r.estimate for r in ok], theta)
                ses = [r.se for r in ok if not math.isnan(r.se)]
                cov = [r.covered for r in ok if r.covered is not None]
                rows.append({
                    "n": n, "alpha": alpha, "estimator": name, "dgp_variant": spec.variant,
                    "M": stats["M"], "rmse": stats["rmse"], "bias": stats["bias"], "sd": stats["sd"],
                    "mean_se": float(np.mean(ses)) if ses else math.nan,
                    "coverage": float(np.mean(cov)) if cov else math.nan,
                    "fail_count": fails, "seed": spec.seed, "outcome_model": spec.outcome_model,
                })
    return rows


def run_rmse_experiment(spec: SimulationSpec, progress=None) -> SimulationResults:
    reps = run_replications(spec, progress)
    return SimulationResults(spec, reps, summarize(spec, reps))


def run_misspecification_study(spec: SimulationSpec, progress=None) -> SimulationResults:
    """Fit-mode plug-in vs doubly robust, with correct and misspecified outcome models."""
    if not spec.fit_mode:
        raise ValueError("the misspecification study needs alpha='fit'")
    reps: list[ReplicationResult] = []
    table: list[dict] = []
    for bad in (False, True):
        s = replace(spec, misspecify_outcome=bad)
        r = run_replications(s, progress)
        # keep the two model variants apart in the replication list
        tag = s.outcome_model
        reps.extend(replace(x, error=x.error or "", estimator=f"{x.estimator}:{tag}") for x in r)
        table.extend(summarize(s, r))
    return SimulationResults(spec, reps, table)


def run_supervised_comparison(spec: SimulationSpec, progress=None) -> SimulationResults:
    """Fit-mode supervised (labeled rows only) vs semi-supervised doubly robust."""
    if not spec.fit_mode:
        raise ValueError("the supervised comparison needs alpha='fit'")
    s = replace(spec, estimators=tuple(dict.fromkeys(("supervised", "dr") + tuple(
        e for e in spec.estimators if e == "plugin"))))
    return run_rmse_experiment(s, progress)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_results_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(RESULT_COLUMNS)
        for r in rows:
            wr.writerow([_fmt(r[k]) for k in RESULT_COLUMNS])


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def replication_dicts(reps: Sequence[ReplicationResult]) -> list[dict]:
    return [asdict(r) for r in reps]


__all__ = [
    "SimulationSpec", "ReplicationResult", "SimulationResults", "dgp_sample", "true_bundle",
    "true_theta", "true_pseudo_outcomes", "smoothed_target", "smoothed_target_oracle",
    "variance_gap", "conditional_w2", "replicate", "run_replications", "run_rmse_experiment",
    "run_misspecification_study", "run_supervised_comparison", "rmse_summary",
    "rmse_difference_se", "summarize", "write_results_csv", "read_results_csv", "z_quantile",
    "robustness_arm", "robustness_regression",
]
