from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from dosedr.data import Dataset
from dosedr.errors import FitError
from dosedr.nuisance import (Component, ConstantComponent, FeatureMap, GaussianDensity,
                             LinearComponent, NormalMarginal, NuisanceBundle,
                             density_feature_map, estimate_marginal_density, fit_conditional_density,
                             fit_label_propensity, fit_nuisances, fit_outcome_regression, fit_tau,
                             least_squares, make_stabilized_weight, oracle_noisy_bundle,
                             outcome_feature_maps, propensity_feature_map)
from dosedr.simulation import dgp_sample, true_bundle


class TableComponent(Component):
    """Density whose value at the covariate row is read from the first column."""

    def __call__(self, a, Z):
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        return np.broadcast_to(Z[:, 0], np.broadcast_shapes(np.shape(a), (Z.shape[0],))).astype(float)


class ConstMarginal:
    def __init__(self, value):
        self.value = value

    def __call__(self, a):
        return np.full(np.shape(np.atleast_1d(a)), self.value, dtype=float)


def noiseless_sample(n=400, seed=0):
    data, truth = dgp_sample(n, rng=seed)
    Y = np.where(data.R == 1, truth.mu(data.A, data.X), np.nan)
    return Dataset(data.V, data.S, data.A, Y, data.R), truth


# ---------------------------------------------------------------- outcome model

def test_outcome_regression_recovers_design_coefficients():
    data, truth = noiseless_sample()
    mu_map, _ = outcome_feature_maps(4, 2)
    mu = fit_outcome_regression(data, mu_map)
    names = mu_map.names(["V1", "V2", "V3", "V4", "S1", "S2"])
    coef = dict(zip(names, mu.coef))
    assert coef["1"] == pytest.approx(1.0, abs=1e-8)
    assert coef["S1"] == pytest.approx(0.1, abs=1e-8)
    assert coef["S2"] == pytest.approx(-0.1, abs=1e-8)
    np.testing.assert_allclose([coef[f"V{j}"] for j in range(1, 5)], [0.2, 0.2, 0.3, -0.1], atol=1e-8)
    assert coef["A"] == pytest.approx(1.0, abs=1e-8)
    np.testing.assert_allclose([coef[f"A*V{j}"] for j in range(1, 5)], [-0.1, 0, 0.1, 0], atol=1e-8)
    assert coef["A^2"] == pytest.approx(-1.0, abs=1e-8)
    np.testing.assert_allclose(mu.coef, truth.mu.coef, atol=1e-8)


def test_outcome_regression_constant_outcome():
    data, _ = dgp_sample(200, rng=1)
    d = Dataset(data.V, data.S, data.A, np.where(data.R == 1, 3.25, np.nan), data.R)
    mu = fit_outcome_regression(d, outcome_feature_maps(4, 2)[0])
    np.testing.assert_allclose(mu(data.A, data.X), 3.25, atol=1e-8)


def test_outcome_regression_too_few_rows():
    V = np.arange(2.0)[:, None]
    d = Dataset(V, np.zeros((2, 0)), [0.0, 1.0], [1.0, 2.0])
    fm = FeatureMap.standard(1, quadratic_a=True, interactions=(0,))
    with pytest.raises(FitError):
        fit_outcome_regression(d, fm)


def test_rank_deficient_design_raises():
    V = np.c_[np.arange(10.0), 2 * np.arange(10.0)]
    d = Dataset(V, np.zeros((10, 0)), np.linspace(0, 1, 10) ** 2, np.arange(10.0))
    with pytest.raises(FitError, match="rank"):
        fit_outcome_regression(d, FeatureMap.standard(2))


# ---------------------------------------------------------------- tau

def test_tau_integrates_out_independent_surrogates():
    # Make the surrogate columns exactly orthogonal to the (A, V) design and
    # mean zero, so the projection of mu onto (A, V) features drops them.
    data, truth = dgp_sample(600, rng=4)
    _, tau_map = outcome_feature_maps(4, 2)
    B = tau_map(data.A, data.V)
    Q, _ = np.linalg.qr(B)
    S = data.S - Q @ (Q.T @ data.S)
    d = Dataset(data.V, S, data.A, data.Y, data.R)
    tau = fit_tau(d, truth.mu, tau_map)
    a = np.linspace(-1, 3, 7)
    v = np.random.default_rng(0).standard_normal((7, 4))
    expected = truth.mu(a, np.c_[v, np.zeros((7, 2))])
    np.testing.assert_allclose(tau(a, v), expected, atol=1e-8)
    np.testing.assert_allclose(tau.coef, truth.tau.coef, atol=1e-8)


def test_tau_of_surrogate_free_mu_is_restriction():
    data, _ = dgp_sample(300, rng=5)
    mu_map, tau_map = outcome_feature_maps(4, 2)
    coef = np.zeros(mu_map.size)
    coef[[0, 1, 7, 12]] = [0.5, 1.5, -2.0, 0.25]  # 1, V1, A, A^2
    mu = LinearComponent(mu_map, coef)
    tau = fit_tau(data, mu, tau_map)
    np.testing.assert_allclose(tau(data.A, data.V), mu(data.A, data.X), atol=1e-8)


def test_tau_of_constant_mu():
    data, _ = dgp_sample(100, rng=6)
    tau = fit_tau(data, ConstantComponent(-0.75), outcome_feature_maps(4, 2)[1])
    np.testing.assert_allclose(tau(data.A, data.V), -0.75, atol=1e-8)


# ---------------------------------------------------------------- label propensity

def test_label_propensity_mcar_large_sample():
    rng = np.random.default_rng(7)
    n = 100_000
    V = rng.standard_normal((n, 1))
    A = rng.standard_normal(n)
    R = (rng.random(n) < 0.5).astype(int)
    d = Dataset(V, np.zeros((n, 0)), A, np.where(R == 1, 1.0, np.nan), R)
    rho = fit_label_propensity(d, FeatureMap(1, ((0, None),)))
    assert abs(float(rho(0.0, [[0.0]])[0]) - 0.5) < 0.01


def test_label_propensity_zero_variance_features():
    n = 50
    R = np.r_[np.ones(20), np.zeros(30)].astype(int)
    d = Dataset(np.ones((n, 2)), np.zeros((n, 0)), np.full(n, 0.3), np.where(R == 1, 1.0, np.nan), R)
    rho = fit_label_propensity(d, propensity_feature_map(2))
    np.testing.assert_allclose(rho(d.A, d.X), 20 / 50, atol=1e-10)


def test_label_propensity_needs_both_classes():
    d = Dataset(np.zeros((5, 1)), np.zeros((5, 0)), np.arange(5.0), [np.nan] * 5)
    with pytest.raises(FitError):
        fit_label_propensity(d, propensity_feature_map(1))


def test_label_propensity_separation():
    A = np.linspace(-1, 1, 40)
    R = (A > 0).astype(int)
    d = Dataset(np.zeros((40, 1)), np.zeros((40, 0)), A, np.where(R == 1, 1.0, np.nan), R)
    with pytest.raises(FitError, match="separation"):
        fit_label_propensity(d, propensity_feature_map(1))


def test_rho_clipped_through_bundle():
    b = NuisanceBundle(ConstantComponent(0), ConstantComponent(0), ConstantComponent(0.001),
                       ConstantComponent(1.0), clip_rho_min=0.05)
    assert float(b.rho_at(1.0, [[0.0]])[0]) == 0.05


# ---------------------------------------------------------------- treatment density

def test_conditional_density_large_sample():
    data, _ = dgp_sample(200_000, rng=8)
    pi = fit_conditional_density(data, density_feature_map(4))
    np.testing.assert_allclose(pi.coef, [1, 0.2, 0.2, -0.2, 0.3], atol=0.01)
    assert pi.sd ** 2 == pytest.approx(1.0, abs=0.01)


def test_conditional_density_without_covariates():
    rng = np.random.default_rng(9)
    A = rng.normal(2.0, 3.0, 500)
    d = Dataset(np.zeros((500, 0)), np.zeros((500, 0)), A, A)
    pi = fit_conditional_density(d, density_feature_map(0))
    m, s = A.mean(), A.std()
    x = np.array([-1.0, 2.0, 4.5])
    np.testing.assert_allclose(pi(x, np.zeros((3, 0))), stats.norm.pdf(x, m, s), rtol=1e-10)


def test_conditional_density_mode_value():
    data, _ = dgp_sample(300, rng=10)
    pi = fit_conditional_density(data, density_feature_map(4))
    v = data.V[:3]
    at_mean = pi(pi.mean(v), v)
    np.testing.assert_allclose(at_mean, 1 / math.sqrt(2 * math.pi * pi.sd ** 2), rtol=1e-12)


def test_conditional_density_degenerate():
    V = np.arange(6.0)[:, None]
    d = Dataset(V, np.zeros((6, 0)), 2 * V[:, 0] + 1, np.ones(6))
    with pytest.raises(FitError, match="variance"):
        fit_conditional_density(d, density_feature_map(1))


# ---------------------------------------------------------------- marginal density and weights

def test_marginal_independent_of_covariates():
    pi = GaussianDensity(density_feature_map(0), np.array([0.4]), 1.3)
    f = estimate_marginal_density(pi, np.zeros((5, 0)))
    a = np.linspace(-2, 2, 9)
    np.testing.assert_allclose(f(a), pi(a, np.zeros((9, 0))), rtol=1e-14)


def test_marginal_two_row_average():
    f = estimate_marginal_density(TableComponent(), np.array([[0.2], [0.4]]))
    assert float(f(0.7)[0]) == pytest.approx(0.3, abs=1e-15)


def test_marginal_empty_fold():
    with pytest.raises(ValueError):
        estimate_marginal_density(TableComponent(), np.zeros((0, 1)))


def test_marginal_matches_closed_form_at_one():
    truth = true_bundle()
    V = np.random.default_rng(11).standard_normal((200_000, 4))
    f = estimate_marginal_density(truth.pi, V)
    expected = stats.norm.pdf(1.0, 1.0, math.sqrt(1.21))
    assert float(f(1.0)[0]) == pytest.approx(expected, abs=2e-3)


@given(st.floats(-3, 5))
def test_marginal_is_mean_of_conditional(a):
    truth = true_bundle()
    V = np.random.default_rng(12).standard_normal((37, 4))
    f = estimate_marginal_density(truth.pi, V)
    direct = np.mean(truth.pi(np.full(37, a), V))
    assert float(f(a)[0]) == pytest.approx(direct, rel=1e-12, abs=1e-300)


def test_stabilized_weight_examples():
    V = np.zeros((1, 1))
    same = GaussianDensity(density_feature_map(1), np.array([0.0, 0.0]), 1.0)
    w = make_stabilized_weight(NormalMarginal(0.0, 1.0), same)
    np.testing.assert_allclose(w(np.linspace(-2, 2, 5), np.zeros((5, 1))), 1.0, rtol=1e-14)
    w = make_stabilized_weight(ConstMarginal(0.1), TableComponent(), cap=3)
    assert float(w(0.0, [[0.02]])[0]) == 3.0
    w = make_stabilized_weight(ConstMarginal(0.2), TableComponent())
    assert float(w(0.0, [[0.4]])[0]) == pytest.approx(0.5)
    assert float(w(0.0, [[0.0]])[0]) == 50.0
    with pytest.raises(ValueError):
        make_stabilized_weight(ConstMarginal(0.2), TableComponent(), cap=0)
    assert V.shape == (1, 1)


@given(st.floats(0.01, 0.9), st.floats(1.0, 20.0), st.integers(0, 1000))
def test_clipping_invariants(rho_min, cap, seed):
    data, truth = dgp_sample(60, rng=seed)
    noisy = oracle_noisy_bundle(truth, 0.05, 60, np.random.default_rng(seed))
    b = NuisanceBundle(noisy.mu, noisy.tau, noisy.rho, noisy.pi, noisy.f, rho_min, cap)
    r = b.rho_at(data.A, data.X)
    w = b.w_at(data.A, data.V)
    assert np.all(r >= rho_min) and np.all(r <= 1)
    assert np.all(w <= cap) and np.all(w > 0)


# ---------------------------------------------------------------- least squares

@given(st.integers(0, 10_000))
def test_least_squares_residuals_orthogonal(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(20, 200))
    fm = FeatureMap.standard(3, quadratic_a=True, interactions=(0, 2))
    a = rng.normal(size=n)
    Z = rng.normal(size=(n, 3)) * rng.uniform(0.1, 10, 3)
    D = fm(a, Z)
    y = rng.normal(size=n) * 5 + D @ rng.normal(size=fm.size)
    coef = least_squares(D, y, fm)
    assert np.max(np.abs(D.T @ (y - D @ coef))) < 1e-6 * n


# ---------------------------------------------------------------- oracle noise

def test_huge_alpha_reproduces_truth():
    truth = true_bundle()
    noisy = oracle_noisy_bundle(truth, 50.0, 500, np.random.default_rng(0))
    data, _ = dgp_sample(20, rng=13)
    a, X, V = data.A, data.X, data.V
    for name in ("mu",):
        np.testing.assert_allclose(getattr(noisy, name)(a, X), getattr(truth, name)(a, X), atol=1e-10)
    np.testing.assert_allclose(noisy.tau(a, V), truth.tau(a, V), atol=1e-10)
    np.testing.assert_allclose(noisy.rho_at(a, X), truth.rho_at(a, X), atol=1e-10)
    np.testing.assert_allclose(noisy.pi(a, V), truth.pi(a, V), atol=1e-10)
    np.testing.assert_allclose(noisy.w_at(a, V), truth.w_at(a, V), atol=1e-10)


def test_error_moments_at_alpha_tenth():
    scale = 500 ** -0.1
    assert scale == pytest.approx(0.5372, abs=5e-5)
    truth = true_bundle()
    rng = np.random.default_rng(14)
    eps = np.array([oracle_noisy_bundle(truth, 0.1, 500, rng).info["eps"] for _ in range(100_000)])
    assert eps.shape == (100_000, 4)
    np.testing.assert_allclose(eps.mean(axis=0), scale, atol=0.01)
    np.testing.assert_allclose(eps.std(axis=0), scale, atol=0.01)
    assert abs(np.corrcoef(eps.T)[0, 1]) < 0.02


def test_perturbations_applied_as_constants():
    truth = true_bundle()
    noisy = oracle_noisy_bundle(truth, 0.2, 500, np.random.default_rng(15))
    e1, e2, e3, e4 = noisy.info["eps"]
    data, _ = dgp_sample(10, rng=16)
    a, X, V = data.A, data.X, data.V
    np.testing.assert_allclose(noisy.mu(a, X) - truth.mu(a, X), e2, rtol=1e-12)
    np.testing.assert_allclose(noisy.tau(a, V) - truth.tau(a, V), e3, rtol=1e-12)
    lam = V @ [0.2, 0.2, -0.2, 0.3] + 1 + e1
    np.testing.assert_allclose(noisy.pi(a, V), stats.norm.pdf(a, lam, 1.0), rtol=1e-12)
    rho = 1 / (1 + np.exp(-e4))
    np.testing.assert_allclose(noisy.rho_at(a, X), rho, rtol=1e-12)
    np.testing.assert_allclose(noisy.f(a), stats.norm.pdf(a, 1 + e1, 1.1), rtol=1e-12)


def test_zero_logit_error_keeps_half():
    truth = true_bundle()

    class ZeroRng:
        def normal(self, loc, scale, size):
            return np.zeros(size)

    noisy = oracle_noisy_bundle(truth, 0.3, 100, ZeroRng())
    assert float(noisy.rho_at(0.5, np.zeros((1, 6)))[0]) == 0.5


def test_noisy_bundle_reproducible():
    truth = true_bundle()
    a = oracle_noisy_bundle(truth, 0.1, 500, np.random.default_rng(99))
    b = oracle_noisy_bundle(truth, 0.1, 500, np.random.default_rng(99))
    assert a.info["eps"] == b.info["eps"]


# ---------------------------------------------------------------- vectorized helpers

@pytest.mark.parametrize("component", ["mu", "tau", "pi"])
def test_average_over_matches_brute_force(component):
    truth = true_bundle()
    data, _ = dgp_sample(90, rng=17)
    comp = getattr(truth, component)
    Z = data.X if component == "mu" else data.V
    a = np.linspace(-1, 3, 13)
    brute = np.array([np.mean(comp(np.full(len(Z), x), Z)) for x in a])
    np.testing.assert_allclose(comp.average_over(a, Z), brute, rtol=1e-12)
    np.testing.assert_allclose(Component.average_over(comp, a, Z), brute, rtol=1e-12)


def test_weighted_cross_factorized_matches_generic():
    truth = true_bundle()
    data, _ = dgp_sample(70, rng=18)
    t = np.linspace(-1, 3, 40)
    W = np.random.default_rng(1).normal(size=(3, 40))
    W[:, :5] = 0.0
    fast = truth.tau.weighted_cross(t, W, data.V)
    slow = Component.weighted_cross(truth.tau, t, W, data.V)
    np.testing.assert_allclose(fast, slow, rtol=1e-11, atol=1e-12)
    shifted = truth.tau.shifted(0.3)
    np.testing.assert_allclose(shifted.weighted_cross(t, W, data.V),
                               slow + 0.3 * W.sum(axis=1)[:, None], rtol=1e-11, atol=1e-12)


def test_fit_nuisances_end_to_end():
    data, truth = dgp_sample(3000, rng=19)
    b = fit_nuisances(data)
    assert b.f is None
    np.testing.assert_allclose(b.mu.coef, truth.mu.coef, atol=0.15)
    r = b.rho_at(data.A, data.X)
    assert abs(r.mean() - data.R.mean()) < 1e-6
    full = Dataset(data.V, data.S, data.A, truth.mu(data.A, data.X))
    assert isinstance(fit_nuisances(full).rho, ConstantComponent)
