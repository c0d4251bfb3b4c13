from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import expit

from atmle_design.core import PositivityError, PreconditionError, from_arrays
from atmle_design.nuisance import (
    BasisSpec, LassoConfig, NuisanceOptions, RankDeficiencyError, SeparationError,
    build_nuisance_bundle, compose_scores, expand_basis, fit_logistic, fit_theta,
    fit_weighted_lasso, logistic_loglik, logistic_score,
)
from atmle_design.simulation import DGPConfig, external_propensity, generate_pool


# -- basis ------------------------------------------------------------------

def test_main_terms_columns():
    w = np.array([[1.0, 2.0], [3.0, 4.0]])
    X, fb = expand_basis(w, BasisSpec())
    assert fb.names == ("1", "W1", "W2")
    assert np.array_equal(X, [[1, 1, 2], [1, 3, 4]])


def test_main_terms_with_treatment_interaction():
    w = np.array([[2.0], [5.0]])
    X, fb = expand_basis(w, BasisSpec(interact_with_treatment=True), a=np.array([1, 0]))
    assert fb.names == ("1", "W1", "A", "A*W1")
    assert np.array_equal(X, [[1, 2, 1, 2], [1, 5, 0, 0]])


def test_hal0_quartile_indicators():
    w = np.arange(1.0, 9.0)[:, None]
    X, fb = expand_basis(w, BasisSpec(scheme="indicator_hal0", knots_per_dim=3))
    assert fb.knots == ((2.75, 4.5, 6.25),)
    expected = np.column_stack([
        np.ones(8),
        [0, 0, 1, 1, 1, 1, 1, 1],
        [0, 0, 0, 0, 1, 1, 1, 1],
        [0, 0, 0, 0, 0, 0, 1, 1],
    ])
    assert np.array_equal(X, expected)


def test_hal0_interactions_in_lexicographic_order():
    w = np.column_stack([np.arange(8.0), np.arange(8.0)[::-1]])
    _, fb = expand_basis(w, BasisSpec(scheme="indicator_hal0", knots_per_dim=1,
                                      max_interaction_depth=2))
    assert len(fb.names) == 1 + 2 + 1
    assert fb.names[3] == f"{fb.names[1]}*{fb.names[2]}"


def test_hal0_constant_covariate_warns_and_skips():
    w = np.column_stack([np.ones(6), np.arange(6.0)])
    with pytest.warns(RuntimeWarning, match="W1 is constant"):
        X, fb = expand_basis(w, BasisSpec(scheme="indicator_hal0", knots_per_dim=2))
    assert fb.knots[0] == () and X.shape[1] == 3


# -- logistic ---------------------------------------------------------------

def test_logistic_balanced_intercept():
    fit = fit_logistic(np.ones((4, 1)), np.array([0, 0, 1, 1]))
    assert abs(fit.beta[0]) < 1e-12


def test_logistic_saturated_model():
    x = np.array([0, 0, 0, 0, 1, 1, 1, 1.0])
    y = np.array([0, 0, 0, 1, 0, 1, 1, 1])
    fit = fit_logistic(np.column_stack([np.ones(8), x]), y)
    assert fit.beta == pytest.approx([-math.log(3), 2 * math.log(3)], abs=1e-8)
    assert fit.converged
    assert np.allclose(fit.information, fit.information.T)


def test_logistic_recovers_external_mechanism():
    rng = np.random.default_rng(7)
    n = 1_000_000
    w = rng.standard_normal((n, 2))
    X = np.column_stack([np.ones(n), w])
    y = (rng.random(n) < expit(-2 + 1.6 * w[:, 0] - 2 * w[:, 1])).astype(float)
    fit = fit_logistic(X, y)
    se = np.sqrt(np.diag(np.linalg.inv(fit.information)) / n)
    assert np.all(np.abs(fit.beta - [-2.0, 1.6, -2.0]) <= 3 * se)


def test_logistic_separation_names_column():
    x = np.array([-2, -1, -0.5, 0.5, 1, 2.0])
    X = np.column_stack([np.ones(6), x])
    with pytest.raises(SeparationError) as err:
        fit_logistic(X, (x > 0).astype(float), names=["1", "W1"])
    assert err.value.column == "W1"


def test_logistic_rank_deficiency_lists_columns():
    x = np.arange(6.0)
    X = np.column_stack([np.ones(6), x, 2 * x])
    with pytest.raises(RankDeficiencyError) as err:
        fit_logistic(X, np.array([0, 1, 0, 1, 1, 0.0]), names=["1", "x", "2x"])
    assert len(err.value.columns) == 1


@given(st.integers(0, 10_000))
def test_logistic_score_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n, p = 25, 3
    X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    y = (rng.random(n) < 0.5).astype(float)
    wts = rng.uniform(0.2, 2.0, n)
    beta = rng.normal(0, 0.5, p)
    grad = logistic_score(X, y, beta, wts)
    h = 1e-5
    fd = np.array([
        (logistic_loglik(X, y, beta + h * e, wts) - logistic_loglik(X, y, beta - h * e, wts)) / (2 * h)
        for e in np.eye(p)
    ])
    assert np.linalg.norm(grad - fd) <= 1e-6 * max(np.linalg.norm(grad), 1e-3)


# -- lasso ------------------------------------------------------------------

def test_lasso_huge_lambda_gives_weighted_mean(rng):
    n = 50
    X = np.column_stack([np.ones(n), rng.standard_normal((n, 3))])
    y = rng.standard_normal(n)
    w = rng.uniform(0.5, 2, n)
    fit = fit_weighted_lasso(X, y, w, lambda_grid=[1e8])
    assert fit.selected.tolist() == [0]
    assert fit.beta[0] == pytest.approx(np.sum(w * y) / np.sum(w), rel=1e-12)
    assert np.all(fit.beta[1:] == 0)


def test_lasso_noiseless_interpolation(rng):
    x = rng.standard_normal(30)
    fit = fit_weighted_lasso(np.column_stack([np.ones(30), x]), 2 * x, lambda_grid=[0.0])
    assert fit.beta == pytest.approx([0.0, 2.0], abs=1e-12)


@given(st.integers(0, 10_000))
def test_relaxed_refit_normal_equations(seed):
    rng = np.random.default_rng(seed)
    n, p = 20, 5
    X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    y = X @ rng.normal(0, 1, p) + rng.standard_normal(n)
    w = rng.uniform(0.1, 3, n)
    fit = fit_weighted_lasso(X, y, w, cv_folds=4)
    sel = fit.selected
    resid = X[:, sel].T @ (w * (y - X @ fit.beta)) / n
    assert np.max(np.abs(resid)) <= 1e-10
    assert np.all(np.diff(fit.objective_trace) <= 1e-12)
    assert np.allclose(fit.information, fit.information.T)


def test_lasso_objective_monotone_on_larger_problem(rng):
    n, p = 400, 12
    X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    X[:, 2] = X[:, 1] + 0.1 * X[:, 2]
    y = X[:, 1] - 0.5 * X[:, 3] + rng.standard_normal(n)
    fit = fit_weighted_lasso(X, y, rng.uniform(0.2, 1, n))
    assert fit.objective_trace.size >= 2
    assert np.all(np.diff(fit.objective_trace) <= 1e-12)
    assert fit.cv_error.size == 50


def test_lasso_errors():
    X = np.ones((5, 2))
    y = np.arange(5.0)
    with pytest.raises(ValueError, match="weights are zero"):
        fit_weighted_lasso(X, y, np.zeros(5))
    with pytest.raises(ValueError, match="non-finite"):
        fit_weighted_lasso(X, np.array([0, 1, np.nan, 3, 4]))
    with pytest.raises(ValueError, match="decreasing"):
        fit_weighted_lasso(X, y, lambda_grid=[0.1, 1.0])
    with pytest.raises(ValueError, match="cv_folds"):
        fit_weighted_lasso(X, y, cv_folds=1)


# -- score composition --------------------------------------------------------

def test_compose_no_external():
    for a in (0, 1):
        g, pi = compose_scores(1.0, 0.3, 0.5, a)
        assert g == 0.5 and pi == 1.0


def test_compose_external_controls_only():
    g, pi0 = compose_scores(0.5, 0.0, 0.5, 0)
    assert g == 0.25 and pi0 == pytest.approx(1 / 3, abs=1e-15)
    assert compose_scores(0.5, 0.0, 0.5, 1)[1] == 1.0


def test_compose_constant_score_target():
    for a in (0, 1):
        g, pi = compose_scores(1 / 31, 0.5, 0.5, a)
        assert g == pytest.approx(0.5, abs=1e-15) and pi == pytest.approx(1 / 31, abs=1e-15)


def test_compose_positivity_error():
    with pytest.raises(PositivityError) as err:
        compose_scores(np.array([0.5, 0.0]), np.array([0.3, 1.0]), 0.5, np.array([0, 0]))
    assert err.value.rows == (1,)


probs = st.floats(0.001, 0.999)


@given(probs, probs)
def test_compose_controls_only_identity(q, r):
    g, pi1 = compose_scores(q, 0.0, r, 1)
    assert g == r * q and pi1 == 1.0
    if r == 0.5:
        assert g == q / 2


@given(probs, st.floats(0.0, 0.999), probs)
def test_compose_pi_is_bayes_share(q, e, r):
    g, pi1 = compose_scores(q, e, r, 1)
    _, pi0 = compose_scores(q, e, r, 0)
    assert 0 <= pi1 <= 1 and 0 <= pi0 <= 1
    # P(S=1 | W) recovered by averaging over A
    assert pi1 * g + pi0 * (1 - g) == pytest.approx(q, abs=1e-12)


# -- theta and bundle ---------------------------------------------------------

def _cohort(n, seed, y_fn=None):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((n, 3))
    s = (rng.random(n) < 0.5).astype(int)
    a = (rng.random(n) < 0.5).astype(int)
    y = np.zeros(n) if y_fn is None else y_fn(w, a, rng)
    return from_arrays(s, w, a, y, 0.5)


def test_theta_constant_outcome():
    c = _cohort(200, 1, lambda w, a, rng: np.full(len(a), 3.7))
    theta = fit_theta(c)
    assert np.allclose(theta(c.w), 3.7, atol=1e-12)


def test_theta_marginalises_treatment():
    n = 100_000
    c = _cohort(n, 2, lambda w, a, rng: 1 + 0.5 * a)
    theta = fit_theta(c, lasso=LassoConfig(lambda_grid=(0.0,)))
    vals = theta(c.w)
    se = 0.25 / math.sqrt(n)
    assert abs(vals.mean() - 1.25) <= 3 * se
    assert np.ptp(vals) < 0.01


def test_theta_r2_on_pooled_design():
    c = generate_pool(DGPConfig(n_rct=400, source_sizes=(1000,) * 5, seed=5))
    rng = np.random.default_rng(0)
    test = rng.permutation(c.n)[: c.n // 5]
    train = np.setdiff1d(np.arange(c.n), test)
    theta = fit_theta(c, rows=train)
    y = c.y[test]
    r2 = 1 - np.mean((y - theta(c.w[test])) ** 2) / np.var(y)
    assert r2 > 0.5


def test_bundle_oracle_passthrough():
    c = _cohort(300, 3)
    q = lambda w: np.full(len(w), 0.4)
    e = lambda w: expit(w[:, 0])
    b = build_nuisance_bundle(c, oracle_q=q, oracle_e=e)
    assert b.q_hat is q and b.e_hat is e
    g, pi = compose_scores(q(c.w), e(c.w), 0.5, 1)
    assert np.array_equal(b.g_hat(c.w), g) and np.array_equal(b.pi_hat(c.w, 1), pi)


def test_bundle_external_controls_only():
    c = _cohort(400, 4)
    a = np.where(c.s == 1, c.a, 0)
    c = from_arrays(c.s, c.w, a, c.y, 0.5)
    b = build_nuisance_bundle(c)
    assert b.external_controls_only
    assert np.all(b.e_hat(c.w) == 0)
    assert np.all(b.pi_hat(c.w, 1) == 1.0)
    with pytest.raises(PreconditionError):
        treated_ext = from_arrays(c.s, c.w, np.where(c.s == 0, 1, c.a), c.y, 0.5)
        build_nuisance_bundle(treated_ext, NuisanceOptions(external_controls_only=True))


def test_bundle_g_range_on_pooled_design():
    pool = generate_pool(DGPConfig(n_rct=400, source_sizes=(920,) * 5, seed=11))
    rng = np.random.default_rng(3)
    rows = np.concatenate([np.flatnonzero(pool.s == 1),
                           rng.choice(np.flatnonzero(pool.s == 0), 4600, replace=False)])
    c = pool.subset(rows)
    assert c.n == 5000
    b = build_nuisance_bundle(c)
    g = b.g_hat(c.w)
    # clipping q and e at 0.005 bounds g away from 0 and 1
    assert np.all((g > 0.005) & (g < 0.995))
    # the true external propensity approaches 1 for some rows, so a small
    # share of g values legitimately sits just above 0.99
    q0 = 400 / 5000
    g0 = 0.5 * q0 + external_propensity(c.w) * (1 - q0)
    outside_fit = np.mean((g <= 0.01) | (g >= 0.99))
    outside_true = np.mean((g0 <= 0.01) | (g0 >= 0.99))
    assert outside_fit < 0.01 and outside_true < 0.01


def test_bundle_requires_both_groups():
    c = _cohort(50, 5)
    with pytest.raises(PreconditionError):
        build_nuisance_bundle(c.subset(np.flatnonzero(c.s == 1)))


def test_qbar_semiparametric_form():
    c = _cohort(300, 6, lambda w, a, rng: w[:, 0] + a)
    b = build_nuisance_bundle(c).with_tau_a(lambda w: np.full(len(w), 2.0))
    for a in (0, 1):
        expected = b.theta_hat(c.w) + (a - b.g_hat(c.w)) * 2.0
        assert np.array_equal(b.qbar_hat(c.w, a), expected)
