from __future__ import annotations

import numpy as np
import pytest
from scipy.stats import spearmanr

from _helpers import random_bases

from atmle_design.core import from_arrays
from atmle_design.diagnostics import (
    balance_report, exact_remainder_bias, exact_remainder_pooled, loglog_slope,
    oracle_bias_ladder, oracle_bias_mc, perturbed_candidate, remainder_bias_details,
    scenario_truth, true_candidate,
)
from atmle_design.nuisance import BasisSpec, fit_basis
from atmle_design.simulation import DGPConfig, generate_pool

MC_N = 100_000
BASIS = BasisSpec()
EPS = (0.01, 0.02, 0.04, 0.08)


@pytest.fixture(scope="module")
def truth():
    return scenario_truth()


@pytest.fixture(scope="module")
def w(truth):
    return truth.sampler(MC_N, 0)


# -- balance ----------------------------------------------------------------

def test_balance_copy_pool_is_zero():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((200, 3))
    c = from_arrays(np.r_[np.ones(200, int), np.zeros(200, int)], np.vstack([x, x]),
                    rng.integers(0, 2, 400), np.zeros(400), 0.5)
    rep = balance_report(c)
    assert rep.max_abs_coef < 1e-8
    assert np.max(np.abs(rep.smd)) < 1e-12
    assert rep.max_abs_coef == np.max(np.abs(rep.refit_enrollment_coefs))


def test_balance_detects_source5_shift():
    pool = generate_pool(DGPConfig(n_rct=400, source_sizes=(200, 200, 200, 200, 5000), seed=1))
    assert balance_report(pool).max_abs_coef > 0.1


def test_balance_flags_separation():
    w = np.r_[np.linspace(-2, -1, 10), np.linspace(1, 2, 10)][:, None]
    c = from_arrays(np.r_[np.zeros(10, int), np.ones(10, int)], w, np.zeros(20, int),
                    np.zeros(20), 0.5)
    rep = balance_report(c)
    assert rep.separated and rep.max_abs_coef == np.inf


# -- remainders: zero cases -----------------------------------------------------

def test_pooled_remainder_zero_with_true_g(truth, w):
    cand = perturbed_candidate(truth, BASIS, BASIS, w, wrong_outcome=True)
    res = exact_remainder_pooled(cand, truth, BASIS, MC_N)
    assert res.within(3.0)
    assert exact_remainder_pooled(true_candidate(truth, BASIS, BASIS, w), truth, BASIS, MC_N).within(3.0)


def test_bias_remainder_zero_with_true_scores(truth, w):
    cand = perturbed_candidate(truth, BASIS, BASIS, w, wrong_outcome=True)
    assert exact_remainder_bias(cand, truth, BASIS, MC_N).within(3.0)
    assert exact_remainder_bias(true_candidate(truth, BASIS, BASIS, w), truth, BASIS, MC_N).within(3.0)


def test_remainder_rejects_small_mc(truth, w):
    cand = true_candidate(truth, BASIS, BASIS, w)
    with pytest.raises(ValueError):
        exact_remainder_pooled(cand, truth, BASIS, 1000)


# -- remainders: quadratic scaling ---------------------------------------------

def test_pooled_remainder_quadratic_in_g(truth, w):
    vals = [exact_remainder_pooled(perturbed_candidate(truth, BASIS, BASIS, w, g_eps=e),
                                   truth, BASIS, MC_N).value for e in EPS]
    assert loglog_slope(EPS, vals) == pytest.approx(2.0, abs=0.1)


def test_bias_remainder_quadratic_in_pi(truth, w):
    vals = [exact_remainder_bias(perturbed_candidate(truth, BASIS, BASIS, w, pi_eps=e),
                                 truth, BASIS, MC_N).value for e in EPS]
    assert loglog_slope(EPS, vals) == pytest.approx(2.0, abs=0.1)


def test_clipped_g_is_reported(truth, w):
    cand = perturbed_candidate(truth, BASIS, BASIS, w, g_eps=0.0)
    _, n_clipped = remainder_bias_details(cand, truth, BASIS, MC_N, clip=0.45)
    assert n_clipped > 0


# -- remainders: independent second route ------------------------------------------
# R = Psi(P) - Psi(P0) + E0 D_P, with E0 taken analytically over A, S and Y.

def _pooled_route(cand, truth, w):
    fb = fit_basis(w, BASIS)
    Phi = fb.design(w)
    g0, gP = truth.g0(w), cand.g(w)
    wt = g0 * (1 - g0)
    beta0 = np.linalg.lstsq(Phi * np.sqrt(wt)[:, None], truth.tau_a0(w) * np.sqrt(wt), rcond=None)[0]
    tauP = cand.tau_a(w)
    psi_p, psi_0 = tauP.mean(), (Phi @ beta0).mean()
    score = np.zeros(Phi.shape[1])
    for a, pa in ((1.0, g0), (0.0, 1 - g0)):
        mean_y = truth.qbar(w, a)
        score += ((pa * (a - gP) * (mean_y - cand.theta(w) - (a - gP) * tauP))[:, None] * Phi).mean(0)
    info = (Phi * (gP * (1 - gP))[:, None]).T @ Phi / len(w)
    e0_d = Phi.mean(0) @ np.linalg.solve(info, score)
    return psi_p - psi_0 + e0_d


def _bias_route(cand, truth, w):
    fb = fit_basis(w, BASIS)
    g0, gP = truth.g0(w), cand.g(w)
    design = {a: fb.design(w, a) for a in (0.0, 1.0)}
    M, v = 0.0, 0.0
    for a, pa in ((0.0, 1 - g0), (1.0, g0)):
        pi = truth.pi0(w, a)
        wt = pa * pi * (1 - pi)
        M = M + (design[a] * wt[:, None]).T @ design[a]
        v = v + (design[a] * wt[:, None]).T @ truth.tau_s0(w, a)
    beta0 = np.linalg.lstsq(M, v, rcond=None)[0]

    def psi(pi_fn, tau_fn):
        return np.mean((1 - pi_fn(w, 0.0)) * tau_fn(0.0) - (1 - pi_fn(w, 1.0)) * tau_fn(1.0))

    psi_p = psi(cand.pi, lambda a: cand.tau_s(w, a))
    psi_0 = psi(truth.pi0, lambda a: design[a] @ beta0)

    d_pi = np.zeros(len(w))
    score = np.zeros(design[0.0].shape[1])
    info = np.zeros((len(score), len(score)))
    for a, pa in ((1.0, g0), (0.0, 1 - g0)):
        piP, pi0 = cand.pi(w, a), truth.pi0(w, a)
        tauP = cand.tau_s(w, a)
        ratio = cand.tau_s(w, 1.0) / gP if a == 1 else -cand.tau_s(w, 0.0) / (1 - gP)
        d_pi += pa * ratio * (pi0 - piP)
        # E0 over S ~ Bern(pi0) of (S - piP) (E0[Y|S,W,a] - Qbar_P - (S - piP) tau_P)
        inner = 0.0
        for s, ps in ((1.0, pi0), (0.0, 1 - pi0)):
            mean_y = truth.qbar(w, a) + (s - pi0) * truth.tau_s0(w, a)
            inner = inner + ps * (s - piP) * (mean_y - cand.qbar(w, a) - (s - piP) * tauP)
        score += ((pa * inner)[:, None] * design[a]).mean(0)
        info += (design[a] * (pa * piP * (1 - piP))[:, None]).T @ design[a] / len(w)
    c = np.mean((1 - cand.pi(w, 0.0))[:, None] * design[0.0]
                - (1 - cand.pi(w, 1.0))[:, None] * design[1.0], axis=0)
    e0_d = d_pi.mean() + c @ np.linalg.solve(info, score)
    return psi_p - psi_0 + e0_d


@pytest.mark.parametrize("g_eps, pi_eps, wrong", [
    (0.03, 0.0, True), (-0.05, 0.02, True), (0.04, -0.03, False), (0.0, 0.0, True),
])
def test_remainders_match_direct_expansion(truth, w, g_eps, pi_eps, wrong):
    cand = perturbed_candidate(truth, BASIS, BASIS, w, g_eps=g_eps, pi_eps=pi_eps,
                               wrong_outcome=wrong)
    pooled = exact_remainder_pooled(cand, truth, BASIS, MC_N).value
    bias = exact_remainder_bias(cand, truth, BASIS, MC_N).value
    assert pooled == pytest.approx(_pooled_route(cand, truth, w), abs=1e-9)
    assert bias == pytest.approx(_bias_route(cand, truth, w), abs=1e-9)


# -- oracle bias ---------------------------------------------------------------

def test_oracle_bias_zero_when_basis_spans_truth():
    truth = scenario_truth(cate_curvature=0.0)
    res = oracle_bias_mc(truth, BASIS, BasisSpec(interact_with_treatment=True), MC_N)
    assert res.total.within(3.0)
    assert abs(res.total.value) < 1e-10


def test_oracle_bias_zero_under_constant_scores():
    truth = scenario_truth(constant_scores=True, cate_curvature=0.6, w3_treated_bias=0.4)
    w = truth.sampler(MC_N, 0)
    for basis_a, basis_s in random_bases(np.random.default_rng(2024), w, 10):
        res = oracle_bias_mc(truth, basis_a, basis_s, MC_N)
        assert res.total.within(3.0), (basis_a.names, basis_s.names, res.total)


def test_oracle_bias_nonzero_with_varying_scores():
    # the same misspecified bases leave a detectable oracle bias once the
    # scores depend on W, so the constant-score result is not vacuous
    truth = scenario_truth(cate_curvature=0.6, q=(-0.5, 0.8, -0.6, 0.5), e=(0.0, 0.9, -0.7, 0.4))
    res = oracle_bias_mc(truth, BASIS, BASIS, MC_N)
    assert not res.total.within(3.0)


def test_oracle_bias_ladder():
    rows = oracle_bias_ladder()
    bias = np.abs([r.oracle_bias for r in rows])
    mse = [r.weighted_mse for r in rows]
    assert np.max(bias) <= 0.025
    assert spearmanr(mse, bias).statistic >= 0.8
    r2 = [r.adjusted_r2 for r in rows]
    assert r2[0] > r2[-1]
