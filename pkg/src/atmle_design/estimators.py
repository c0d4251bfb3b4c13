"""A-TMLE for trial augmentation, plus RCT-only TMLE and AIPW baselines.

The combined estimate is the pooled-ATE projection minus the bias
projection. Each projection is fitted with the R-loss (relaxed lasso on
a working basis) and then corrected by the empirical mean of its
efficient influence curve.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import Cohort, Estimate, PreconditionError, split_by_study, wald_inference
from .nuisance import (
    DEFAULT_CLIP,
    BasisSpec,
    CoefficientFit,
    FittedBasis,
    LassoConfig,
    LinearPredictor,
    NuisanceBundle,
    NuisanceOptions,
    build_nuisance_bundle,
    expand_basis,
    fit_basis,
    fit_weighted_lasso,
)

logger = logging.getLogger(__name__)

RIDGE_JITTER = 1e-10
MAX_CONDITION = 1e10

TAU_A_BASIS = BasisSpec()
TAU_S_BASIS = BasisSpec()
RCT_OUTCOME_BASIS = BasisSpec(treatment_main_effect=True)


class SingularInformationError(PreconditionError):
    pass


@dataclass(frozen=True, eq=False)
class ProjectionFit:
    basis: FittedBasis
    fit: CoefficientFit
    selected: np.ndarray
    beta: np.ndarray
    basis_means: np.ndarray
    information: np.ndarray
    condition_number: float
    plug_in: float
    score_means: np.ndarray


@dataclass(frozen=True, eq=False)
class ATMLEResult:
    pooled: Estimate
    bias: Estimate
    combined: Estimate
    pooled_fit: Optional[ProjectionFit] = None
    bias_fit: Optional[ProjectionFit] = None
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ATMLEOptions:
    nuisance: NuisanceOptions = NuisanceOptions()
    tau_a_basis: BasisSpec = TAU_A_BASIS
    tau_s_basis: BasisSpec = TAU_S_BASIS
    lasso: LassoConfig = LassoConfig()
    alpha: float = 0.05


def _invert_information(info: np.ndarray) -> tuple[np.ndarray, float]:
    p = info.shape[0]
    jittered = info + RIDGE_JITTER * np.eye(p)
    cond = float(np.linalg.cond(jittered)) if p else 1.0
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularInformationError(
            f"working-model information is singular (condition number {cond:.3g}); "
            "reduce the basis")
    return np.linalg.inv(jittered), cond


def _unpenalized(fb: FittedBasis) -> tuple[int, ...]:
    return () if fb.intercept_index is None else (fb.intercept_index,)


def estimate_pooled_projection(cohort: Cohort, bundle: NuisanceBundle,
                               basis: BasisSpec = TAU_A_BASIS,
                               lasso: LassoConfig = LassoConfig(), alpha: float = 0.05,
                               ) -> tuple[Estimate, ProjectionFit, Callable]:
    """Pooled-ATE projection: mean of the R-loss CATE working model.

    Returns the corrected estimate, the fitted projection and the CATE
    function ``tau_a(W)``.
    """
    W, A, Y = cohort.w, cohort.a.astype(float), cohort.y
    g = bundle.g_hat(W)
    theta = bundle.theta_values(cohort)
    Phi, fb = expand_basis(W, basis)
    resid_a = A - g
    fit = fit_weighted_lasso(resid_a[:, None] * Phi, Y - theta,
                             unpenalized=_unpenalized(fb), config=lasso)
    sel = fit.selected
    beta = fit.beta[sel]
    Phi_s = Phi[:, sel]
    tau = Phi_s @ beta
    plug = float(np.mean(tau))

    info = (Phi_s * (g * (1 - g))[:, None]).T @ Phi_s / cohort.n
    info_inv, cond = _invert_information(info)
    resid = Y - theta - resid_a * tau
    score = (resid_a * resid)[:, None] * Phi_s
    d_beta = score @ info_inv
    means = Phi_s.mean(axis=0)
    d_beta_contrib = d_beta @ means

    point = plug + float(np.mean(d_beta_contrib))
    eic = tau - point + d_beta_contrib
    tau_fn = LinearPredictor(fb, fit.beta)
    proj = ProjectionFit(fb, fit, sel, beta, means, info, cond, plug, score.mean(axis=0))
    return wald_inference(point, eic, alpha), proj, tau_fn


def _zero_estimate(n: int, alpha: float) -> Estimate:
    return Estimate(0.0, np.zeros(n), 0.0, 0.0, 0.0, 1.0, n, alpha)


def estimate_bias_projection(cohort: Cohort, bundle: NuisanceBundle,
                             basis: BasisSpec = TAU_S_BASIS,
                             lasso: LassoConfig = LassoConfig(), alpha: float = 0.05,
                             ) -> tuple[Estimate, Optional[ProjectionFit], Optional[Callable]]:
    """Bias projection: ``E[Pi(0|W,0) tau_S(W,0) - Pi(0|W,1) tau_S(W,1)]``.

    ``tau_S`` is the R-loss working model for the trial-enrollment effect.
    The influence curve has a covariate part, a ``Pi``-residual part and a
    coefficient part. When ``Pi(0|W,a)`` is identically zero the estimand
    vanishes and a zero estimate is returned.
    """
    W, A, S, Y = cohort.w, cohort.a.astype(float), cohort.s.astype(float), cohort.y
    pi1_0 = bundle.pi_hat(W, 0)
    pi1_1 = bundle.pi_hat(W, 1)
    if np.all(pi1_0 == 1.0) and np.all(pi1_1 == 1.0):
        return _zero_estimate(cohort.n, alpha), None, None
    pi1 = np.where(A == 1, pi1_1, pi1_0)
    theta = bundle.theta_values(cohort)
    g = bundle.g_hat(W)
    qbar = theta + (A - g) * bundle.tau_a_hat(W)

    fb = fit_basis(W, basis)
    Phi = fb.design(W, A)
    Phi0 = fb.design(W, 0.0)
    Phi1 = fb.design(W, 1.0)
    resid_s = S - pi1
    fit = fit_weighted_lasso(resid_s[:, None] * Phi, Y - qbar,
                             unpenalized=_unpenalized(fb), config=lasso)
    sel = fit.selected
    beta = fit.beta[sel]
    tau_obs = Phi[:, sel] @ beta
    tau0 = Phi0[:, sel] @ beta
    tau1 = Phi1[:, sel] @ beta
    f = (1 - pi1_0) * tau0 - (1 - pi1_1) * tau1
    plug = float(np.mean(f))

    info = (Phi[:, sel] * (pi1 * (1 - pi1))[:, None]).T @ Phi[:, sel] / cohort.n
    info_inv, cond = _invert_information(info)
    resid = Y - qbar - resid_s * tau_obs
    score = (resid_s * resid)[:, None] * Phi[:, sel]
    d_beta = score @ info_inv
    means = np.mean((1 - pi1_0)[:, None] * Phi0[:, sel] - (1 - pi1_1)[:, None] * Phi1[:, sel], axis=0)
    d_beta_contrib = d_beta @ means

    gc = np.clip(g, bundle.clip, 1 - bundle.clip)
    n_clipped = int(np.sum(gc != g))
    if n_clipped:
        logger.info("bias projection: %d rows with g_hat clipped", n_clipped)
    d_pi = (A / gc * tau1 - (1 - A) / (1 - gc) * tau0) * resid_s

    point = plug + float(np.mean(d_pi + d_beta_contrib))
    eic = f - point + d_pi + d_beta_contrib
    proj = ProjectionFit(fb, fit, sel, beta, means, info, cond, plug, score.mean(axis=0))
    return wald_inference(point, eic, alpha), proj, LinearPredictor(fb, fit.beta)


def combine(pooled: Estimate, bias: Estimate, alpha: float = 0.05) -> Estimate:
    return wald_inference(pooled.point - bias.point, pooled.eic - bias.eic, alpha)


def estimate_atmle(cohort: Cohort, options: ATMLEOptions = ATMLEOptions(), *,
                   bundle: NuisanceBundle | None = None) -> ATMLEResult:
    """A-TMLE of the trial ATE over the pooled covariate distribution."""
    rct, ext = split_by_study(cohort)
    if ext.size == 0:
        raise PreconditionError("A-TMLE needs an external group; the bias projection is undefined")
    if rct.size == 0:
        raise PreconditionError("A-TMLE needs RCT rows")
    if bundle is None:
        bundle = build_nuisance_bundle(cohort, options.nuisance)
    pooled, pfit, tau_a = estimate_pooled_projection(
        cohort, bundle, options.tau_a_basis, options.lasso, options.alpha)
    bundle = bundle.with_tau_a(tau_a)
    bias, bfit, _ = estimate_bias_projection(
        cohort, bundle, options.tau_s_basis, options.lasso, options.alpha)
    g = bundle.g_hat(cohort.w)
    diag = {
        "g_min": float(g.min()), "g_max": float(g.max()),
        "pi1_min": float(min(bundle.pi_hat(cohort.w, 0).min(), bundle.pi_hat(cohort.w, 1).min())),
        "pi1_max": float(max(bundle.pi_hat(cohort.w, 0).max(), bundle.pi_hat(cohort.w, 1).max())),
    }
    return ATMLEResult(pooled, bias, combine(pooled, bias, options.alpha), pfit, bfit, diag)


def estimate_tmle_rct(cohort: Cohort, r: float | None = None, basis: BasisSpec = RCT_OUTCOME_BASIS,
                      lasso: LassoConfig = LassoConfig(), alpha: float = 0.05) -> Estimate:
    """RCT-only ATE with known randomisation probability ``r``.

    Outcome regression by relaxed lasso of ``Y`` on ``phi(W, A)``; the
    plug-in is corrected by the mean of the inverse-probability weighted
    residual term.
    """
    if np.any(cohort.s != 1):
        raise PreconditionError("estimate_tmle_rct expects RCT rows only (S=1)")
    r = cohort.r if r is None else r
    A = cohort.a.astype(float)
    if A.min() == A.max():
        raise PreconditionError("single-arm input: both treatment arms are required")
    fb = fit_basis(cohort.w, basis)
    Phi = fb.design(cohort.w, A)
    fit = fit_weighted_lasso(Phi, cohort.y, unpenalized=_unpenalized(fb), config=lasso)
    q_obs = Phi @ fit.beta
    q1 = fb.design(cohort.w, 1.0) @ fit.beta
    q0 = fb.design(cohort.w, 0.0) @ fit.beta
    return estimate_aipw(cohort.y, A, np.full(cohort.n, r), q1, q0, alpha, q_obs=q_obs)


def estimate_aipw(y, a, propensity, mu1=None, mu0=None, alpha: float = 0.05, *,
                  clip: float = DEFAULT_CLIP, q_obs=None) -> Estimate:
    """Augmented inverse probability weighted ATE.

    Point is the mean of ``mu1 - mu0 + (A/p - (1-A)/(1-p)) (Y - mu_A)``;
    the influence values are those summands centred at the point.
    Missing outcome predictions default to zero.
    """
    y = np.asarray(y, dtype=float)
    a = np.asarray(a, dtype=float)
    p = np.asarray(propensity, dtype=float)
    if np.any(p < clip) or np.any(p > 1 - clip):
        raise PreconditionError(f"propensity outside [{clip}, {1 - clip}]")
    mu1 = np.zeros_like(y) if mu1 is None else np.asarray(mu1, dtype=float)
    mu0 = np.zeros_like(y) if mu0 is None else np.asarray(mu0, dtype=float)
    mu_a = np.where(a == 1, mu1, mu0) if q_obs is None else np.asarray(q_obs)
    terms = mu1 - mu0 + (a / p - (1 - a) / (1 - p)) * (y - mu_a)
    point = float(np.mean(terms))
    return wald_inference(point, terms - point, alpha)


def aipw_from_cohort(cohort: Cohort, basis: BasisSpec = RCT_OUTCOME_BASIS,
                     lasso: LassoConfig = LassoConfig(), alpha: float = 0.05,
                     clip: float = DEFAULT_CLIP) -> Estimate:
    """AIPW on a cohort: known ``r`` for RCT rows, fitted score for external rows.

    With both study groups present the outcome model also includes ``S``.
    """
    from .nuisance import fit_score

    A = cohort.a.astype(float)
    rct, ext = split_by_study(cohort)
    p = np.full(cohort.n, cohort.r)
    if ext.size:
        e_hat, _ = fit_score(cohort.w[ext], cohort.a[ext], BasisSpec(), clip)
        p[ext] = e_hat(cohort.w[ext])
    fb = fit_basis(cohort.w, basis)
    extra = [cohort.s.astype(float)] if (rct.size and ext.size) else []

    def design(a):
        return np.column_stack([fb.design(cohort.w, a)] + extra)

    Phi = design(A)
    fit = fit_weighted_lasso(Phi, cohort.y, unpenalized=_unpenalized(fb), config=lasso)
    return estimate_aipw(cohort.y, A, p, design(1.0) @ fit.beta, design(0.0) @ fit.beta,
                         alpha, clip=clip, q_obs=Phi @ fit.beta)
