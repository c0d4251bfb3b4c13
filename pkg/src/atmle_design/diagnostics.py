"""Monte Carlo checks of the estimator's robustness structure and match balance.

The remainder evaluators integrate the second-order expansions of the two
projection parameters over covariate draws from a known truth. They use
exact sums over ``A`` (weights ``g_0``) and only sample ``W``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .core import Cohort
from .nuisance import (
    BasisSpec,
    FittedBasis,
    SeparationError,
    RankDeficiencyError,
    compose_scores,
    expand_basis,
    fit_basis,
    fit_logistic,
)


# ---------------------------------------------------------------------------
# Balance
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BalanceReport:
    refit_enrollment_coefs: np.ndarray
    max_abs_coef: float
    smd: np.ndarray
    separated: bool = False

    def to_dict(self) -> dict:
        return {"refit_enrollment_coefs": self.refit_enrollment_coefs.tolist(),
                "max_abs_coef": self.max_abs_coef, "smd": self.smd.tolist(),
                "separated": self.separated}


def balance_report(cohort: Cohort, rows: Sequence[int] | None = None) -> BalanceReport:
    """Logistic refit of ``S ~ [1, W]`` and standardized mean differences.

    A separated or collinear fit is reported with ``separated=True`` and
    infinite ``max_abs_coef`` rather than raised.
    """
    idx = np.arange(cohort.n) if rows is None else np.asarray(rows, dtype=np.int64)
    s = cohort.s[idx]
    w = cohort.w[idx]
    if s.min() == s.max():
        raise ValueError("balance_report needs both study groups")
    w1, w0 = w[s == 1], w[s == 0]
    pooled_sd = np.sqrt((w1.var(axis=0, ddof=1 if len(w1) > 1 else 0)
                         + w0.var(axis=0, ddof=1 if len(w0) > 1 else 0)) / 2)
    diff = w1.mean(axis=0) - w0.mean(axis=0)
    smd = np.divide(diff, pooled_sd, out=np.zeros_like(diff), where=pooled_sd > 0)
    X, fb = expand_basis(w, BasisSpec())
    try:
        fit = fit_logistic(X, s, names=fb.names)
    except (SeparationError, RankDeficiencyError):
        d = w.shape[1]
        return BalanceReport(np.full(d, np.nan), math.inf, smd, separated=True)
    coefs = fit.beta[1:]
    return BalanceReport(coefs, float(np.max(np.abs(coefs))) if coefs.size else 0.0, smd)


# ---------------------------------------------------------------------------
# Truth and candidate distributions
# ---------------------------------------------------------------------------

def normal_sampler(d: int = 3, mean: float | Sequence[float] = 0.0, sd: float = 1.0):
    mean = np.broadcast_to(np.asarray(mean, dtype=float), (d,))

    def sample(n: int, seed: int) -> np.ndarray:
        return mean + sd * np.random.default_rng(seed).standard_normal((n, d))
    return sample


@dataclass(frozen=True)
class TruthSpec:
    """Known data-generating nuisance functions.

    ``qbar0`` defaults to ``theta0 + (a - g0) * tau_a0``.
    """

    q0: Callable
    e0: Callable
    r: float
    theta0: Callable
    tau_a0: Callable
    tau_s0: Callable
    sampler: Callable
    qbar0: Optional[Callable] = None

    def g0(self, w):
        return compose_scores(self.q0(w), self.e0(w), self.r, 1)[0]

    def pi0(self, w, a):
        return compose_scores(self.q0(w), self.e0(w), self.r, a)[1]

    def qbar(self, w, a):
        if self.qbar0 is not None:
            return self.qbar0(w, a)
        return self.theta0(w) + (np.asarray(a, float) - self.g0(w)) * self.tau_a0(w)


@dataclass(frozen=True)
class Candidate:
    """The estimated distribution ``P`` entering a remainder.

    ``pi(W, a)`` is ``Pi_P(1|W,a)``; ``tau_a`` and ``tau_s`` must lie in the
    span of the working bases.
    """

    g: Callable
    pi: Callable
    theta: Callable
    qbar: Callable
    tau_a: Callable
    tau_s: Callable


@dataclass(frozen=True)
class MCResult:
    value: float
    se: float
    n: int

    def within(self, k: float = 3.0, target: float = 0.0, atol: float = 1e-12) -> bool:
        return abs(self.value - target) <= k * self.se + atol


def _fmean(x: np.ndarray) -> float:
    return math.fsum(x) / x.shape[0]


def _col_means(M: np.ndarray) -> np.ndarray:
    return np.array([_fmean(M[:, j]) for j in range(M.shape[1])])


def _mc_result(per_draw: np.ndarray) -> MCResult:
    n = per_draw.shape[0]
    return MCResult(_fmean(per_draw), float(np.std(per_draw, ddof=1) / math.sqrt(n)), n)


def _resolve(basis, w):
    # fitted bases (anything with a design method) are used as given
    return basis if hasattr(basis, "design") else fit_basis(w, basis)


def project_tau_a(truth: TruthSpec, basis, w: np.ndarray) -> tuple[np.ndarray, FittedBasis]:
    """Coefficients of the ``g0(1-g0)``-weighted projection of ``tau_a0`` onto ``basis``."""
    fb = _resolve(basis, w)
    Phi = fb.design(w)
    g0 = truth.g0(w)
    wt = g0 * (1 - g0)
    M = (Phi * wt[:, None]).T @ Phi
    beta = np.linalg.solve(M, (Phi * wt[:, None]).T @ truth.tau_a0(w))
    return beta, fb


def project_tau_s(truth: TruthSpec, basis, w: np.ndarray) -> tuple[np.ndarray, FittedBasis]:
    """Coefficients of the ``Pi0(1-Pi0)``-weighted projection of ``tau_s0`` over ``(W, A)``."""
    fb = _resolve(basis, w)
    g1 = truth.g0(w)
    M = 0.0
    v = 0.0
    for a, pa in ((0.0, 1 - g1), (1.0, g1)):
        Phi = fb.design(w, a)
        pi = truth.pi0(w, a)
        wt = pa * pi * (1 - pi)
        M = M + (Phi * wt[:, None]).T @ Phi
        v = v + (Phi * wt[:, None]).T @ truth.tau_s0(w, a)
    return np.linalg.solve(M, v), fb


def exact_remainder_pooled(candidate: Candidate, truth: TruthSpec, basis, mc_n: int = 100_000,
                           seed: int = 0) -> MCResult:
    """Exact remainder of the pooled-ATE projection parameter.

    ``sum_j E phi_j [I_P^{-1} E_0(h)]_j`` where ``h`` collects the four
    products of ``g_P - g_0`` with the outcome-regression and working-model
    errors, and ``I_P = E g_P(1-g_P) phi phi'``.
    """
    if mc_n < 10_000:
        raise ValueError("mc_n must be at least 10^4")
    w = truth.sampler(mc_n, seed)
    beta0, fb = project_tau_a(truth, basis, w)
    Phi = fb.design(w)
    tau0 = Phi @ beta0
    gP, g0 = candidate.g(w), truth.g0(w)
    tauP = candidate.tau_a(w)
    dg = gP - g0
    dtau = tauP - tau0
    h = (dg * (candidate.theta(w) - truth.theta0(w))
         + dg * (1 - gP) * dtau
         - dg ** 2 * tauP
         - dg * g0 * dtau)
    info = (Phi * (gP * (1 - gP))[:, None]).T @ Phi / mc_n
    coef = np.linalg.solve(info, _col_means(Phi))
    return _mc_result((h[:, None] * Phi) @ coef)


def exact_remainder_bias(candidate: Candidate, truth: TruthSpec, basis, mc_n: int = 100_000,
                         seed: int = 0, clip: float = 0.0) -> MCResult:
    """Exact remainder of the bias projection parameter.

    The information ``I_P = E Pi_P(1-Pi_P) phi phi'`` integrates ``A`` with
    the true ``g_0``. ``g_P`` values within ``clip`` of 0 or 1 are clipped in
    the ratio denominators; :func:`remainder_bias_details` also returns how
    many were.
    """
    return remainder_bias_details(candidate, truth, basis, mc_n, seed, clip)[0]


def remainder_bias_details(candidate: Candidate, truth: TruthSpec, basis, mc_n: int = 100_000,
                           seed: int = 0, clip: float = 0.0) -> tuple[MCResult, int]:
    if mc_n < 10_000:
        raise ValueError("mc_n must be at least 10^4")
    w = truth.sampler(mc_n, seed)
    beta0, fb = project_tau_s(truth, basis, w)
    gP1 = candidate.g(w)
    g01 = truth.g0(w)
    gP1c = np.clip(gP1, clip, 1 - clip) if clip > 0 else gP1
    n_clipped = int(np.sum(gP1c != gP1))

    per = np.zeros(mc_n)
    # first four terms: functions of W only
    for a, sign in ((1.0, 1.0), (0.0, -1.0)):
        gPa = gP1c if a == 1 else 1 - gP1c
        g0a = g01 if a == 1 else 1 - g01
        dpi1 = candidate.pi(w, a) - truth.pi0(w, a)
        tauP = candidate.tau_s(w, a)
        tau0 = fb.design(w, a) @ beta0
        per += sign * (gPa - g0a) / gPa * tauP * dpi1
        # (Pi_P - Pi_0)(0|W,a) = -dpi1
        per += sign * (tauP - tau0) * (-dpi1)

    # coefficient block
    c = np.zeros(fb.n_columns)
    info = np.zeros((fb.n_columns, fb.n_columns))
    hPhi = np.zeros((mc_n, fb.n_columns))
    for a in (0.0, 1.0):
        pa = g01 if a == 1 else 1 - g01
        Phi = fb.design(w, a)
        piP = candidate.pi(w, a)
        pi0 = truth.pi0(w, a)
        tauP = candidate.tau_s(w, a)
        tau0 = Phi @ beta0
        dpi = piP - pi0
        dtau = tauP - tau0
        h = (dpi * (candidate.qbar(w, a) - truth.qbar(w, a))
             + dpi * (1 - piP) * dtau
             - dpi ** 2 * tauP
             - dpi * pi0 * dtau)
        hPhi += (pa * h)[:, None] * Phi
        info += (Phi * (pa * piP * (1 - piP))[:, None]).T @ Phi / mc_n
        c += (1 if a == 0 else -1) * _col_means((1 - piP)[:, None] * Phi)
    coef = np.linalg.solve(info, c)
    per += hPhi @ coef
    return _mc_result(per), n_clipped


def true_candidate(truth: TruthSpec, basis_a, basis_s, w: np.ndarray) -> Candidate:
    """The candidate equal to the (projected) truth on all components."""
    ba, fa = project_tau_a(truth, basis_a, w)
    bs, fs = project_tau_s(truth, basis_s, w)
    return Candidate(g=truth.g0, pi=truth.pi0, theta=truth.theta0, qbar=truth.qbar,
                     tau_a=lambda x: fa.design(x) @ ba,
                     tau_s=lambda x, a: fs.design(x, a) @ bs)


# ---------------------------------------------------------------------------
# Oracle bias
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OracleBias:
    total: MCResult
    pooled: MCResult
    bias: MCResult
    weighted_mse_a: float
    weighted_mse_s: float
    adjusted_r2_s: float


def oracle_bias_mc(truth: TruthSpec, basis_a, basis_s, mc_n: int = 100_000,
                   seed: int = 0) -> OracleBias:
    """Projection estimand minus the nonparametric estimand.

    The pooled part is ``E[tau_{A,beta0} - tau_A0]``; the bias part is
    ``E[Pi0(0|W,0) d(W,0) - Pi0(0|W,1) d(W,1)]`` with ``d`` the projection
    error of ``tau_S0``. The total is pooled part minus bias part.
    """
    if mc_n < 100_000:
        raise ValueError("mc_n must be at least 10^5")
    w = truth.sampler(mc_n, seed)
    try:
        ba, fa = project_tau_a(truth, basis_a, w)
        bs, fs = project_tau_s(truth, basis_s, w)
    except np.linalg.LinAlgError as exc:
        raise ValueError("singular population information for the working basis") from exc
    da = fa.design(w) @ ba - truth.tau_a0(w)
    g1 = truth.g0(w)
    ga = g1 * (1 - g1)
    ds = {}
    per_bias = np.zeros(mc_n)
    wmse_s = 0.0
    wvar_parts = []
    for a in (0.0, 1.0):
        tau_true = truth.tau_s0(w, a)
        ds[a] = fs.design(w, a) @ bs - tau_true
        pi = truth.pi0(w, a)
        per_bias += (1 if a == 0 else -1) * (1 - pi) * ds[a]
        pa = g1 if a == 1 else 1 - g1
        wt = pa * pi * (1 - pi)
        wmse_s += _fmean(wt * ds[a] ** 2)
        wvar_parts.append((wt, tau_true))
    wsum = sum(_fmean(wt) for wt, _ in wvar_parts)
    mu = sum(_fmean(wt * t) for wt, t in wvar_parts) / wsum
    wvar = sum(_fmean(wt * (t - mu) ** 2) for wt, t in wvar_parts)
    r2 = 1 - wmse_s / wvar if wvar > 0 else 1.0
    p = fs.n_columns
    n_eff = mc_n * 2
    adj_r2 = 1 - (1 - r2) * (n_eff - 1) / (n_eff - p - 1)
    pooled = _mc_result(da)
    bias = _mc_result(per_bias)
    total = _mc_result(da - per_bias)
    return OracleBias(total, pooled, bias, _fmean(ga * da ** 2) / _fmean(ga), wmse_s / wsum, adj_r2)


# ---------------------------------------------------------------------------
# Built-in scenarios
# ---------------------------------------------------------------------------

def _lin(c0: float, coefs: Sequence[float]):
    coefs = np.asarray(coefs, dtype=float)

    def f(w):
        return c0 + w @ coefs
    return f


def scenario_truth(q=(-0.5, 0.3, -0.3, 0.2), e=(0.0, 0.3, -0.3, 0.0), r: float = 0.5,
                   w3_bias: float = 0.2, constant_scores: bool = False,
                   cate_curvature: float = 0.3, w3_treated_bias: float = 0.0) -> TruthSpec:
    """A three-covariate truth with an outcome and bias shaped like the simulation DGP.

    ``tau_A0(W) = 0.5 + cate_curvature W1^2`` and
    ``tau_S0(W, a) = -(0.5 + 1.4 W1 a + w3_bias W3 + w3_treated_bias W3 a)``,
    i.e. the external outcome is shifted by the bias term.
    """
    if constant_scores:
        q = (q[0], 0.0, 0.0, 0.0)
        e = (e[0], 0.0, 0.0, 0.0)
    q_lin, e_lin = _lin(q[0], q[1:]), _lin(e[0], e[1:])
    return TruthSpec(
        q0=lambda w: expit(q_lin(w)),
        e0=lambda w: expit(e_lin(w)),
        r=r,
        theta0=lambda w: 2.5 + 0.9 * w[:, 0] + 1.1 * w[:, 1] + 2.7 * w[:, 2],
        tau_a0=lambda w: 0.5 + cate_curvature * w[:, 0] ** 2,
        tau_s0=lambda w, a: -(0.5 + 1.4 * w[:, 0] * np.asarray(a, float) + w3_bias * w[:, 2]
                              + w3_treated_bias * w[:, 2] * np.asarray(a, float)),
        sampler=normal_sampler(3),
    )


def perturbed_candidate(truth: TruthSpec, basis_a, basis_s, w: np.ndarray, *, g_eps: float = 0.0,
                        pi_eps: float = 0.0, wrong_outcome: bool = False) -> Candidate:
    """True candidate with additive score perturbations and optionally wrong outcome models.

    The wrong working-model fits stay inside the main-term span, which the
    exact remainder identities presuppose.
    """
    base = true_candidate(truth, basis_a, basis_s, w)
    g = (lambda x: base.g(x) + g_eps) if g_eps else base.g
    pi = (lambda x, a: base.pi(x, a) + pi_eps) if pi_eps else base.pi
    if not wrong_outcome:
        return Candidate(g, pi, base.theta, base.qbar, base.tau_a, base.tau_s)
    return Candidate(
        g, pi,
        theta=lambda x: 1.0 + 0.5 * x[:, 0],
        qbar=lambda x, a: -1.0 + 2.0 * x[:, 1] + 0.7 * np.asarray(a, float),
        tau_a=lambda x: 1.5 - 0.8 * x[:, 0] + 0.4 * x[:, 2],
        tau_s=lambda x, a: 0.3 + 0.9 * x[:, 1] - 1.1 * x[:, 0],
    )


def loglog_slope(eps: Sequence[float], values: Sequence[float]) -> float:
    x = np.log(np.asarray(eps, float))
    y = np.log(np.abs(np.asarray(values, float)))
    return float(np.polyfit(x, y, 1)[0])


@dataclass(frozen=True)
class LadderRow:
    w3_weight: float
    adjusted_r2: float
    weighted_mse: float
    oracle_bias: float
    se: float


def ladder_truth(w3_weight: float) -> TruthSpec:
    """Scores depending on ``W3`` and a CATE inside the main-term span.

    Only the enrollment-effect model is misspecified, so the oracle bias is
    driven entirely by the omitted ``W3`` term.
    """
    return scenario_truth(q=(-0.5, 0.3, -0.3, 0.5), e=(0.0, 0.3, -0.3, 0.5), w3_bias=w3_weight,
                          cate_curvature=0.0)


def oracle_bias_ladder(weights: Sequence[float] = (0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5, 0.6, 0.8, 1.0),
                       mc_n: int = 200_000, seed: int = 0) -> list[LadderRow]:
    """Oracle bias as the omitted ``W3`` term of the enrollment effect grows.

    The bias working basis is ``[1, W1, W2, A, A*W1, A*W2]`` (no ``W3``);
    the CATE basis is main terms.
    """
    basis_a = BasisSpec()
    basis_s = BasisSpec(interact_with_treatment=True)
    rows = []
    for k in weights:
        truth = ladder_truth(k)
        w = truth.sampler(mc_n, seed)
        fs = _drop_w3(fit_basis(w, basis_s))
        res = oracle_bias_mc(truth, basis_a, fs, mc_n, seed)
        rows.append(LadderRow(k, res.adjusted_r2_s, res.weighted_mse_s, res.total.value, res.total.se))
    return rows


def _drop_w3(fb: FittedBasis) -> "SubsetBasis":
    keep = [i for i, nme in enumerate(fb.names) if "W3" not in nme]
    return SubsetBasis(fb, tuple(keep))


@dataclass(frozen=True, eq=False)
class SubsetBasis:
    """A fitted basis restricted to a subset of its columns."""

    parent: FittedBasis
    keep: tuple

    @property
    def names(self):
        return tuple(self.parent.names[i] for i in self.keep)

    @property
    def n_columns(self) -> int:
        return len(self.keep)

    @property
    def intercept_index(self):
        return 0 if 0 in self.keep else None

    def design(self, w, a=None):
        return self.parent.design(w, a)[:, list(self.keep)]
