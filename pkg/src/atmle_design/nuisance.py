"""Basis expansion, regression solvers and nuisance-score composition."""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg
from scipy.special import expit

from .core import Cohort, PositivityError, PreconditionError, split_by_study

try:
    from numba import njit
except ImportError:  # pragma: no cover
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f

logger = logging.getLogger(__name__)

DEFAULT_CLIP = 0.005


class SeparationError(PreconditionError):
    def __init__(self, column: str, message: str | None = None):
        super().__init__(message or f"complete or quasi-complete separation on column {column!r}")
        self.column = column


class RankDeficiencyError(PreconditionError):
    def __init__(self, columns: Sequence[str]):
        super().__init__(f"design matrix is rank deficient; collinear columns {list(columns)}")
        self.columns = list(columns)


# ---------------------------------------------------------------------------
# Basis expansion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BasisSpec:
    """Working-model basis.

    ``scheme`` is ``"main_terms"`` (columns ``[1, W_1..W_d]``) or
    ``"indicator_hal0"`` (zero-order indicators ``1{W_j >= knot}`` at
    empirical quantiles, and their products up to ``max_interaction_depth``).
    ``interact_with_treatment`` appends ``A`` times every base column;
    ``treatment_main_effect`` appends the single column ``A`` instead.
    """

    scheme: str = "main_terms"
    knots_per_dim: int = 3
    max_interaction_depth: int = 1
    include_intercept: bool = True
    interact_with_treatment: bool = False
    treatment_main_effect: bool = False

    def __post_init__(self):
        if self.scheme not in ("main_terms", "indicator_hal0"):
            raise ValueError(f"unknown basis scheme {self.scheme!r}")
        if self.knots_per_dim < 1 or self.max_interaction_depth < 1:
            raise ValueError("knots_per_dim and max_interaction_depth must be positive")

    @property
    def uses_treatment(self) -> bool:
        return self.interact_with_treatment or self.treatment_main_effect


@dataclass(frozen=True, eq=False)
class FittedBasis:
    """A :class:`BasisSpec` with data-dependent knots resolved."""

    spec: BasisSpec
    d: int
    knots: tuple = ()
    terms: tuple = ()
    names: tuple = ()

    @property
    def n_columns(self) -> int:
        return len(self.names)

    @property
    def intercept_index(self) -> Optional[int]:
        return 0 if self.spec.include_intercept else None

    def design(self, w: np.ndarray, a=None) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if w.ndim == 1:
            w = w.reshape(-1, self.d)
        if w.shape[1] != self.d:
            raise ValueError(f"expected {self.d} covariates, got {w.shape[1]}")
        n = w.shape[0]
        cols = []
        if self.spec.include_intercept:
            cols.append(np.ones(n))
        if self.spec.scheme == "main_terms":
            cols.extend(w[:, j] for j in range(self.d))
        else:
            for term in self.terms:
                col = np.ones(n)
                for j, knot in term:
                    col = col * (w[:, j] >= knot)
                cols.append(col)
        base = np.column_stack(cols) if cols else np.empty((n, 0))
        if not self.spec.uses_treatment:
            return base
        if a is None:
            raise ValueError("this basis needs a treatment value")
        a = np.broadcast_to(np.asarray(a, dtype=float), (n,))
        if self.spec.interact_with_treatment:
            return np.hstack([base, base * a[:, None]])
        return np.hstack([base, a[:, None]])


def expand_basis(w: np.ndarray, spec: BasisSpec, a=None) -> tuple[np.ndarray, FittedBasis]:
    """Design matrix for ``spec`` together with its fitted column metadata.

    Column order: intercept, then main terms (or indicator terms) in
    covariate order, then interactions in lexicographic order, then
    treatment columns.
    """
    fb = fit_basis(w, spec)
    return fb.design(w, a), fb


def fit_basis(w: np.ndarray, spec: BasisSpec) -> FittedBasis:
    """Resolve knots and column names of ``spec`` on covariates ``w``."""
    w = np.asarray(w, dtype=float)
    if w.ndim == 1:
        w = w[:, None]
    n, d = w.shape
    if n < 1:
        raise ValueError("need at least one row")
    names = ["1"] if spec.include_intercept else []
    knots: list = []
    terms: list = []
    if spec.scheme == "main_terms":
        names += [f"W{j + 1}" for j in range(d)]
    else:
        probs = np.arange(1, spec.knots_per_dim + 1) / (spec.knots_per_dim + 1)
        singles = []
        for j in range(d):
            if np.ptp(w[:, j]) == 0:
                warnings.warn(f"covariate W{j + 1} is constant; no knots placed", RuntimeWarning)
                knots.append(())
                continue
            kj = tuple(float(v) for v in np.unique(np.quantile(w[:, j], probs)))
            knots.append(kj)
            singles.extend((j, k) for k in kj)
        for depth in range(1, spec.max_interaction_depth + 1):
            for combo in itertools.combinations(singles, depth):
                dims = [j for j, _ in combo]
                if len(set(dims)) < depth:
                    continue
                terms.append(tuple(combo))
                names.append("*".join(f"1{{W{j + 1}>={k:.4g}}}" for j, k in combo))
    base = list(names)
    if spec.interact_with_treatment:
        names += ["A" if c == "1" else f"A*{c}" for c in base]
    elif spec.treatment_main_effect:
        names.append("A")
    return FittedBasis(spec, d, tuple(knots), tuple(terms), tuple(names))


# ---------------------------------------------------------------------------
# Fits
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CoefficientFit:
    beta: np.ndarray
    selected: np.ndarray
    information: np.ndarray
    objective_trace: np.ndarray
    converged: bool = True
    n_iter: int = 0
    lambda_: float = 0.0
    lambda_grid: np.ndarray = field(default_factory=lambda: np.empty(0))
    cv_error: np.ndarray = field(default_factory=lambda: np.empty(0))


@dataclass(frozen=True, eq=False)
class LinearPredictor:
    """``link^{-1}(phi(W, a) @ beta)`` with optional probability clipping."""

    basis: FittedBasis
    beta: np.ndarray
    link: str = "identity"
    clip: float = 0.0

    def __call__(self, w, a=None) -> np.ndarray:
        eta = self.basis.design(w, a) @ self.beta
        if self.link == "identity":
            return eta
        p = expit(eta)
        if self.clip > 0:
            p = np.clip(p, self.clip, 1 - self.clip)
        return p


def logistic_loglik(X, y, beta, weights=None) -> float:
    """Weighted mean Bernoulli log-likelihood."""
    eta = X @ beta
    w = np.ones(len(y)) if weights is None else np.asarray(weights, float)
    ll = y * eta - np.logaddexp(0.0, eta)
    return float(np.sum(w * ll) / np.sum(w))


def logistic_score(X, y, beta, weights=None) -> np.ndarray:
    """Gradient of :func:`logistic_loglik` in ``beta``."""
    w = np.ones(len(y)) if weights is None else np.asarray(weights, float)
    return X.T @ (w * (y - expit(X @ beta))) / np.sum(w)


def _check_rank(X: np.ndarray, names: Sequence[str]) -> None:
    if X.shape[1] == 0:
        return
    _, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(X.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0) * 1e3
    rank = int(np.sum(diag > tol))
    if rank < X.shape[1]:
        raise RankDeficiencyError([names[j] for j in sorted(piv[rank:])])


def fit_logistic(X, y, weights=None, *, max_iter: int = 100, tol: float = 1e-8,
                 names: Sequence[str] | None = None) -> CoefficientFit:
    """Weighted logistic regression by damped IRLS (Newton) iterations.

    Converged when the largest score component (mean-normalised) is at most
    ``tol``. Raises :class:`SeparationError` when the likelihood has no
    finite maximiser and :class:`RankDeficiencyError` on collinear columns.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    names = list(names) if names is not None else [f"x{j}" for j in range(p)]
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise ValueError("logistic labels must be 0/1")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w < 0) or not np.any(w > 0):
        raise ValueError("weights must be nonnegative and not all zero")
    _check_rank(X[w > 0], names)
    pos = w > 0
    if np.all(y[pos] == y[pos][0]):
        raise SeparationError(names[0], "all labels identical; likelihood unbounded")
    wsum = np.sum(w)

    beta = np.zeros(p)
    ll = logistic_loglik(X, y, beta, w)
    trace = [-ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(X @ beta)
        score = X.T @ (w * (y - mu)) / wsum
        if np.max(np.abs(score)) <= tol:
            converged = True
            it -= 1
            break
        H = (X * (w * mu * (1 - mu))[:, None]).T @ X / wsum
        try:
            step = scipy.linalg.solve(H, score, assume_a="pos")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            step = np.linalg.lstsq(H, score, rcond=None)[0]
        t = 1.0
        for _ in range(21):
            cand = beta + t * step
            ll_new = logistic_loglik(X, y, cand, w)
            if ll_new >= ll - 1e-15 * abs(ll):
                break
            t *= 0.5
        else:
            break
        beta, ll = cand, max(ll_new, ll)
        trace.append(-ll)
        if np.max(np.abs(X @ beta)) > 35 or np.linalg.norm(beta) > 1e4:
            break
    eta = X @ beta
    mu = expit(eta)
    # a beta that classifies every row correctly separates the data, so the
    # small score at "convergence" only reflects a drift towards infinity
    separated = bool(np.all(((2 * y - 1) * eta)[pos] > 0))
    if not converged or separated:
        if separated or np.max(np.abs(eta)) > 35 or np.linalg.norm(beta) > 1e4 or it >= max_iter:
            scale = np.std(X, axis=0)
            contrib = np.abs(beta) * np.where(scale > 0, scale, 0.0)
            if contrib.max() == 0:
                contrib = np.abs(beta)
            j = int(np.argmax(contrib))
            raise SeparationError(names[j])
    info = (X * (w * mu * (1 - mu))[:, None]).T @ X / wsum
    return CoefficientFit(beta=beta, selected=np.arange(p), information=info,
                          objective_trace=np.array(trace), converged=converged, n_iter=it)


@njit(cache=True)
def _cd_solve(G, c, lam, penalized, beta, max_sweeps, tol, trace):
    # Cyclic coordinate descent on 0.5 b'Gb - c'b + lam * sum_{penalized} |b_j|.
    p = beta.shape[0]
    grad = c.copy()
    for k in range(p):
        for j in range(p):
            grad[k] -= G[k, j] * beta[j]
    n_sweeps = 0
    for sweep in range(max_sweeps):
        max_delta = 0.0
        for j in range(p):
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            z = grad[j] + gjj * beta[j]
            if penalized[j]:
                if z > lam:
                    new = (z - lam) / gjj
                elif z < -lam:
                    new = (z + lam) / gjj
                else:
                    new = 0.0
            else:
                new = z / gjj
            delta = new - beta[j]
            if delta != 0.0:
                for k in range(p):
                    grad[k] -= G[k, j] * delta
                beta[j] = new
                if abs(delta) > max_delta:
                    max_delta = abs(delta)
        quad = 0.0
        l1 = 0.0
        for j in range(p):
            s = 0.0
            for k in range(p):
                s += G[j, k] * beta[k]
            quad += beta[j] * (0.5 * s - c[j])
            if penalized[j]:
                l1 += abs(beta[j])
        trace[sweep] = quad + lam * l1
        n_sweeps = sweep + 1
        if max_delta < tol:
            break
    return n_sweeps


@dataclass(frozen=True)
class LassoConfig:
    """Lambda grid and cross-validation settings for :func:`fit_weighted_lasso`."""

    n_lambda: int = 50
    lambda_min_ratio: float = 1e-4
    cv_folds: int = 5
    seed: int = 0
    lambda_grid: Optional[tuple] = None
    max_sweeps: int = 10000
    tol: float = 1e-10


def _wls(X, y, w):
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    return coef


def _path(G, c, grid, penalized, max_sweeps, tol, keep_trace=False):
    p = G.shape[0]
    beta = np.zeros(p)
    out = np.zeros((len(grid), p))
    trace = np.zeros(max_sweeps)
    last = 0
    for i, lam in enumerate(grid):
        lam_eff = 1e300 if not np.isfinite(lam) else float(lam)
        last = _cd_solve(G, c, lam_eff, penalized, beta, max_sweeps, tol, trace)
        out[i] = beta
    return out, (trace[:last].copy() if keep_trace else None)


def fit_weighted_lasso(X, y, weights=None, lambda_grid=None, cv_folds: int | None = None, *,
                       unpenalized: Sequence[int] = (0,), config: LassoConfig = LassoConfig(),
                       ) -> CoefficientFit:
    """Weighted L1-penalised least squares with cross-validated lambda and relaxed refit.

    Minimises ``(1/2n) sum w (y - X b)^2 + lam * sum_{j penalised} |b_j|`` by
    cyclic coordinate descent on weight-standardised columns, picks ``lam``
    by ``cv_folds``-fold cross-validated weighted MSE (plain minimum), then
    refits unpenalised weighted least squares on the selected columns so the
    weighted normal equations hold exactly on them.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite entries in lasso inputs")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and nonnegative")
    if not np.any(w > 0):
        raise ValueError("all weights are zero")
    w = w / w.mean()
    cv_folds = config.cv_folds if cv_folds is None else cv_folds
    if cv_folds < 2:
        raise ValueError("cv_folds must be at least 2")

    scale = np.sqrt(np.mean(w[:, None] * X * X, axis=0))
    alive = scale > 0
    scale = np.where(alive, scale, 1.0)
    Xs = X / scale
    penalized = np.ones(p, dtype=np.bool_)
    penalized[list(unpenalized)] = False
    free = np.flatnonzero(~penalized & alive)

    Xw = Xs * w[:, None]
    G = Xw.T @ Xs / n
    c = Xw.T @ y / n
    G[~alive, :] = 0.0
    G[:, ~alive] = 0.0
    c[~alive] = 0.0

    pen_alive = penalized & alive
    if pen_alive.any():
        resid = y - (Xs[:, free] @ _wls(Xs[:, free], y, w) if free.size else 0.0)
        lam_max = float(np.max(np.abs(Xs[:, pen_alive].T @ (w * resid)) / n))
    else:
        lam_max = 0.0

    if lambda_grid is None:
        lambda_grid = config.lambda_grid
    if lambda_grid is None:
        grid = (np.array([0.0]) if lam_max <= 0 else
                np.geomspace(lam_max, lam_max * config.lambda_min_ratio, config.n_lambda))
    else:
        grid = np.asarray(lambda_grid, dtype=float).ravel()
        if grid.size == 0:
            raise ValueError("lambda_grid is empty")
        if np.any(np.diff(grid) > 0) or np.any(grid < 0):
            raise ValueError("lambda_grid must be nonnegative and decreasing")

    cv_err = np.empty(0)
    best = 0
    if grid.size > 1:
        k = min(cv_folds, n)
        folds = np.random.default_rng(config.seed).permutation(n) % k
        sse = np.zeros(grid.size)
        for f in range(k):
            tr = folds != f
            te = ~tr
            ntr = tr.sum()
            Gf = Xw[tr].T @ Xs[tr] / ntr
            cf = Xw[tr].T @ y[tr] / ntr
            Gf[~alive, :] = 0.0
            Gf[:, ~alive] = 0.0
            cf[~alive] = 0.0
            path, _ = _path(Gf, cf, grid, penalized, config.max_sweeps, config.tol)
            res = y[te][:, None] - Xs[te] @ path.T
            sse += np.sum(w[te][:, None] * res * res, axis=0)
        cv_err = sse / np.sum(w)
        best = int(np.argmin(cv_err))

    path, trace = _path(G, c, grid[: best + 1], penalized, config.max_sweeps, config.tol,
                        keep_trace=True)
    b_std = path[-1]
    # rounding can leave slopes of order 1e-17 at lambda_max; treat them as zero
    active = np.flatnonzero(((np.abs(b_std) > config.tol) | ~penalized) & alive)
    beta = np.zeros(p)
    if active.size:
        beta[active] = _wls(X[:, active], y, w)
    Xa = X[:, active]
    info = (Xa * w[:, None]).T @ Xa / n
    const = 0.5 * float(np.mean(w * y * y))
    return CoefficientFit(beta=beta, selected=active, information=info,
                          objective_trace=trace + const, converged=True,
                          n_iter=len(trace), lambda_=float(grid[best]),
                          lambda_grid=grid, cv_error=cv_err)


# ---------------------------------------------------------------------------
# Score composition and nuisance bundle
# ---------------------------------------------------------------------------

def compose_scores(q, e, r: float, a):
    """Marginal treatment probability ``g(1|W)`` and enrollment probability ``Pi(1|W,a)``.

    ``g = r q + e (1 - q)`` and ``Pi(1|W,a)`` is the share of the pooled
    ``A = a`` population at ``W`` that comes from the trial.
    """
    scalar = np.ndim(q) == 0 and np.ndim(e) == 0 and np.ndim(a) == 0
    q, e, a = (np.asarray(x, dtype=float) for x in np.broadcast_arrays(q, e, a))
    g = r * q + e * (1 - q)
    p_rct = np.where(a == 1, r, 1 - r)
    p_ext = np.where(a == 1, e, 1 - e)
    num = p_rct * q
    den = num + p_ext * (1 - q)
    bad = np.flatnonzero(np.atleast_1d(den) <= 0)
    if bad.size:
        raise PositivityError(f"no pooled units with this treatment at rows {bad[:10].tolist()}", bad)
    pi = num / den
    if scalar:
        return float(g), float(pi)
    return g, pi


def _const(value: float):
    def f(w, a=None):
        return np.full(np.shape(w)[0], value)
    return f


@dataclass(frozen=True)
class NuisanceOptions:
    basis: BasisSpec = BasisSpec()
    lasso: LassoConfig = LassoConfig()
    clip: float = DEFAULT_CLIP
    external_controls_only: Optional[bool] = None
    cross_fit_folds: int = 0


@dataclass(frozen=True, eq=False)
class NuisanceBundle:
    """Fitted (or oracle) nuisance functions.

    ``q_hat`` is the trial enrollment score, ``e_hat`` the external
    propensity score, ``theta_hat`` the marginal outcome regression.
    ``g_hat`` and ``pi_hat`` are derived through :func:`compose_scores`;
    ``qbar_hat`` becomes available after :meth:`with_tau_a`.
    """

    q_hat: Callable
    e_hat: Callable
    r: float
    theta_hat: Callable
    tau_a_hat: Optional[Callable] = None
    clip: float = DEFAULT_CLIP
    external_controls_only: bool = False
    theta_rows: Optional[np.ndarray] = None
    q_fit: Optional[CoefficientFit] = None
    e_fit: Optional[CoefficientFit] = None

    def g_hat(self, w) -> np.ndarray:
        return compose_scores(self.q_hat(w), self.e_hat(w), self.r, 1)[0]

    def pi_hat(self, w, a) -> np.ndarray:
        return compose_scores(self.q_hat(w), self.e_hat(w), self.r, a)[1]

    def theta_values(self, cohort: Cohort) -> np.ndarray:
        if self.theta_rows is not None:
            return self.theta_rows
        return self.theta_hat(cohort.w)

    def with_tau_a(self, tau_a: Callable) -> "NuisanceBundle":
        return replace(self, tau_a_hat=tau_a)

    def qbar_hat(self, w, a) -> np.ndarray:
        if self.tau_a_hat is None:
            raise RuntimeError("qbar_hat needs the CATE fit; call with_tau_a first")
        a = np.asarray(a, dtype=float)
        return self.theta_hat(w) + (a - self.g_hat(w)) * self.tau_a_hat(w)


def fit_theta(cohort: Cohort, basis: BasisSpec = BasisSpec(), lasso: LassoConfig = LassoConfig(),
              rows: np.ndarray | None = None) -> LinearPredictor:
    """Lasso regression of ``Y`` on ``phi(W)`` over the pooled cohort (or ``rows``)."""
    idx = np.arange(cohort.n) if rows is None else np.asarray(rows)
    Phi, fb = expand_basis(cohort.w[idx], basis)
    unpen = (fb.intercept_index,) if fb.intercept_index is not None else ()
    fit = fit_weighted_lasso(Phi, cohort.y[idx], unpenalized=unpen, config=lasso)
    return LinearPredictor(fb, fit.beta)


def fit_score(w, labels, basis: BasisSpec, clip: float):
    Phi, fb = expand_basis(w, basis)
    fit = fit_logistic(Phi, labels, names=fb.names)
    return LinearPredictor(fb, fit.beta, link="logit", clip=clip), fit


def build_nuisance_bundle(cohort: Cohort, options: NuisanceOptions = NuisanceOptions(), *,
                          oracle_q: Callable | None = None,
                          oracle_e: Callable | None = None) -> NuisanceBundle:
    """Fit ``q_hat``, ``e_hat`` and ``theta_hat`` and compose ``g_hat``/``pi_hat``.

    Oracle score functions, when given, are used verbatim (no clipping).
    """
    rct, ext = split_by_study(cohort)
    if rct.size == 0 or ext.size == 0:
        raise PreconditionError("cohort needs both RCT (S=1) and external (S=0) rows")
    basis = replace(options.basis, interact_with_treatment=False, treatment_main_effect=False)

    q_fit = e_fit = None
    if oracle_q is not None:
        q_hat = oracle_q
    else:
        q_hat, q_fit = fit_score(cohort.w, cohort.s, basis, options.clip)

    ext_treated = int(cohort.a[ext].sum())
    controls_only = options.external_controls_only
    if controls_only is None:
        controls_only = ext_treated == 0
    if oracle_e is not None:
        e_hat = oracle_e
    elif controls_only:
        if ext_treated:
            raise PreconditionError("external_controls_only declared but external arm has treated rows")
        e_hat = _const(0.0)
    else:
        if ext_treated == ext.size:
            raise PreconditionError("external arm has no controls")
        e_hat, e_fit = fit_score(cohort.w[ext], cohort.a[ext], basis, options.clip)

    theta = fit_theta(cohort, basis, options.lasso)
    theta_rows = None
    if options.cross_fit_folds >= 2:
        folds = np.random.default_rng(options.lasso.seed + 1).permutation(cohort.n) % options.cross_fit_folds
        theta_rows = np.empty(cohort.n)
        for f in range(options.cross_fit_folds):
            tr = np.flatnonzero(folds != f)
            te = np.flatnonzero(folds == f)
            theta_rows[te] = fit_theta(cohort, basis, options.lasso, rows=tr)(cohort.w[te])
        theta_rows.setflags(write=False)

    bundle = NuisanceBundle(q_hat=q_hat, e_hat=e_hat, r=cohort.r, theta_hat=theta,
                            clip=options.clip, external_controls_only=bool(controls_only),
                            theta_rows=theta_rows, q_fit=q_fit, e_fit=e_fit)
    # surfaces positivity failures of oracle scores with row indices
    bundle.pi_hat(cohort.w, 0)
    bundle.pi_hat(cohort.w, 1)
    return bundle
