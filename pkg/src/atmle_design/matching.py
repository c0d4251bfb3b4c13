"""Outcome-blind two-stage selection of external patients.

Stage 1 matches every RCT unit to ``k`` externals on the trial enrollment
score. Stage 2 re-estimates the propensity score inside the stage-1 subset
and pairs each external treated unit with ``m`` external controls. No
function here reads ``Y``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import logit

from .core import Cohort, PreconditionError, split_by_study
from .diagnostics import BalanceReport, balance_report
from .nuisance import DEFAULT_CLIP, BasisSpec, fit_score, expand_basis, fit_logistic

logger = logging.getLogger(__name__)

SCALES = ("logit", "probability")
POLICIES = ("best_distance", "random")


class MatchingError(PreconditionError):
    """Matching cannot proceed; ``shortfall`` is the number of missing matches."""

    def __init__(self, message: str, shortfall: int = 0):
        super().__init__(message)
        self.shortfall = int(shortfall)


@dataclass(frozen=True)
class MatchSpec:
    k: int = 30
    m: int = 1
    score_scale: str = "logit"
    replacement: bool = False
    caliper: Optional[float] = None
    target_external_n: Optional[int] = None

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.m < 0:
            raise ValueError("m must be nonnegative")
        if self.score_scale not in SCALES:
            raise ValueError(f"score_scale must be one of {SCALES}")
        if self.caliper is not None and not self.caliper > 0:
            raise ValueError("caliper must be positive")
        if self.target_external_n is not None and self.target_external_n < 1:
            raise ValueError("target_external_n must be positive")


@dataclass(frozen=True)
class MatchGroup:
    """One anchor and the units matched to it.

    In stage 1 the anchor is an RCT row and is not part of the external
    selection. In stage 2 the anchor is an external treated row and is.
    """

    anchor: int
    members: tuple
    distances: tuple

    @property
    def distance(self) -> float:
        return float(np.mean(self.distances)) if self.distances else 0.0


@dataclass(frozen=True, eq=False)
class MatchResult:
    selected_external: np.ndarray
    pair_distances: np.ndarray
    stage: str
    groups: tuple
    rct_rows: np.ndarray
    balance_before: Optional[BalanceReport] = None
    balance_after: Optional[BalanceReport] = None
    shortfall: dict = field(default_factory=dict)
    dropped: tuple = ()
    ps_coef_before: Optional[np.ndarray] = None
    ps_coef_after: Optional[np.ndarray] = None

    @property
    def n_external(self) -> int:
        return int(self.selected_external.size)

    def cohort_rows(self) -> np.ndarray:
        """RCT rows followed by the selected externals, ascending within each."""
        return np.concatenate([self.rct_rows, self.selected_external])


def _scale(p: np.ndarray, scale: str) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if scale == "probability":
        return p
    with np.errstate(divide="ignore"):
        return logit(p)


class _Pool:
    """Sorted scores with O(alpha(n)) "nearest still available" lookups."""

    def __init__(self, rows: np.ndarray, scores: np.ndarray):
        order = np.lexsort((rows, scores))
        self.rows = rows[order]
        self.v = scores[order]
        n = self.v.size
        self.n = n
        self.right = np.arange(n + 1)
        self.left = np.arange(n + 1)  # left[i + 1] -> i; left[0] is the sentinel -1
        self.available = n

    @staticmethod
    def _find(parent: np.ndarray, x: int) -> int:
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def nearest(self, x: float) -> int:
        """Position of the nearest available unit; ties go to the lower row index."""
        p = int(np.searchsorted(self.v, x))
        r = self._find(self.right, p)
        l = self._find(self.left, p) - 1
        if r >= self.n:
            return l
        if l < 0:
            return r
        dl, dr = x - self.v[l], self.v[r] - x
        if dl < dr or (dl == dr and self.rows[l] < self.rows[r]):
            return l
        return r

    def remove(self, pos: int) -> None:
        self.right[pos] = pos + 1
        self.left[pos + 1] = pos
        self.available -= 1

    def k_nearest_static(self, x: float, k: int) -> list[int]:
        """k nearest positions ignoring removals (matching with replacement)."""
        p = int(np.searchsorted(self.v, x))
        lo, hi, out = p - 1, p, []
        while len(out) < k and (lo >= 0 or hi < self.n):
            if hi >= self.n or (lo >= 0 and (x - self.v[lo] < self.v[hi] - x or (
                    x - self.v[lo] == self.v[hi] - x and self.rows[lo] < self.rows[hi]))):
                out.append(lo)
                lo -= 1
            else:
                out.append(hi)
                hi += 1
        return out


def _greedy(anchor_rows, anchor_scores, pool_rows, pool_scores, k, replacement, caliper,
            drop_incomplete=False):
    """Greedy 1:k nearest-neighbour matching; anchors in descending score order."""
    pool = _Pool(np.asarray(pool_rows), np.asarray(pool_scores, dtype=float))
    order = np.lexsort((anchor_rows, -np.asarray(anchor_scores)))
    groups, shortfall, dropped = [], {}, []
    for i in order:
        x = float(anchor_scores[i])
        if replacement:
            picks = pool.k_nearest_static(x, k)
        else:
            picks = []
            if drop_incomplete and pool.available < k:
                dropped.append(int(anchor_rows[i]))
                continue
            for _ in range(k):
                if pool.available == 0:
                    break
                pos = pool.nearest(x)
                if caliper is not None and abs(pool.v[pos] - x) > caliper:
                    break
                pool.remove(pos)
                picks.append(pos)
        if caliper is not None and replacement:
            picks = [p for p in picks if abs(pool.v[p] - x) <= caliper]
        if drop_incomplete and len(picks) < k:
            # only reachable with replacement; removed picks are not restored
            dropped.append(int(anchor_rows[i]))
            continue
        if len(picks) < k:
            shortfall[int(anchor_rows[i])] = k - len(picks)
        groups.append(MatchGroup(int(anchor_rows[i]),
                                 tuple(int(pool.rows[p]) for p in picks),
                                 tuple(float(abs(pool.v[p] - x)) for p in picks)))
    return groups, shortfall, dropped


def apply_eligibility_filter(cohort: Cohort, predicate: Callable[[np.ndarray], bool],
                             rows: Sequence[int] | None = None) -> np.ndarray:
    """External rows whose covariate vector satisfies ``predicate``.

    The predicate sees covariates only. Order of ``rows`` is preserved.
    """
    if rows is None:
        rows = split_by_study(cohort)[1]
    rows = np.asarray(rows, dtype=np.int64)
    keep = [bool(predicate(cohort.w[i])) for i in rows]
    return rows[np.asarray(keep, dtype=bool)] if rows.size else rows


def fit_enrollment_score(cohort: Cohort, rows: Sequence[int] | None = None,
                         basis: BasisSpec = BasisSpec(), clip: float = DEFAULT_CLIP) -> np.ndarray:
    """Fitted ``P(S=1|W)`` for every cohort row from a logistic fit on ``rows``."""
    idx = np.arange(cohort.n) if rows is None else np.asarray(rows, dtype=np.int64)
    pred, _ = fit_score(cohort.w[idx], cohort.s[idx], basis, clip)
    return pred(cohort.w)


def match_trial_enrollment(cohort: Cohort, q_hat, spec: MatchSpec = MatchSpec(),
                           candidates: Sequence[int] | None = None) -> MatchResult:
    """Stage 1: each RCT unit gets ``k`` externals nearest in enrollment score.

    ``q_hat`` is either an array with one score per cohort row or a
    callable on covariates. ``candidates`` restricts the external pool,
    e.g. to the output of :func:`apply_eligibility_filter`.
    """
    rct, ext = split_by_study(cohort)
    if candidates is not None:
        ext = np.asarray(candidates, dtype=np.int64)
        if np.any(cohort.s[ext] != 0):
            raise ValueError("candidates must be external rows")
    if rct.size == 0:
        raise MatchingError("no RCT rows to match")
    q = np.asarray(q_hat(cohort.w) if callable(q_hat) else q_hat, dtype=float)
    if q.shape != (cohort.n,):
        raise ValueError("q_hat must give one score per cohort row")
    need = spec.k * rct.size
    if not spec.replacement and ext.size < need:
        raise MatchingError(
            f"external pool has {ext.size} rows but k*n_rct = {need} are needed", need - ext.size)
    z = _scale(q, spec.score_scale)
    groups, shortfall, _ = _greedy(rct, z[rct], ext, z[ext], spec.k, spec.replacement, spec.caliper)
    if shortfall:
        logger.warning("%d RCT units received fewer than k=%d matches (caliper)",
                       len(shortfall), spec.k)
    members = [m for g in groups for m in g.members]
    selected = np.unique(np.asarray(members, dtype=np.int64))
    dist = np.asarray([d for g in groups for d in g.distances])
    before = _safe_balance(cohort, np.concatenate([rct, ext]))
    after = _safe_balance(cohort, np.concatenate([rct, selected]))
    return MatchResult(selected, dist, "tes_only", tuple(groups), rct, before, after, shortfall)


def _safe_balance(cohort: Cohort, rows: np.ndarray) -> Optional[BalanceReport]:
    s = cohort.s[rows]
    if s.size == 0 or s.min() == s.max():
        return None
    return balance_report(cohort, rows)


def _ps_coefs(cohort: Cohort, rows: np.ndarray) -> Optional[np.ndarray]:
    a = cohort.a[rows]
    if a.min() == a.max():
        return None
    X, fb = expand_basis(cohort.w[rows], BasisSpec())
    try:
        return fit_logistic(X, a, names=fb.names).beta[1:]
    except PreconditionError:
        return None


def match_propensity(cohort: Cohort, stage1: MatchResult | Sequence[int], m: int = 1,
                     e_hat_refit=None, score_scale: str = "logit") -> MatchResult:
    """Stage 2: pair each external treated unit with ``m`` external controls.

    The propensity score is refit on the stage-1 subset unless
    ``e_hat_refit`` (scores for every cohort row, or a callable) is given.
    Treated units that cannot get ``m`` controls are dropped with a warning.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    base = stage1 if isinstance(stage1, MatchResult) else None
    sel = np.asarray(base.selected_external if base else stage1, dtype=np.int64)
    rct = base.rct_rows if base else split_by_study(cohort)[0]
    treated = sel[cohort.a[sel] == 1]
    controls = sel[cohort.a[sel] == 0]
    if treated.size == 0 or controls.size == 0:
        raise MatchingError("stage-1 subset needs both external treated and control rows")
    if e_hat_refit is None:
        pred, _ = fit_score(cohort.w[sel], cohort.a[sel], BasisSpec(), DEFAULT_CLIP)
        e = np.full(cohort.n, np.nan)
        e[sel] = pred(cohort.w[sel])
    else:
        e = np.asarray(e_hat_refit(cohort.w) if callable(e_hat_refit) else e_hat_refit, dtype=float)
    z = _scale(e, score_scale)
    groups, _, dropped = _greedy(treated, z[treated], controls, z[controls], m,
                                 replacement=False, caliper=None, drop_incomplete=True)
    if dropped:
        msg = f"{len(dropped)} external treated units had fewer than m={m} controls left; dropped"
        warnings.warn(msg, stacklevel=2)
        logger.warning(msg)
    final = np.unique(np.asarray([u for g in groups for u in (g.anchor,) + g.members],
                                 dtype=np.int64))
    dist = np.asarray([d for g in groups for d in g.distances])
    before = base.balance_before if base else _safe_balance(cohort, np.concatenate([rct, sel]))
    after = _safe_balance(cohort, np.concatenate([rct, final]))
    return MatchResult(final, dist, "tes_then_ps", tuple(groups), rct, before, after,
                       base.shortfall if base else {}, tuple(dropped),
                       _ps_coefs(cohort, sel), _ps_coefs(cohort, final))


def _group_units(result: MatchResult) -> list[tuple[float, int, tuple]]:
    """(distance, tiebreak row, units in keep-priority order) per trimming unit."""
    if result.stage == "tes_only":
        seen, units = set(), []
        for g in result.groups:
            for u, d in zip(g.members, g.distances):
                if u not in seen:
                    seen.add(u)
                    units.append((d, u, (u,)))
        return units
    return [(g.distance, g.anchor, (g.anchor,) + g.members) for g in result.groups]


def trim_to_size(result: MatchResult, target: int, policy: str = "best_distance", seed: int = 0,
                 cohort: Cohort | None = None) -> MatchResult:
    """Reduce a match to exactly ``target`` external rows.

    Whole groups (a treated unit with its controls) are kept first; if the
    target falls inside a group, its anchor and leading controls fill the
    remainder. ``best_distance`` ranks groups by mean match distance,
    ``random`` permutes them with ``seed``. Balance is recomputed when
    ``cohort`` is given.
    """
    if policy not in POLICIES:
        raise ValueError(f"policy must be one of {POLICIES}")
    if target > result.n_external:
        raise ValueError(f"target {target} exceeds the {result.n_external} matched external rows")
    if target < 0:
        raise ValueError("target must be nonnegative")
    if target == result.n_external:
        return result
    units = _group_units(result)
    if policy == "best_distance":
        units.sort(key=lambda t: (t[0], t[1]))
    else:
        perm = np.random.default_rng(seed).permutation(len(units))
        units = [units[i] for i in perm]
    keep, kept_groups = [], []
    for d, _, members in units:
        room = target - len(keep)
        if room <= 0:
            break
        take = members[:room]
        keep.extend(take)
        kept_groups.append(take)
    selected = np.sort(np.asarray(keep, dtype=np.int64))
    groups = []
    kept = set(keep)
    for g in result.groups:
        if result.stage == "tes_only":
            pairs = [(u, d) for u, d in zip(g.members, g.distances) if u in kept]
            if pairs:
                groups.append(MatchGroup(g.anchor, tuple(p[0] for p in pairs),
                                         tuple(p[1] for p in pairs)))
        elif g.anchor in kept:
            pairs = [(u, d) for u, d in zip(g.members, g.distances) if u in kept]
            groups.append(MatchGroup(g.anchor, tuple(p[0] for p in pairs),
                                     tuple(p[1] for p in pairs)))
    dist = np.asarray([d for g in groups for d in g.distances])
    after = (_safe_balance(cohort, np.concatenate([result.rct_rows, selected]))
             if cohort is not None else None)
    return replace(result, selected_external=selected, pair_distances=dist, groups=tuple(groups),
                   balance_after=after,
                   ps_coef_after=(_ps_coefs(cohort, selected) if cohort is not None
                                  and result.stage == "tes_then_ps" else result.ps_coef_after))


def sample_random(pool: Sequence[int], n: int, seed: int) -> np.ndarray:
    """Uniform sample without replacement, returned in ascending order."""
    pool = np.asarray(pool, dtype=np.int64)
    if n > pool.size:
        raise ValueError(f"cannot sample {n} rows from a pool of {pool.size}")
    if n < 0:
        raise ValueError("n must be nonnegative")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(pool, size=n, replace=False))


def two_stage_match(cohort: Cohort, spec: MatchSpec = MatchSpec(), *,
                    candidates: Sequence[int] | None = None, q_hat=None,
                    policy: str = "best_distance", seed: int = 0) -> MatchResult:
    """Full design: enrollment-score matching, optional propensity matching, trimming.

    ``q_hat`` defaults to a main-term logistic fit of ``S`` on the RCT rows
    plus the candidate pool. With ``spec.m == 0`` the second stage is
    skipped (external-controls workflow).
    """
    rct, ext = split_by_study(cohort)
    pool = ext if candidates is None else np.asarray(candidates, dtype=np.int64)
    if q_hat is None:
        q_hat = fit_enrollment_score(cohort, np.concatenate([rct, pool]))
    res = match_trial_enrollment(cohort, q_hat, spec, candidates=pool)
    if spec.m > 0:
        res = match_propensity(cohort, res, spec.m, score_scale=spec.score_scale)
    if spec.target_external_n is not None:
        res = trim_to_size(res, min(spec.target_external_n, res.n_external), policy, seed, cohort)
    return res
