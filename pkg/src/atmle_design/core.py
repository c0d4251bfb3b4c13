"""Cohort data structures, validation and Wald-type estimates."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import norm

logger = logging.getLogger(__name__)


class CohortError(ValueError):
    """Malformed cohort input.

    ``kind`` is one of ``"empty"``, ``"dimension"``, ``"binary"``,
    ``"non_finite"``, ``"randomization"``.
    """

    def __init__(self, kind: str, message: str, rows: Sequence[int] = ()):
        super().__init__(message)
        self.kind = kind
        self.rows = tuple(int(r) for r in rows)


class PreconditionError(ValueError):
    """A statistical precondition of an estimator or design step is violated."""


class PositivityError(PreconditionError):
    def __init__(self, message: str, rows: Sequence[int] = ()):
        super().__init__(message)
        self.rows = tuple(int(r) for r in rows)


@dataclass(frozen=True)
class Observation:
    s: int
    w: tuple[float, ...]
    a: int
    y: float
    source: int | None = None


def _readonly(x: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x)
    x.setflags(write=False)
    return x


@dataclass(frozen=True, eq=False)
class Cohort:
    """Validated pooled cohort stored column-wise.

    Row order is the order of the input and every index returned by the
    matching and estimation code refers to positions in this cohort.
    """

    s: np.ndarray
    w: np.ndarray
    a: np.ndarray
    y: np.ndarray
    r: float
    source: np.ndarray | None = None
    cell_counts: dict = field(default_factory=dict, compare=False)

    @property
    def n(self) -> int:
        return int(self.s.shape[0])

    @property
    def d(self) -> int:
        return int(self.w.shape[1])

    @property
    def rows(self) -> list[Observation]:
        src = self.source if self.source is not None else [None] * self.n
        return [
            Observation(int(s), tuple(float(v) for v in w), int(a), float(y),
                        None if c is None else int(c))
            for s, w, a, y, c in zip(self.s, self.w, self.a, self.y, src)
        ]

    @property
    def n_rct(self) -> int:
        return int(self.s.sum())

    @property
    def n_external(self) -> int:
        return self.n - self.n_rct

    def subset(self, idx: Iterable[int]) -> "Cohort":
        idx = np.asarray(list(idx) if not isinstance(idx, np.ndarray) else idx, dtype=np.int64)
        return from_arrays(
            self.s[idx], self.w[idx], self.a[idx], self.y[idx], self.r,
            None if self.source is None else self.source[idx],
        )

    def with_outcome(self, y: np.ndarray) -> "Cohort":
        return from_arrays(self.s, self.w, self.a, y, self.r, self.source)

    def equals(self, other: "Cohort") -> bool:
        same_src = (self.source is None and other.source is None) or (
            self.source is not None and other.source is not None
            and np.array_equal(self.source, other.source))
        return (self.r == other.r and same_src
                and np.array_equal(self.s, other.s) and np.array_equal(self.a, other.a)
                and np.array_equal(self.w, other.w) and np.array_equal(self.y, other.y))


def from_arrays(s, w, a, y, r: float, source=None) -> Cohort:
    """Validate column arrays and build a :class:`Cohort`."""
    s = np.asarray(s)
    a = np.asarray(a)
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    n = s.shape[0]
    if n == 0:
        raise CohortError("empty", "cohort has no rows")
    if w.ndim == 1:
        w = w.reshape(n, -1)
    if w.shape[0] != n or a.shape[0] != n or y.shape[0] != n:
        raise CohortError("dimension", "column lengths differ")
    if not (0.0 < r < 1.0) or not math.isfinite(r):
        raise CohortError("randomization", f"randomization probability r={r} must lie in (0, 1)")
    for name, col in (("S", s), ("A", a)):
        bad = np.flatnonzero(~np.isin(col, (0, 1)))
        if bad.size:
            raise CohortError("binary", f"{name} must be 0/1; offending rows {bad[:10].tolist()}", bad)
    bad = np.flatnonzero(~np.isfinite(y) | ~np.all(np.isfinite(w), axis=1))
    if bad.size:
        raise CohortError("non_finite", f"non-finite Y or W in rows {bad[:10].tolist()}", bad)
    if source is not None:
        source = np.asarray(source, dtype=np.int64)
        if source.shape[0] != n:
            raise CohortError("dimension", "source column length differs")
    s = s.astype(np.int64)
    a = a.astype(np.int64)
    counts = {(si, ai): int(np.sum((s == si) & (a == ai))) for si in (0, 1) for ai in (0, 1)}
    return Cohort(_readonly(s), _readonly(w), _readonly(a), _readonly(y), float(r),
                  None if source is None else _readonly(source), counts)


def validate_cohort(rows, r: float) -> Cohort:
    """Validate a sequence of observations (or an existing cohort).

    Covariate dimension ``d`` is taken from the first row.
    """
    if isinstance(rows, Cohort):
        return from_arrays(rows.s, rows.w, rows.a, rows.y, r, rows.source)
    rows = list(rows)
    if not rows:
        raise CohortError("empty", "cohort has no rows")
    rows = [o if isinstance(o, Observation) else Observation(*o) for o in rows]
    d = len(rows[0].w)
    bad = [i for i, o in enumerate(rows) if len(o.w) != d]
    if bad:
        raise CohortError(
            "dimension", f"rows {bad[:10]} have covariate length != d={d}", bad)
    has_source = any(o.source is not None for o in rows)
    source = [(-1 if o.source is None else o.source) for o in rows] if has_source else None
    return from_arrays(
        np.array([o.s for o in rows]),
        np.array([o.w for o in rows], dtype=float).reshape(len(rows), d),
        np.array([o.a for o in rows]),
        np.array([o.y for o in rows], dtype=float),
        r,
        source,
    )


def split_by_study(cohort: Cohort) -> tuple[np.ndarray, np.ndarray]:
    """Indices of RCT rows and external rows, each in cohort order."""
    return np.flatnonzero(cohort.s == 1), np.flatnonzero(cohort.s == 0)


@dataclass(frozen=True, eq=False)
class Estimate:
    point: float
    eic: np.ndarray
    se: float
    ci_lo: float
    ci_hi: float
    p_value: float
    n: int
    alpha: float = 0.05

    @property
    def width(self) -> float:
        return self.ci_hi - self.ci_lo

    def covers(self, value: float) -> bool:
        return self.ci_lo <= value <= self.ci_hi

    def to_dict(self) -> dict:
        return {"point": self.point, "se": self.se, "ci_lo": self.ci_lo,
                "ci_hi": self.ci_hi, "p_value": self.p_value, "n": self.n}


def wald_inference(point: float, eic: np.ndarray, alpha: float = 0.05) -> Estimate:
    """Wald interval and two-sided p-value from influence-curve values.

    ``se = sd(eic) / sqrt(n)`` with the sample (n - 1) standard deviation.
    """
    eic = np.asarray(eic, dtype=float)
    n = eic.shape[0]
    if n == 0:
        raise ValueError("empty influence curve")
    sd = float(np.std(eic, ddof=1)) if n > 1 else 0.0
    se = sd / math.sqrt(n)
    if se == 0.0:
        logger.warning("zero-variance influence curve: degenerate confidence interval")
        p = 1.0 if point == 0 else 0.0
        return Estimate(float(point), eic, 0.0, float(point), float(point), p, n, alpha)
    z = float(norm.ppf(1 - alpha / 2))
    p = float(2 * norm.sf(abs(point) / se))
    return Estimate(float(point), eic, se, point - z * se, point + z * se, p, n, alpha)
