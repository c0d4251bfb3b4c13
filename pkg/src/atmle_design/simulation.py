"""Five-source augmentation simulation, the sampling-strategy experiment grid
and per-arm bias, width, coverage and power metrics.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .core import Cohort, PreconditionError, from_arrays, split_by_study
from .estimators import ATMLEOptions, estimate_atmle, estimate_tmle_rct
from .matching import MatchSpec, match_propensity, match_trial_enrollment, fit_enrollment_score, \
    sample_random, trim_to_size

logger = logging.getLogger(__name__)

TRUE_ATE = 0.5
STRATEGIES = ("rct_only", "random", "tes_ps_matching")
N_SOURCES = 5


@dataclass(frozen=True)
class DGPConfig:
    n_rct: int = 400
    source_sizes: tuple = (5000,) * N_SOURCES
    seed: int = 0
    uy_sd: float = 3.0
    r: float = 0.5
    # shift/bias profile j of each external source; (1,)*5 gives unbiased, unshifted externals
    source_profiles: tuple = (1, 2, 3, 4, 5)

    @property
    def true_ate(self) -> float:
        return TRUE_ATE

    @property
    def pool_size(self) -> int:
        return int(sum(self.source_sizes))

    def __post_init__(self):
        if self.n_rct < 1:
            raise ValueError("n_rct must be positive")
        if len(self.source_sizes) != N_SOURCES or any(int(n) < 1 for n in self.source_sizes):
            raise ValueError(f"source_sizes must be {N_SOURCES} positive integers")
        if not self.uy_sd > 0:
            raise ValueError("uy_sd must be positive")
        if len(self.source_profiles) != N_SOURCES or not set(self.source_profiles) <= set(range(1, 6)):
            raise ValueError(f"source_profiles must be {N_SOURCES} values in 1..5")
        object.__setattr__(self, "source_sizes", tuple(int(n) for n in self.source_sizes))
        object.__setattr__(self, "source_profiles", tuple(int(j) for j in self.source_profiles))


def bias_term(w: np.ndarray, a: np.ndarray, source: np.ndarray) -> np.ndarray:
    """Additive outcome shift of external rows by profile ``source`` (0 for the RCT)."""
    w1, w3 = w[:, 0], w[:, 2]
    inter = 1.4 * w1 * a
    b = np.zeros(w.shape[0])
    b = np.where((source == 2) | (source == 3), 0.5 + inter, b)
    b = np.where(source == 4, 0.5 + inter + 0.2 * w3, b)
    b = np.where(source == 5, 1.3 + inter + 0.2 * w3, b)
    return b


def external_propensity(w: np.ndarray) -> np.ndarray:
    return expit(-2 + 1.6 * w[:, 0] - 2 * w[:, 1])


def generate_pool(config: DGPConfig = DGPConfig()) -> Cohort:
    """RCT rows (source 0) followed by external sources 1..5, in order."""
    rng = np.random.default_rng(config.seed)
    ws, a_s, srcs = [], [], []
    w = rng.standard_normal((config.n_rct, 3))
    ws.append(w)
    a_s.append(rng.binomial(1, config.r, config.n_rct))
    srcs.append(np.zeros(config.n_rct, dtype=np.int64))
    profiles = [np.zeros(config.n_rct, dtype=np.int64)]
    for j, (n, prof) in enumerate(zip(config.source_sizes, config.source_profiles), start=1):
        shift = 0.2 * (prof - 1)
        w = rng.standard_normal((n, 3)) + np.array([shift, -shift, shift])
        ws.append(w)
        a_s.append(rng.binomial(1, external_propensity(w)))
        srcs.append(np.full(n, j, dtype=np.int64))
        profiles.append(np.full(n, prof, dtype=np.int64))
    w = np.vstack(ws)
    a = np.concatenate(a_s)
    source = np.concatenate(srcs)
    s = (source == 0).astype(np.int64)
    u = config.uy_sd * rng.standard_normal(w.shape[0])
    y = (2.5 + 0.9 * w[:, 0] + 1.1 * w[:, 1] + 2.7 * w[:, 2] + 0.5 * a + u
         + (1 - s) * bias_term(w, a, np.concatenate(profiles)))
    return from_arrays(s, w, a, y, config.r, source)


@dataclass(frozen=True)
class ExperimentConfig:
    replications: int = 500
    external_sizes: tuple = (500, 600, 700, 800, 900, 1000)
    strategies: tuple = STRATEGIES
    k: int = 30
    m: int = 1
    trim_policy: str = "best_distance"
    dgp: DGPConfig = DGPConfig()
    estimator: ATMLEOptions = ATMLEOptions()
    master_seed: int = 2024
    alpha: float = 0.05
    workers: int = 1

    def __post_init__(self):
        if not self.strategies:
            raise ValueError("strategies must be nonempty")
        bad = set(self.strategies) - set(STRATEGIES)
        if bad:
            raise ValueError(f"unknown strategies {sorted(bad)}")
        if self.replications < 1:
            raise ValueError("replications must be positive")
        object.__setattr__(self, "strategies", tuple(self.strategies))
        object.__setattr__(self, "external_sizes", tuple(int(n) for n in self.external_sizes))


@dataclass(frozen=True)
class ReplicateEstimate:
    strategy: str
    external_n: int
    point: float = math.nan
    se: float = math.nan
    ci_lo: float = math.nan
    ci_hi: float = math.nan
    p_value: float = math.nan
    source_counts: tuple = ()
    error: Optional[str] = None


@dataclass(frozen=True)
class ReplicateResult:
    index: int
    estimates: tuple


def replicate_seeds(master_seed: int, index: int) -> tuple[int, int, int]:
    """(pool seed, sampling seed, trim seed) derived from the master seed and index only."""
    ss = np.random.SeedSequence([int(master_seed), int(index)])
    return tuple(int(c.generate_state(1, np.uint64)[0]) for c in ss.spawn(3))


def _source_counts(cohort: Cohort, rows: np.ndarray) -> tuple:
    if cohort.source is None:
        return ()
    return tuple(int(np.sum(cohort.source[rows] == j)) for j in range(1, N_SOURCES + 1))


def _record(strategy: str, n_ext: int, fn, counts=()) -> ReplicateEstimate:
    try:
        est = fn()
    except (PreconditionError, np.linalg.LinAlgError, ValueError) as exc:
        logger.warning("%s N=%d failed: %s", strategy, n_ext, exc)
        return ReplicateEstimate(strategy, n_ext, source_counts=counts, error=f"{type(exc).__name__}: {exc}")
    return ReplicateEstimate(strategy, n_ext, est.point, est.se, est.ci_lo, est.ci_hi, est.p_value,
                             counts)


def run_replicate(dgp: DGPConfig, experiment: ExperimentConfig, index: int) -> ReplicateResult:
    """One fresh pool and every (strategy, external size) estimate on it.

    The matching design is run once per replicate and trimmed to each size.
    """
    pool_seed, sample_seed, trim_seed = replicate_seeds(experiment.master_seed, index)
    pool = generate_pool(replace(dgp, seed=pool_seed))
    rct, ext = split_by_study(pool)
    opts = experiment.estimator
    if opts.alpha != experiment.alpha:
        opts = replace(opts, alpha=experiment.alpha)
    out = []
    if "rct_only" in experiment.strategies:
        out.append(_record("rct_only", 0,
                           lambda: estimate_tmle_rct(pool.subset(rct), alpha=experiment.alpha)))

    def atmle(rows):
        return estimate_atmle(pool.subset(np.concatenate([rct, rows])), opts).combined

    if "random" in experiment.strategies:
        for i, n in enumerate(experiment.external_sizes):
            rows = sample_random(ext, n, sample_seed + i)
            out.append(_record("random", n, lambda: atmle(rows), _source_counts(pool, rows)))

    if "tes_ps_matching" in experiment.strategies:
        spec = MatchSpec(k=experiment.k, m=experiment.m)
        try:
            q = fit_enrollment_score(pool)
            matched = match_trial_enrollment(pool, q, spec)
            if spec.m > 0:
                matched = match_propensity(pool, matched, spec.m)
        except (PreconditionError, ValueError) as exc:
            matched = None
            err = f"{type(exc).__name__}: {exc}"
        for n in experiment.external_sizes:
            if matched is None:
                out.append(ReplicateEstimate("tes_ps_matching", n, error=err))
                continue
            trimmed = trim_to_size(matched, min(n, matched.n_external), experiment.trim_policy, trim_seed)
            rows = trimmed.selected_external
            out.append(_record("tes_ps_matching", n, lambda: atmle(rows), _source_counts(pool, rows)))
    return ReplicateResult(index, tuple(out))


def _run_one(args):
    experiment, index = args
    return run_replicate(experiment.dgp, experiment, index)


def run_replicates(experiment: ExperimentConfig, indices: Sequence[int] | None = None,
                   workers: int | None = None) -> list[ReplicateResult]:
    """Replicates sorted by index; results do not depend on ``workers``."""
    indices = list(range(experiment.replications)) if indices is None else list(indices)
    workers = experiment.workers if workers is None else workers
    if workers <= 1:
        results = [_run_one((experiment, i)) for i in indices]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, [(experiment, i) for i in indices], chunksize=1))
    return sorted(results, key=lambda r: r.index)


@dataclass(frozen=True)
class MetricsRow:
    strategy: str
    external_n: int
    abs_bias: float
    variance: float
    mean_ci_width: float
    coverage: float
    power: float
    n_replications: int
    n_failed: int = 0
    mean_source_counts: tuple = ()


def aggregate(results: Sequence[ReplicateResult], truth: float = TRUE_ATE) -> list[MetricsRow]:
    """Metrics per (strategy, external size), in first-seen order."""
    cells: dict = {}
    for rep in results:
        for e in rep.estimates:
            cells.setdefault((e.strategy, e.external_n), []).append(e)
    rows = []
    for (strategy, n), ests in cells.items():
        ok = [e for e in ests if e.error is None]
        failed = len(ests) - len(ok)
        if not ok:
            rows.append(MetricsRow(strategy, n, math.nan, math.nan, math.nan, math.nan, math.nan,
                                   0, failed))
            continue
        pts = np.array([e.point for e in ok])
        lo = np.array([e.ci_lo for e in ok])
        hi = np.array([e.ci_hi for e in ok])
        pv = np.array([e.p_value for e in ok])
        counts = [e.source_counts for e in ok if e.source_counts]
        mean_counts = tuple(float(x) for x in np.mean(counts, axis=0)) if counts else ()
        rows.append(MetricsRow(
            strategy, n,
            abs_bias=float(abs(pts.mean() - truth)),
            variance=float(pts.var(ddof=1)) if pts.size > 1 else 0.0,
            mean_ci_width=float(np.mean(hi - lo)),
            coverage=float(np.mean((lo <= truth) & (truth <= hi))),
            power=float(np.mean(pv < 0.05)),
            n_replications=len(ok), n_failed=failed, mean_source_counts=mean_counts))
    return rows


def run_experiment(experiment: ExperimentConfig, workers: int | None = None) -> list[MetricsRow]:
    if experiment.replications < 2:
        raise ValueError("run_experiment needs at least 2 replications")
    return aggregate(run_replicates(experiment, workers=workers), experiment.dgp.true_ate)


_METRIC_FIELDS = [f.name for f in fields(MetricsRow)]


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ";".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_metrics(rows: Sequence[MetricsRow], fmt: str = "csv") -> str:
    """CSV (RFC 4180, LF line endings) or a markdown pipe table."""
    if not rows:
        raise ValueError("no metrics rows")
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(_METRIC_FIELDS)
        for r in rows:
            w.writerow([_fmt(getattr(r, f)) for f in _METRIC_FIELDS])
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| " + " | ".join(_METRIC_FIELDS) + " |",
                 "|" + "|".join("---" for _ in _METRIC_FIELDS) + "|"]
        for r in rows:
            cells = []
            for f in _METRIC_FIELDS:
                v = getattr(r, f)
                if isinstance(v, float):
                    cells.append(f"{v:.3f}")
                elif isinstance(v, tuple):
                    cells.append(" / ".join(f"{x:.0f}" for x in v))
                else:
                    cells.append(str(v))
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown format {fmt!r}")


def parse_metrics_csv(text: str) -> list[MetricsRow]:
    reader = csv.DictReader(io.StringIO(text))
    out = []
    for rec in reader:
        counts = rec["mean_source_counts"]
        out.append(MetricsRow(
            rec["strategy"], int(rec["external_n"]),
            *(float(rec[f]) for f in ("abs_bias", "variance", "mean_ci_width", "coverage", "power")),
            int(rec["n_replications"]), int(rec["n_failed"]),
            tuple(float(x) for x in counts.split(";")) if counts else ()))
    return out


def metrics_as_dicts(rows: Sequence[MetricsRow]) -> list[dict]:
    return [asdict(r) for r in rows]
