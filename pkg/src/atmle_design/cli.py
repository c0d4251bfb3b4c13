"""Command-line entry point: ``atmle-design {simulate,generate,match,estimate,diagnose}``.

Exit codes: 0 ok, 2 config or input error, 3 runtime error, 4 statistical
precondition violated.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import typing
from pathlib import Path

import numpy as np

from .core import Cohort, CohortError, PreconditionError, from_arrays, split_by_study
from .diagnostics import (
    exact_remainder_bias,
    exact_remainder_pooled,
    loglog_slope,
    oracle_bias_ladder,
    oracle_bias_mc,
    perturbed_candidate,
    scenario_truth,
)
from .estimators import (
    ATMLEOptions,
    TAU_S_BASIS,
    aipw_from_cohort,
    estimate_atmle,
    estimate_tmle_rct,
)
from .matching import MatchSpec, two_stage_match
from .nuisance import BasisSpec, NuisanceOptions
from .simulation import DGPConfig, ExperimentConfig, emit_metrics, generate_pool, run_experiment

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_PRECONDITION = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Config (strict JSON <-> nested dataclasses)
# ---------------------------------------------------------------------------

def _from_dict(cls, data, path: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key {path + unknown[0]!r}" + (
            f" (and {len(unknown) - 1} more)" if len(unknown) > 1 else ""))
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _from_dict(hint, value, f"{path}{key}.")
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return _from_dict(ExperimentConfig, data)


def config_to_json(config) -> str:
    return json.dumps(dataclasses.asdict(config), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# Cohort CSV
# ---------------------------------------------------------------------------

def read_cohort_csv(path: str | Path, r: float) -> Cohort:
    """Read ``S,A,Y,W1..Wd[,source]``; errors name 1-based file line numbers."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CohortError("empty", f"{path}: empty file") from None
        has_source = header[-1] == "source"
        wcols = header[3:-1] if has_source else header[3:]
        expected = ["S", "A", "Y"] + [f"W{j}" for j in range(1, len(wcols) + 1)]
        if header[:3] + wcols != expected or not wcols:
            raise CohortError("dimension", f"{path}: header must be S,A,Y,W1..Wd[,source]")
        recs = list(reader)
    width = len(header)
    for i, rec in enumerate(recs):
        if len(rec) != width:
            raise CohortError("dimension", f"{path}: line {i + 2} has {len(rec)} fields, expected {width}",
                              [i])
    try:
        arr = np.array(recs, dtype=float).reshape(len(recs), width)
    except ValueError as exc:
        raise CohortError("non_finite", f"{path}: non-numeric value ({exc})") from exc
    try:
        return from_arrays(arr[:, 0], arr[:, 3:3 + len(wcols)], arr[:, 1], arr[:, 2], r,
                           arr[:, -1].astype(np.int64) if has_source else None)
    except CohortError as exc:
        if exc.rows:
            lines = [r + 2 for r in exc.rows[:10]]
            raise CohortError(exc.kind, f"{path}: {exc} (file lines {lines})", exc.rows) from exc
        raise


def write_cohort_csv(cohort: Cohort, path: str | Path, rows=None) -> None:
    idx = np.arange(cohort.n) if rows is None else np.asarray(rows)
    header = ["S", "A", "Y"] + [f"W{j}" for j in range(1, cohort.d + 1)]
    if cohort.source is not None:
        header.append("source")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in idx:
            rec = [int(cohort.s[i]), int(cohort.a[i]), repr(float(cohort.y[i]))]
            rec += [repr(float(v)) for v in cohort.w[i]]
            if cohort.source is not None:
                rec.append(int(cohort.source[i]))
            w.writerow(rec)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    config = load_experiment_config(args.config) if args.config else ExperimentConfig()
    if args.replications is not None:
        config = dataclasses.replace(config, replications=args.replications)
    if args.workers is not None:
        config = dataclasses.replace(config, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(config_to_json(config), encoding="utf-8")
    rows = run_experiment(config)
    (out / "metrics.csv").write_text(emit_metrics(rows, "csv"), encoding="utf-8")
    (out / "metrics.md").write_text(emit_metrics(rows, "markdown"), encoding="utf-8")
    print(emit_metrics(rows, "markdown"), end="")
    return EXIT_OK


def cmd_generate(args) -> int:
    dgp = DGPConfig(n_rct=args.n_rct, source_sizes=tuple(args.source_sizes), seed=args.seed,
                    uy_sd=args.uy_sd)
    write_cohort_csv(generate_pool(dgp), args.out)
    Path(str(args.out) + ".config.json").write_text(config_to_json(dgp), encoding="utf-8")
    return EXIT_OK


def cmd_match(args) -> int:
    cohort = read_cohort_csv(args.input, args.r)
    spec = MatchSpec(k=args.k, m=args.m, score_scale=args.scale, caliper=args.caliper,
                     target_external_n=args.target_n)
    res = two_stage_match(cohort, spec, policy=args.policy, seed=args.seed)
    rows = np.sort(res.cohort_rows())
    write_cohort_csv(cohort, args.out, rows)
    report = {
        "spec": dataclasses.asdict(spec), "policy": args.policy, "seed": args.seed,
        "stage": res.stage, "n_rct": int(res.rct_rows.size), "n_external": res.n_external,
        "balance_before": res.balance_before.to_dict() if res.balance_before else None,
        "balance_after": res.balance_after.to_dict() if res.balance_after else None,
        "shortfall": {str(k): v for k, v in res.shortfall.items()},
        "dropped_treated": list(res.dropped),
    }
    Path(str(args.out) + ".balance.txt").write_text(json.dumps(report, indent=2) + "\n",
                                                    encoding="utf-8")
    return EXIT_OK


def _basis(name: str, **kw) -> BasisSpec:
    return BasisSpec(scheme=name, **kw)


def cmd_estimate(args) -> int:
    cohort = read_cohort_csv(args.input, args.r)
    doc = {"estimator": args.estimator, "r": args.r, "basis": args.basis, "alpha": args.alpha}
    if args.estimator == "tmle-rct":
        rct, _ = split_by_study(cohort)
        if rct.size == 0:
            raise PreconditionError("tmle-rct needs RCT rows")
        est = estimate_tmle_rct(cohort.subset(rct), args.r,
                                _basis(args.basis, treatment_main_effect=True), alpha=args.alpha)
        doc.update(est.to_dict())
    elif args.estimator == "aipw":
        est = aipw_from_cohort(cohort, _basis(args.basis, treatment_main_effect=True), alpha=args.alpha)
        doc.update(est.to_dict())
    else:
        basis = _basis(args.basis)
        opts = ATMLEOptions(nuisance=NuisanceOptions(basis=basis), tau_a_basis=basis,
                            tau_s_basis=dataclasses.replace(TAU_S_BASIS, scheme=args.basis),
                            alpha=args.alpha)
        res = estimate_atmle(cohort, opts)
        doc.update(res.combined.to_dict())
        doc["pooled"] = res.pooled.to_dict()
        doc["bias"] = res.bias.to_dict()
        doc["diagnostics"] = res.diagnostics
    doc["ci"] = [doc.pop("ci_lo"), doc.pop("ci_hi")]
    text = json.dumps(doc, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text, end="")
    return EXIT_OK


def _parse_eps(text: str) -> list[float]:
    try:
        eps = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"--eps: {exc}") from exc
    if len(eps) < 2 or any(e <= 0 for e in eps):
        raise ConfigError("--eps needs at least two positive values")
    return eps


def cmd_diagnose(args) -> int:
    basis_a = basis_s = BasisSpec()
    mc_n, seed = args.mc_n, args.seed
    sc = args.scenario
    if sc == "constant-scores":
        # arm-specific intercepts {1, A} for the enrollment-effect basis
        res = oracle_bias_mc(scenario_truth(constant_scores=True), basis_a,
                             BasisSpec(treatment_main_effect=True), mc_n, seed)
        print(f"oracle bias (constant scores): {res.total.value:.3e} +/- {res.total.se:.3e}")
        print(f"  pooled part {res.pooled.value:.3e} +/- {res.pooled.se:.3e}; "
              f"bias part {res.bias.value:.3e} +/- {res.bias.se:.3e}")
    elif sc in ("true-g", "true-pi"):
        truth = scenario_truth()
        w = truth.sampler(mc_n, seed)
        cand = perturbed_candidate(truth, basis_a, basis_s, w, wrong_outcome=True)
        rp = exact_remainder_pooled(cand, truth, basis_a, mc_n, seed)
        rb = exact_remainder_bias(cand, truth, basis_s, mc_n, seed)
        print(f"pooled remainder (true g, wrong outcome models): {rp.value:.3e} +/- {rp.se:.3e}")
        print(f"bias remainder (true g and Pi, wrong outcome models): {rb.value:.3e} +/- {rb.se:.3e}")
    elif sc in ("g-perturb", "pi-perturb"):
        eps = _parse_eps(args.eps)
        truth = scenario_truth()
        w = truth.sampler(mc_n, seed)
        vals = []
        for e in eps:
            if sc == "g-perturb":
                cand = perturbed_candidate(truth, basis_a, basis_s, w, g_eps=e)
                r = exact_remainder_pooled(cand, truth, basis_a, mc_n, seed)
            else:
                cand = perturbed_candidate(truth, basis_a, basis_s, w, pi_eps=e)
                r = exact_remainder_bias(cand, truth, basis_s, mc_n, seed)
            vals.append(r.value)
            print(f"eps={e:g}: remainder {r.value:.6e} +/- {r.se:.3e}")
        print(f"log-log slope: {loglog_slope(eps, vals):.4f}")
    elif sc == "ladder":
        print("w3_weight,adjusted_r2,weighted_mse,oracle_bias,se")
        for row in oracle_bias_ladder(mc_n=mc_n, seed=seed):
            print(f"{row.w3_weight:g},{row.adjusted_r2:.4f},{row.weighted_mse:.4e},"
                  f"{row.oracle_bias:.4e},{row.se:.2e}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="atmle-design", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run the sampling-strategy experiment grid")
    s.add_argument("--config", help="experiment JSON (unknown keys rejected); defaults if omitted")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--replications", type=int)
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_simulate)

    g = sub.add_parser("generate", help="write a simulated pooled cohort CSV")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-rct", type=int, default=400)
    g.add_argument("--source-sizes", type=int, nargs=5, default=[5000] * 5)
    g.add_argument("--uy-sd", type=float, default=3.0)
    g.set_defaults(func=cmd_generate)

    m = sub.add_parser("match", help="two-stage outcome-blind matching of a pooled cohort CSV")
    m.add_argument("--input", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--r", type=float, default=0.5, help="RCT randomization probability")
    m.add_argument("--k", type=int, default=30)
    m.add_argument("--m", type=int, default=1)
    m.add_argument("--target-n", type=int)
    m.add_argument("--policy", choices=("best_distance", "random"), default="best_distance")
    m.add_argument("--scale", choices=("logit", "probability"), default="logit")
    m.add_argument("--caliper", type=float)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_match)

    e = sub.add_parser("estimate", help="estimate the ATE from a cohort CSV")
    e.add_argument("--input", required=True)
    e.add_argument("--out")
    e.add_argument("--estimator", choices=("atmle", "tmle-rct", "aipw"), default="atmle")
    e.add_argument("--r", type=float, required=True)
    e.add_argument("--basis", choices=("main_terms", "indicator_hal0"), default="main_terms")
    e.add_argument("--alpha", type=float, default=0.05)
    e.set_defaults(func=cmd_estimate)

    d = sub.add_parser("diagnose", help="Monte Carlo remainder and oracle-bias checks")
    d.add_argument("--scenario", required=True,
                   choices=("constant-scores", "true-g", "true-pi", "g-perturb", "pi-perturb", "ladder"))
    d.add_argument("--eps", default="0.01,0.02,0.04,0.08")
    d.add_argument("--mc-n", type=int, default=100_000)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CohortError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PreconditionError as exc:
        print(f"precondition failed: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except Exception as exc:  # noqa: BLE001 - exit-code contract
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
