"""Command-line interface: ``estimate``, ``simulate`` and ``truth``.

Every command writes its artifacts to ``--out-dir`` and exits 0 only when
all of them were written.  Failures print a one-line JSON object with
``error`` and ``message`` keys to stderr and exit 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .errors import CfIndexError
from .estimators import ESTIMATORS, VARIANTS, estimate_all
from .io import SCHEMA_VERSION, ColumnMap, IncomeTransform, load_csv, write_json, write_rows_csv
from .nuisance import CDF_STRATEGIES, NuisanceConfig, fit_nuisance
from .simulation import CSV_COLUMNS, DEFAULT_ESTIMATORS, SCENARIOS, approximate_truth, run_mc

logger = logging.getLogger("cfindex")

THREADS_ENV = "CFINDEX_THREADS"
ESTIMATE_COLUMNS = ("estimand", "estimator", "level", "label", "value", "se", "ci_low", "ci_high", "conf_level", "conservative_se")


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _int_list(text: str) -> list[int]:
    return [int(t) for t in _csv_list(text)]


def _threads(args) -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return max(1, args.threads)


def _noise_sd(args) -> bool:
    return args.noise_convention == "sd"


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="master seed; the only source of randomness")
    p.add_argument("--threads", type=int, default=1, help=f"worker count (overridden by ${THREADS_ENV})")
    p.add_argument("--out-dir", type=Path, default=Path("."), help="directory for output files")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _add_estimation(p: argparse.ArgumentParser, default_trim: float, default_estimators) -> None:
    p.add_argument("--trim", type=float, default=default_trim, help="propensity trimming threshold")
    p.add_argument(
        "--estimators",
        type=_csv_list,
        default=list(default_estimators),
        help=f"comma list from {','.join(ESTIMATORS)}",
    )
    p.add_argument("--variant", choices=VARIANTS, default="A1")
    p.add_argument("--cdf-strategy", choices=CDF_STRATEGIES, default="per-income-logit")
    p.add_argument("--grid-size", type=int, default=200, help="income grid size for per-income-logit")
    p.add_argument("--level", type=float, default=0.95, help="confidence level")


def _add_dgp(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--noise-convention",
        choices=("sd", "variance"),
        default="sd",
        help="read the noise scale 2 as a standard deviation or a variance",
    )
    p.add_argument(
        "--income1-sign",
        type=int,
        choices=(-1, 1),
        default=-1,
        help="sign of the covariate part of the arm-1 income",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfindex", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="estimate G(e) and contrasts from a CSV file")
    est.add_argument("--input", type=Path, required=True)
    est.add_argument("--outcome", required=True)
    est.add_argument("--income", required=True)
    est.add_argument("--exposure", required=True)
    est.add_argument("--covariates", type=_csv_list, default=[], help="comma list of covariate columns")
    est.add_argument("--income-transform", default="power:0.2:1", help="'none' or 'power:P[:OFFSET]'")
    est.add_argument("--baseline", default=None, help="exposure label used as the contrast baseline")
    est.add_argument("--allow-negative-outcome", action="store_true")
    _add_estimation(est, 0.01, ("naive", "plug-in", "one-step", "est-eq"))
    _add_common(est)

    sim = sub.add_parser("simulate", help="Monte Carlo study on the simulation design")
    sim.add_argument("--n", type=_int_list, default=[1000], help="comma list of sample sizes")
    sim.add_argument("--replicates", type=int, default=1000)
    sim.add_argument("--scenarios", type=_csv_list, default=list(SCENARIOS))
    sim.add_argument("--truth-n", type=int, default=None, help="recompute true values from this many draws")
    _add_estimation(sim, 0.0, DEFAULT_ESTIMATORS)
    _add_dgp(sim)
    _add_common(sim)

    tru = sub.add_parser("truth", help="approximate the true indexes from potential outcomes")
    tru.add_argument("--n-big", type=int, default=1_000_000)
    _add_dgp(tru)
    _add_common(tru)
    return parser


def _nuisance_config(args) -> NuisanceConfig:
    return NuisanceConfig(trim_threshold=args.trim, cdf_strategy=args.cdf_strategy, grid_size=args.grid_size)


def _check_estimators(names):
    unknown = [e for e in names if e not in ESTIMATORS]
    if unknown:
        raise ValueError(f"unknown estimator(s) {unknown}; choose from {list(ESTIMATORS)}")


def _echo(args) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k not in ("verbose", "threads")}


def cmd_estimate(args) -> list[Path]:
    _check_estimators(args.estimators)
    transform = IncomeTransform.parse(args.income_transform)
    columns = ColumnMap(args.outcome, args.income, args.exposure, tuple(args.covariates))
    raw = load_csv(args.input, columns, allow_negative_outcome=args.allow_negative_outcome)
    data = type(raw)(
        raw.y,
        transform.apply(raw.income),
        raw.exposure,
        raw.covariates,
        n_levels=raw.n_levels,
        level_labels=raw.level_labels,
        allow_negative_outcome=raw.allow_negative_outcome,
    )
    labels = [str(lab) for lab in data.level_labels]
    baseline = 0
    if args.baseline is not None:
        if args.baseline not in labels:
            raise ValueError(f"baseline {args.baseline!r} is not an exposure label; labels are {labels}")
        baseline = labels.index(args.baseline)
    config = _nuisance_config(args)
    fits = fit_nuisance(data, config)
    estimates = estimate_all(fits, tuple(args.estimators), args.variant, args.level, baseline=baseline)
    rows = []
    for est in estimates:
        row = est.as_dict()
        row["label"] = labels[est.level]
        rows.append(row)
    kept = int(fits.kept.size)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "library_version": __version__,
        "command": "estimate",
        "config": _echo(args),
        "data": {
            "n_rows": raw.n,
            "n_kept": kept,
            "n_trimmed": raw.n - kept,
            "levels": labels,
            "baseline": labels[baseline],
            "kept_per_level": [int(c) for c in fits.data.level_counts()],
        },
        "estimates": rows,
    }
    args.out_dir.mkdir(parents=True, exist_ok=True)
    json_path = args.out_dir / "estimates.json"
    csv_path = args.out_dir / "estimates.csv"
    write_json(json_path, payload)
    write_rows_csv(csv_path, rows, ESTIMATE_COLUMNS)
    logger.info("kept %d of %d rows after trimming", kept, raw.n)
    return [json_path, csv_path]


def _calibration(args) -> dict:
    return {
        "noise_scale_is_sd": _noise_sd(args),
        "income1_sign": args.income1_sign,
        "note": "noise sd 2 with arm-1 income -X1 + 1.5 X2 reproduces the published true values",
    }


def cmd_simulate(args) -> list[Path]:
    _check_estimators(args.estimators)
    bad = [s for s in args.scenarios if s not in SCENARIOS]
    if bad:
        raise ValueError(f"unknown scenario(s) {bad}; choose from {list(SCENARIOS)}")
    truth = None
    if args.truth_n is not None:
        truth = approximate_truth(args.truth_n, args.seed, _noise_sd(args), args.income1_sign).values()
    workers = _threads(args)
    reports = []
    for n in args.n:
        progress = None
        if args.verbose:
            def progress(done, total, n=n):
                if done % max(1, total // 20) == 0 or done == total:
                    logger.info("n=%d: %d/%d replicates", n, done, total)
        reports.append(
            run_mc(
                n,
                args.replicates,
                scenarios=args.scenarios,
                estimators=args.estimators,
                master_seed=args.seed,
                truth=truth,
                workers=workers,
                variant=args.variant,
                conf_level=args.level,
                nuisance=_nuisance_config(args),
                noise_scale_is_sd=_noise_sd(args),
                income1_sign=args.income1_sign,
                progress=progress,
            )
        )
    args.out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = args.out_dir / "mc_report.csv"
    txt_path = args.out_dir / "mc_report.txt"
    json_path = args.out_dir / "mc_report.json"
    csv_text = reports[0].to_csv()
    for rep in reports[1:]:
        csv_text += rep.to_csv().split("\n", 1)[1]
    csv_path.write_text(csv_text, encoding="utf-8")
    txt_path.write_text("\n".join(r.to_text() for r in reports), encoding="utf-8")
    write_json(
        json_path,
        {
            "schema_version": SCHEMA_VERSION,
            "library_version": __version__,
            "command": "simulate",
            "config": _echo(args),
            "calibration": _calibration(args),
            "truth": reports[0].truth,
            "failures": {str(r.settings["n"]): r.failures for r in reports},
            "rows": [asdict(row) for r in reports for row in r.rows],
            "columns": list(CSV_COLUMNS),
        },
    )
    return [csv_path, txt_path, json_path]


def cmd_truth(args) -> list[Path]:
    truth = approximate_truth(args.n_big, args.seed, _noise_sd(args), args.income1_sign)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    path = args.out_dir / "truth.json"
    write_json(
        path,
        {
            "schema_version": SCHEMA_VERSION,
            "library_version": __version__,
            "command": "truth",
            "config": _echo(args),
            "calibration": _calibration(args),
            "truth": truth.as_dict(),
        },
    )
    return [path]


COMMANDS = {"estimate": cmd_estimate, "simulate": cmd_simulate, "truth": cmd_truth}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        written = COMMANDS[args.command](args)
    except (CfIndexError, ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
