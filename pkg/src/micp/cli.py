"""Command-line entry point: ``micp {simulate,split,calibrate,evaluate,sweep}``.

Exit codes:
    0  success
    2  bad command-line usage
    3  input could not be parsed (trajectory log, config, artifact JSON)
    4  budget constraint violated / infeasible allocation
    5  artifact format version mismatch
    6  data precondition failed (empty set, no answerable calibration record, ...)
    7  file not found or unreadable

Settings resolve as defaults < command-line flags < ``--config`` file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from .pipeline import (
    SWEEP_FIELDS,
    RunConfig,
    VersionMismatchError,
    build_provenance,
    calibrate,
    dumps_json,
    file_digest,
    evaluate_artifact,
    load_artifact,
    report_document,
    rows_csv,
    save_artifact,
    sweep,
)
from .simulator import SimConfig, write_simulation
from .stopping import InfeasibleBudgetError
from .trajectory import SchemaError, TrajectoryParseError, load_trajectory_log, split_dataset, write_trajectory_log

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_CONSTRAINT = 4
EXIT_VERSION = 5
EXIT_DATA = 6
EXIT_IO = 7

log = logging.getLogger("micp")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _read_json(path: str) -> dict[str, Any]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc.strerror}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_PARSE, f"{path}: invalid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise CliError(EXIT_PARSE, f"{path}: expected a JSON object")
    return obj


def _load_log(path: str):
    try:
        return load_trajectory_log(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc.strerror}") from None
    except (TrajectoryParseError, SchemaError) as exc:
        raise CliError(EXIT_PARSE, f"{path}: {exc}") from None


_RUN_FLAGS = {
    "alpha": "alpha_total",
    "alpha_ret": "alpha_ret",
    "eta": "eta",
    "gamma": "gamma",
    "grid_steps": "grid_steps",
    "similarity_threshold": "similarity_threshold",
    "stop_score": "stop_score_mode",
    "cluster_mode": "cluster_mode",
    "gold_match": "gold_match",
    "seed": "seed",
}


def _run_config(args: argparse.Namespace) -> RunConfig:
    settings: dict[str, Any] = {}
    for flag, name in _RUN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            settings[name] = value
    if args.config:
        settings.update(_read_json(args.config))
    try:
        return RunConfig.from_dict(settings)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_PARSE, f"invalid run configuration: {exc}") from None


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("calibration settings")
    g.add_argument("--alpha", type=float, help="total error budget (default 0.10)")
    g.add_argument("--alpha-ret", type=float, help="retrieval error budget (default 0.1)")
    g.add_argument("--eta", type=float, help="entropy penalty weight (default 0.1)")
    g.add_argument("--gamma", type=float, help="turn-cost weight in the objective (default 1.0)")
    g.add_argument("--grid-steps", type=int, help="grid values per turn (default 20)")
    g.add_argument("--similarity-threshold", type=float, help="cosine merge threshold (default 0.9)")
    g.add_argument("--stop-score", choices=["penalized-freq", "neg-entropy"])
    g.add_argument("--cluster-mode", choices=["auto", "embedding", "exact-match"])
    g.add_argument("--gold-match", choices=["exact", "substring"])
    g.add_argument("--seed", type=int)
    g.add_argument("--config", help="JSON file of settings; overrides flags")
    p.add_argument("--workers", type=int, default=1, help="worker processes (output is unchanged)")


def cmd_simulate(args: argparse.Namespace) -> int:
    settings: dict[str, Any] = {}
    if args.seed is not None:
        settings["seed"] = args.seed
    if args.n_records is not None:
        settings["n_records"] = args.n_records
    if args.config:
        settings.update(_read_json(args.config))
    try:
        config = SimConfig.from_dict(settings)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_PARSE, f"invalid simulation config: {exc}") from None
    sidecar = write_simulation(config, args.out, workers=args.workers)
    log.info("wrote %d records to %s (ground truth: %s)", config.n_records, args.out, sidecar)
    return EXIT_OK


def cmd_split(args: argparse.Namespace) -> int:
    records = _load_log(args.input)
    sizes = args.sizes
    if len(sizes) != 3:
        raise CliError(EXIT_USAGE, "--sizes needs three integers: opt,cal,test")
    try:
        split = split_dataset(records, args.seed if args.seed is not None else 0, tuple(sizes))
    except ValueError as exc:
        raise CliError(EXIT_DATA, str(exc)) from None
    for name in ("opt", "cal", "test"):
        write_trajectory_log(getattr(split, name), f"{args.out}.{name}.jsonl")
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    config = _run_config(args)
    if bool(args.budgets is not None) == bool(args.gridsearch):
        raise CliError(EXIT_USAGE, "pass exactly one of --budgets or --gridsearch")
    if args.gridsearch and not args.opt:
        raise CliError(EXIT_USAGE, "--gridsearch needs --opt")
    cal = _load_log(args.input)
    opt = _load_log(args.opt) if args.gridsearch else None
    provenance = build_provenance({"cal": args.input, "opt": args.opt if args.gridsearch else None}, config.seed)
    try:
        artifact = calibrate(
            cal, config, opt=opt, budgets=args.budgets, provenance=provenance, workers=args.workers
        )
    except InfeasibleBudgetError as exc:
        raise CliError(EXIT_CONSTRAINT, str(exc)) from None
    except ValueError as exc:
        raise CliError(EXIT_DATA, str(exc)) from None
    save_artifact(artifact, args.artifact)
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    try:
        artifact = load_artifact(args.artifact)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {args.artifact}: {exc.strerror}") from None
    except VersionMismatchError as exc:
        raise CliError(EXIT_VERSION, str(exc)) from None
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(EXIT_PARSE, f"{args.artifact}: malformed artifact: {exc}") from None
    test = _load_log(args.input)
    if not test:
        raise CliError(EXIT_DATA, f"{args.input}: test set is empty")
    try:
        report, rows = evaluate_artifact(test, artifact, workers=args.workers)
    except ValueError as exc:
        raise CliError(EXIT_DATA, str(exc)) from None
    inputs = {"test": file_digest(args.input), "artifact": file_digest(args.artifact)}
    Path(args.report).write_text(dumps_json(report_document(report, artifact, inputs)), encoding="utf-8")
    csv_path = args.csv or str(Path(args.report).with_suffix(".csv"))
    Path(csv_path).write_text(rows_csv(rows), encoding="utf-8")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    config = _run_config(args)
    if not args.alphas:
        raise CliError(EXIT_USAGE, "--alphas is empty")
    cal = _load_log(args.cal)
    test = _load_log(args.test)
    opt = _load_log(args.opt) if args.opt else None
    if not test:
        raise CliError(EXIT_DATA, f"{args.test}: test set is empty")
    try:
        rows = sweep(cal, test, args.alphas, config, opt=opt, budgets=args.budgets, workers=args.workers)
    except InfeasibleBudgetError as exc:
        raise CliError(EXIT_CONSTRAINT, str(exc)) from None
    except ValueError as exc:
        raise CliError(EXIT_DATA, str(exc)) from None
    doc = {"config": config.to_dict(), "rows": rows}
    Path(args.report).write_text(dumps_json(doc), encoding="utf-8")
    lines = [",".join(SWEEP_FIELDS)]
    for r in rows:
        lines.append(",".join("" if r[k] is None else repr(r[k]) for k in SWEEP_FIELDS))
    Path(args.report).with_suffix(".csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="micp", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic trajectory log")
    p.add_argument("--config", help="JSON SimConfig; overrides flags")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-records", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("split", help="seeded opt/cal/test split of a log")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--sizes", type=_ints, default=[300, 300, 300], help="opt,cal,test (default 300,300,300)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output prefix; writes PREFIX.{opt,cal,test}.jsonl")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("calibrate", help="calibrate thresholds and write an artifact")
    p.add_argument("--in", "--cal", dest="input", required=True, help="calibration log")
    p.add_argument("--opt", help="optimization log for --gridsearch")
    p.add_argument("--budgets", type=_floats, help="budgets for turns 0..T-1, e.g. 0.02,0.03,0")
    p.add_argument("--gridsearch", action="store_true")
    p.add_argument("--artifact", "--out", dest="artifact", required=True)
    _add_run_flags(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="apply an artifact to a test log")
    p.add_argument("--in", "--test", dest="input", required=True)
    p.add_argument("--artifact", required=True)
    p.add_argument("--report", required=True, help="JSON report path")
    p.add_argument("--csv", help="per-record CSV (default: report path with .csv)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="calibrate and evaluate over several total budgets")
    p.add_argument("--cal", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--opt", help="grid-search each alpha on this log")
    p.add_argument("--budgets", type=_floats, help="fixed budgets when --opt is absent")
    p.add_argument("--alphas", type=_floats, default=[0.05, 0.10, 0.15, 0.20, 0.25])
    p.add_argument("--report", required=True, help="JSON path; a CSV table is written alongside")
    _add_run_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except CliError as exc:
        print(f"micp {args.command}: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
