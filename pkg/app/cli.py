"""
Command-line entry point: ``python -m app.cli <command> ...``.

Exit codes: 0 ok, 1 unexpected failure, 2 configuration, 3 data, 4 numerical.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from app.core.config import read_key_values, settings
from app.core.errors import ConfigError, DataError, TsmomError
from app.core.logger import setup_logging
from app.models.schemas import RunConfig, SyntheticSpec
from app.services.backtest_service import (
    BacktestService,
    COMPARE_COLUMNS,
    run_matrix,
    standard_matrix,
    synth,
    validate_data,
)

logger = logging.getLogger(__name__)
console = Console()

# flag destination -> RunConfig field
_RUN_FIELDS = {
    "data": "data_path",
    "lookbacks": "lookbacks",
    "lambda_mode": "lambda_mode",
    "combine": "combine",
    "cutoff": "cutoff",
    "costs": "cost_path",
    "window": "window",
    "seed": "seed",
    "out": "output_dir",
    "output_format": "output_format",
    "train_months": "train_months",
    "jobs": "jobs",
    "trace": "trace",
    "sigma_target": "sigma_target",
    "expost_target": "expost_target",
    "gamma": "gamma",
    "prior_scale": "prior_scale",
    "ewma_delta": "ewma_delta",
    "sigma_floor": "sigma_floor",
    "ewma_mean": "ewma_mean",
    "laplace_mode": "laplace_mode",
    "alpha_timing": "alpha_timing",
    "utility_dispersion": "utility_dispersion",
    "cv_window": "cv_window",
    "prob_floor": "prob_floor",
}


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="KEY=value file; its values override flags")
    parser.add_argument("--jobs", type=int, default=None, help="worker processes (1 = serial)")
    parser.add_argument("--output-format", choices=["json", "csv"], default=None)
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true")
    verbosity.add_argument("-q", "--quiet", action="store_true")


def _add_run_flags(parser: argparse.ArgumentParser, with_strategy: bool = True) -> None:
    parser.add_argument("--data", help="panel CSV file or directory of CSVs")
    parser.add_argument("--lookbacks", help="comma-separated months, e.g. 1,2,4,6,8,10,12")
    if with_strategy:
        parser.add_argument("--lambda-mode", choices=["cp", "tvp"], default=None)
        parser.add_argument("--combine", help="dma | dms | single:L | naive:L")
        parser.add_argument("--trace", action="store_true", default=None, help="write per-asset filter traces")
    parser.add_argument("--cutoff", help="fixed:C | cv1 | cv2 | bayes")
    parser.add_argument("--costs", help="cost schedule KEY=value file")
    parser.add_argument("--window", help="full | crash | post_crash | YYYY-MM:YYYY-MM")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--train-months", type=int, default=None)
    parser.add_argument("--sigma-target", type=float, default=None)
    parser.add_argument("--expost-target", type=float, default=None)
    parser.add_argument("--gamma", type=float, default=None)
    parser.add_argument("--prior-scale", type=float, default=None)
    parser.add_argument("--ewma-delta", type=float, default=None)
    parser.add_argument("--sigma-floor", type=float, default=None)
    parser.add_argument("--ewma-mean", choices=["running", "full"], default=None)
    parser.add_argument("--laplace-mode", choices=["posterior", "prior"], default=None)
    parser.add_argument("--alpha-timing", choices=["next", "current"], default=None)
    parser.add_argument("--utility-dispersion", choices=["mean_square", "variance"], default=None)
    parser.add_argument("--cv-window", type=int, default=None)
    parser.add_argument("--prob-floor", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsmom", description=settings.PROJECT_NAME)
    commands = parser.add_subparsers(dest="command", required=True)

    backtest = commands.add_parser("backtest", help="run one strategy and write its bundle")
    _add_run_flags(backtest)
    _add_common(backtest)

    matrix = commands.add_parser("matrix", help="compare DMA/DMS/single/naive strategies")
    _add_run_flags(matrix, with_strategy=False)
    _add_common(matrix)

    validate = commands.add_parser("validate-data", help="check a panel and summarize it")
    validate.add_argument("--data", required=True)
    _add_common(validate)

    synthetic = commands.add_parser("synth", help="write a synthetic panel with known truth")
    synthetic.add_argument(
        "--generator", choices=["iid-gaussian", "ar1", "regime-switching-logit"], default="iid-gaussian"
    )
    synthetic.add_argument("--assets", type=int, default=1)
    synthetic.add_argument("--months", type=int, default=120)
    synthetic.add_argument("--start", default="1980-01")
    synthetic.add_argument("--mean", type=float, default=0.0)
    synthetic.add_argument("--vol", type=float, default=0.20)
    synthetic.add_argument("--persistence", type=float, default=0.0)
    synthetic.add_argument("--planted", default="1", help="comma-separated planted lookbacks")
    synthetic.add_argument("--coefficients", default="8", help="comma-separated, one per planted lookback")
    synthetic.add_argument("--intercept", type=float, default=0.0)
    synthetic.add_argument("--flip-month", type=int, default=None)
    synthetic.add_argument("--seed", type=int, default=0)
    synthetic.add_argument("--out", required=True, help="CSV path to write")
    _add_common(synthetic)

    report = commands.add_parser("report", help="tabulate existing report.json bundles")
    report.add_argument("paths", nargs="+", help="bundle directories or report.json files")
    report.add_argument("--section", default="full", help="full | window")
    _add_common(report)

    features = commands.add_parser("features", help="dump one asset's feature rows")
    _add_run_flags(features, with_strategy=False)
    features.add_argument("--asset", required=True)
    features.add_argument("--path", help="CSV path (default <out>/features/<asset>.csv)")
    _add_common(features)
    return parser


def build_run_config(args: argparse.Namespace) -> RunConfig:
    values: Dict[str, object] = {}
    for flag, field in _RUN_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            values[field] = value
    if args.config:
        fields = set(RunConfig.model_fields)
        for key, value in read_key_values(args.config).items():
            name = key.lower()
            name = _RUN_FIELDS.get(name, name)
            if name not in fields:
                raise ConfigError(f"unknown key {key!r} in {args.config}")
            values[name] = value
    if not values.get("data_path"):
        raise ConfigError("a panel is required (--data or DATA_PATH in --config)")
    try:
        return RunConfig(**values)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and pd.isna(value)):
        return "N/A"
    if isinstance(value, float):
        return f"{value:.2f}"
    return str(value)


def _render_table(title: str, frame: pd.DataFrame) -> None:
    table = Table(title=title)
    for column in frame.columns:
        table.add_column(column, justify="left" if column == "strategy" else "right")
    for row in frame.itertuples(index=False):
        table.add_row(*(_fmt(v) for v in row))
    console.print(table)


def _emit(frame: pd.DataFrame, fmt: str, title: str) -> None:
    if fmt == "csv":
        sys.stdout.write(frame.to_csv(index=False, float_format="%.17g"))
    elif console.is_terminal:
        _render_table(title, frame)
    else:
        sys.stdout.write(frame.to_json(orient="records", indent=2) + "\n")


def cmd_backtest(args: argparse.Namespace) -> int:
    config = build_run_config(args)
    report, path = BacktestService(config).run_backtest()
    if config.output_format == "csv":
        section = report.get("window", report["full"])
        sys.stdout.write(pd.DataFrame([section]).to_csv(index=False, float_format="%.17g"))
    else:
        console.print_json(json.dumps(report["window" if "window" in report else "full"]))
    logger.info("Bundle: %s", path)
    return 0


def cmd_matrix(args: argparse.Namespace) -> int:
    base = build_run_config(args)
    table = run_matrix(standard_matrix(base))
    _emit(table, base.output_format, f"Strategies ({base.window})")
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    diagnostics = validate_data(args.data)
    fmt = args.output_format or "json"
    if fmt == "csv":
        summary = pd.DataFrame([s.model_dump() for s in diagnostics.summary])
        sys.stdout.write(summary.to_csv(index=False))
        findings = pd.DataFrame([f.model_dump() for f in diagnostics.findings])
        if not findings.empty:
            sys.stderr.write(findings.to_csv(index=False))
    else:
        console.print_json(diagnostics.model_dump_json())
    return 0 if diagnostics.clean else DataError.exit_code


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def cmd_synth(args: argparse.Namespace) -> int:
    try:
        spec = SyntheticSpec(
            generator=args.generator,
            n_assets=args.assets,
            n_months=args.months,
            start_month=args.start,
            mean=args.mean,
            vol=args.vol,
            persistence=args.persistence,
            planted_lookbacks=tuple(int(v) for v in _floats(args.planted)),
            coefficients=_floats(args.coefficients),
            intercept=args.intercept,
            flip_month=args.flip_month,
        )
    except (ValidationError, ValueError) as e:
        raise ConfigError(str(e)) from e
    truth, path = synth(spec, args.seed, args.out)
    console.print_json(truth.model_dump_json())
    return 0


def _load_reports(paths: Sequence[str]) -> List[Dict]:
    reports = []
    for raw in paths:
        path = Path(raw)
        path = path / "report.json" if path.is_dir() else path
        if not path.is_file():
            raise ConfigError(f"no report.json at {raw}")
        reports.append(json.loads(path.read_text()))
    return reports


def cmd_report(args: argparse.Namespace) -> int:
    rows = []
    for report in _load_reports(args.paths):
        section = report.get(args.section)
        if section is None:
            raise ConfigError(f"{report['strategy']} has no {args.section!r} section")
        rows.append({column: section.get(column) for column in COMPARE_COLUMNS})
    _emit(pd.DataFrame(rows, columns=COMPARE_COLUMNS), args.output_format or "json", "Reports")
    return 0


def cmd_features(args: argparse.Namespace) -> int:
    config = build_run_config(args)
    path = BacktestService(config).dump_features(args.asset, args.path)
    console.print(str(path))
    return 0


COMMANDS = {
    "backtest": cmd_backtest,
    "matrix": cmd_matrix,
    "validate-data": cmd_validate,
    "synth": cmd_synth,
    "report": cmd_report,
    "features": cmd_features,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    setup_logging(level)
    try:
        return COMMANDS[args.command](args)
    except TsmomError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except Exception:
        logger.exception("Unexpected failure")
        return 1


if __name__ == "__main__":
    sys.exit(main())
