"""
Backtest orchestration shared by the CLI and the HTTP API.

A BacktestService owns one panel and one set of data-dependent settings
(lookbacks, volatility estimator, split, filter prior). Pool runs are computed
once per (lambda mode, lookback set) and reused by every strategy built on
them, so a whole comparison matrix costs two pool passes per asset.
"""

import json
import logging
import re
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.core.config import read_key_values, settings
from app.core.errors import ConfigError, NumericError
from app.models.schemas import (
    AlphaGrid,
    AssetSeries,
    CostSchedule,
    DataDiagnostics,
    FilterPrior,
    GroundTruth,
    LambdaGrid,
    PanelDataset,
    RunConfig,
    SplitPolicy,
    SyntheticSpec,
    parse_month,
)
from app.services.data_ingest import (
    generate_synthetic,
    load_panel,
    scan_panel,
    test_start,
    write_panel,
)
from app.services.features import build_features, dump_features, regressors
from app.services.metrics import ForecastLedger, subperiod_report
from app.services.model_pool import (
    PoolRun,
    average_inclusion,
    run_pool,
    write_filter_trace,
    write_pool_trace,
)
from app.services.portfolio import (
    POSITION_COLUMNS,
    Book,
    StrategyReturns,
    run_portfolio,
    write_positions,
    write_returns,
)
from app.services.signal_engine import decide_signs

logger = logging.getLogger(__name__)

COMPARE_COLUMNS = [
    "strategy",
    "turnover",
    "mean",
    "vol",
    "max_dd",
    "accumulated",
    "sharpe",
    "phi",
    "accuracy",
    "relative_mae",
]

# Fields that change anything a cached pool or strategy result depends on.
_DATA_FIELDS = (
    "data_path",
    "lookbacks",
    "train_months",
    "cost_path",
    "sigma_target",
    "expost_target",
    "gamma",
    "prior_scale",
    "ewma_delta",
    "sigma_floor",
    "ewma_mean",
    "laplace_mode",
    "alpha_timing",
    "prob_floor",
    "cv_window",
    "utility_dispersion",
)


def load_cost_schedule(path: Optional[str]) -> CostSchedule:
    if path is None:
        return CostSchedule()
    try:
        return CostSchedule.from_key_values(read_key_values(path))
    except ValueError as e:
        raise ConfigError(f"invalid cost schedule {path}: {e}") from e


def _pool_job(
    asset_id: str,
    X: np.ndarray,
    s: np.ndarray,
    lookbacks: Tuple[int, ...],
    prior_scale: float,
    lambdas: Tuple[float, ...],
    alphas: Tuple[float, ...],
    laplace_mode: str,
    alpha_timing: str,
    floor: float,
    record_states: bool,
) -> Tuple[str, PoolRun]:
    run = run_pool(
        X,
        s,
        lookbacks,
        prior=FilterPrior(c0_scale=prior_scale),
        lambda_grid=LambdaGrid(values=lambdas),
        alpha_grid=AlphaGrid(values=alphas),
        laplace_mode=laplace_mode,
        alpha_timing=alpha_timing,
        floor=floor,
        record_states=record_states,
    )
    return asset_id, run


@dataclass
class AssetData:
    asset: AssetSeries
    frame: pd.DataFrame
    test_month: int

    @property
    def test_rows(self) -> np.ndarray:
        return self.frame["month"].to_numpy() >= self.test_month


@dataclass
class StrategyResult:
    config: RunConfig
    book: Book
    returns: StrategyReturns
    ledger: ForecastLedger
    pool_runs: Dict[str, PoolRun] = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.config.strategy_name


class BacktestService:
    def __init__(self, config: RunConfig, panel: Optional[PanelDataset] = None):
        self.config = config
        self.panel = panel if panel is not None else load_panel(config.data_path)
        self.schedule = load_cost_schedule(config.cost_path)
        self.policy = SplitPolicy(train_months=config.train_months)
        self._assets: Optional[Dict[str, AssetData]] = None
        self._pools: Dict[Tuple[str, Tuple[int, ...]], Dict[str, PoolRun]] = {}
        self._results: Dict[str, StrategyResult] = {}

    # ---------------------------------------------------------------
    # Per-asset inputs
    # ---------------------------------------------------------------

    def assets(self) -> Dict[str, AssetData]:
        """Tradable assets (longer than the training split) with their features."""
        if self._assets is None:
            cfg = self.config
            self._assets = {}
            for asset in self.panel.assets:
                start = test_start(asset, self.policy)
                if start is None:
                    continue
                frame = build_features(
                    asset,
                    cfg.lookbacks,
                    offset=parse_month(asset.start_month),
                    delta=cfg.ewma_delta,
                    mean_mode=cfg.ewma_mean,
                    floor=cfg.sigma_floor,
                )
                self._assets[asset.asset_id] = AssetData(asset, frame, parse_month(start))
            if not self._assets:
                raise ConfigError(
                    f"no asset is longer than the {cfg.train_months}-month training split"
                )
            excluded = len(self.panel.assets) - len(self._assets)
            logger.info("%d tradable assets, %d excluded", len(self._assets), excluded)
        return self._assets

    def excluded_assets(self) -> List[str]:
        tradable = self.assets()
        return [a.asset_id for a in self.panel.assets if a.asset_id not in tradable]

    def pool_runs(self, lambda_mode: str, lookbacks: Tuple[int, ...]) -> Dict[str, PoolRun]:
        key = (lambda_mode, tuple(lookbacks))
        if key in self._pools:
            return self._pools[key]
        cfg = self.config
        lambdas = LambdaGrid.for_mode(lambda_mode).values
        jobs = []
        for asset_id, data in self.assets().items():
            X = regressors(data.frame, lookbacks)
            s = data.frame["s"].to_numpy(dtype=int)
            jobs.append(
                (
                    asset_id,
                    X,
                    s,
                    tuple(lookbacks),
                    cfg.prior_scale,
                    lambdas,
                    settings.ALPHAS,
                    cfg.laplace_mode,
                    cfg.alpha_timing,
                    cfg.prob_floor,
                    cfg.trace,
                )
            )
        logger.info(
            "Running %s pools over lookbacks %s for %d assets (%d workers)",
            lambda_mode,
            lookbacks,
            len(jobs),
            cfg.jobs,
        )
        runs: Dict[str, PoolRun] = {}
        if cfg.jobs > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=cfg.jobs) as executor:
                futures = {executor.submit(_pool_job, *job): job[0] for job in jobs}
                for future in as_completed(futures):
                    asset_id, run = future.result()
                    runs[asset_id] = run
        else:
            for job in jobs:
                asset_id, run = _pool_job(*job)
                runs[asset_id] = run
        self._pools[key] = {a: runs[a] for a in sorted(runs)}
        return self._pools[key]

    def _single_runs(self, lambda_mode: str, L: int) -> Tuple[Dict[str, PoolRun], Tuple[int, ...]]:
        """The {L} model is a column of the full pool; masked models never interact."""
        return self.pool_runs(lambda_mode, tuple(self.config.lookbacks)), (L,)

    # ---------------------------------------------------------------
    # Strategies
    # ---------------------------------------------------------------

    def strategy(self, config: RunConfig) -> StrategyResult:
        name = config.strategy_name
        if name in self._results:
            return self._results[name]
        kind, L = config.combine_kind()
        policy = config.cutoff_policy()
        runs: Dict[str, PoolRun] = {}
        column_lookbacks = None
        if kind in ("dma", "dms"):
            runs = self.pool_runs(config.lambda_mode, tuple(config.lookbacks))
        elif kind == "single":
            runs, column_lookbacks = self._single_runs(config.lambda_mode, L)

        positions, ledgers = [], []
        for asset_id, data in self.assets().items():
            rows = data.test_rows
            test = data.frame[rows]
            if test.empty:
                continue
            s = test["s"].to_numpy(dtype=int)
            if kind == "naive":
                up = test[f"mom_{L}"].to_numpy() >= 0
                shat = np.where(up, 1.0, 0.0)
                signs = np.where(up, 1, -1)
            else:
                run = runs[asset_id]
                if kind == "dma":
                    shat = run.shat_dma[rows]
                elif kind == "dms":
                    shat = run.shat_dms[rows]
                else:
                    shat = run.probs[rows, run.column(column_lookbacks)]
                signs, _ = decide_signs(
                    shat, s, test["t"].to_numpy(), data.asset.as_array(), policy
                )
            positions.append(
                pd.DataFrame(
                    {
                        "asset_id": asset_id,
                        "asset_class": data.asset.asset_class.value,
                        "month": test["month"].to_numpy(),
                        "sign": signs,
                        "weight": config.sigma_target / test["sigma_ante"].to_numpy(),
                        "r": test["r"].to_numpy(),
                    },
                    columns=POSITION_COLUMNS,
                )
            )
            ledgers.append(
                ForecastLedger.from_arrays(asset_id, test["month"].to_numpy(), shat, s, signs)
            )

        if not positions:
            raise NumericError(f"{name}: no asset reaches its test window")
        book = Book.from_positions(pd.concat(positions, ignore_index=True))
        returns = run_portfolio(book, self.schedule, name, config.expost_target)
        result = StrategyResult(
            config=config,
            book=book,
            returns=returns,
            ledger=ForecastLedger.concat(ledgers),
            pool_runs=runs if kind in ("dma", "dms") or config.trace else {},
        )
        self._results[name] = result
        logger.info("Built %s over %d months", name, len(book.months))
        return result

    def benchmark_lookback(self) -> int:
        lookbacks = self.config.lookbacks
        return settings.BENCHMARK_LOOKBACK if settings.BENCHMARK_LOOKBACK in lookbacks else max(lookbacks)

    def fee_benchmark(self) -> StrategyResult:
        """Naive TSMOM at the benchmark lookback, the reference for Phi."""
        return self.strategy(
            self.config.model_copy(update=dict(combine=f"naive:{self.benchmark_lookback()}"))
        )

    def mae_benchmark(self) -> StrategyResult:
        """Constant-parameter single-lookback model, the reference for %MAE."""
        return self.strategy(
            self.config.model_copy(
                update=dict(
                    combine=f"single:{self.benchmark_lookback()}",
                    lambda_mode="cp",
                    cutoff="fixed:0.5",
                    trace=False,
                )
            )
        )

    # ---------------------------------------------------------------
    # Reports
    # ---------------------------------------------------------------

    def report(self, result: StrategyResult, window: Optional[Tuple[str, str]], crash: bool) -> Dict:
        fee_bench = self.fee_benchmark().returns
        mae_bench = self.mae_benchmark().ledger
        gamma = result.config.gamma
        out = {
            "strategy": result.name,
            "config": result.config.model_dump(mode="json"),
            "excluded_assets": self.excluded_assets(),
            "full": subperiod_report(
                result.returns, None, result.ledger, fee_bench, mae_bench, gamma=gamma
            ).model_dump(mode="json"),
        }
        if window is not None:
            out["window"] = subperiod_report(
                result.returns, window, result.ledger, fee_bench, mae_bench, crash=crash, gamma=gamma
            ).model_dump(mode="json")
        out["asset_classes"] = self.asset_class_report(result)
        if result.config.combine_kind()[0] in ("dma", "dms"):
            out["inclusion"] = self.inclusion_report(result)
        return out

    def asset_class_report(self, result: StrategyResult) -> Dict[str, Dict]:
        """Same rules applied to the sub-book of each asset class."""
        reports = {}
        for asset_class in sorted({c.value for c in result.book.classes}):
            members = [a for a, c in zip(result.book.assets, result.book.classes) if c.value == asset_class]
            sub_book = result.book.restrict(members)
            try:
                returns = run_portfolio(
                    sub_book, self.schedule, f"{result.name}/{asset_class}", result.config.expost_target
                )
                ledger = ForecastLedger(
                    result.ledger.frame[result.ledger.frame["asset_id"].isin(members)].reset_index(drop=True)
                )
                reports[asset_class] = subperiod_report(
                    returns, None, ledger, gamma=result.config.gamma
                ).model_dump(mode="json")
            except NumericError as e:
                logger.warning("Skipping %s report for %s: %s", asset_class, result.name, e)
        return reports

    def inclusion_report(self, result: StrategyResult) -> Dict[str, Dict[str, float]]:
        assets = self.assets()
        groups = {a: assets[a].asset.asset_class.value for a in result.pool_runs}
        rows = {a: assets[a].test_rows for a in result.pool_runs}
        return average_inclusion(result.pool_runs, groups, rows)

    # ---------------------------------------------------------------
    # Bundles
    # ---------------------------------------------------------------

    def bundle_dir(self, config: RunConfig) -> Path:
        """runs/<strategy>, or runs/<strategy>-<window> for anything but the full sample."""
        name = config.strategy_name if config.window == "full" else f"{config.strategy_name}-{config.window}"
        safe = re.sub(r"[^A-Za-z0-9._-]+", "_", name)
        return Path(config.output_dir) / safe

    def write_bundle(self, result: StrategyResult, report: Dict) -> Path:
        out = self.bundle_dir(result.config)
        out.mkdir(parents=True, exist_ok=True)
        write_returns(result.returns, out / "returns.csv")
        write_positions(result.book, out / "positions.csv")
        result.ledger.to_csv(out / "ledger.csv")
        (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
        if result.config.output_format == "csv":
            rows = [dict(section=k, **report[k]) for k in ("full", "window") if k in report]
            pd.DataFrame(rows).to_csv(out / "report.csv", index=False, float_format="%.17g")
        if result.config.trace:
            self._write_traces(result, out / "traces")
        logger.info("Wrote %s bundle to %s", result.name, out)
        return out

    def _write_traces(self, result: StrategyResult, directory: Path) -> None:
        kind, L = result.config.combine_kind()
        if kind == "naive":
            return
        for asset_id, run in result.pool_runs.items():
            labels = self.assets()[asset_id].frame["month_label"].tolist()
            if kind == "single":
                write_filter_trace(run, run.column((L,)), labels, directory / f"{asset_id}.csv")
            else:
                write_pool_trace(run, labels, directory / f"{asset_id}.csv")

    def run_backtest(self, config: Optional[RunConfig] = None) -> Tuple[Dict, Path]:
        config = config or self.config
        result = replace(self.strategy(config), config=config)
        report = self.report(result, config.window_bounds(), crash=config.window == "crash")
        return report, self.write_bundle(result, report)

    def compare_row(self, config: RunConfig) -> Dict:
        result = self.strategy(config)
        window = config.window_bounds()
        perf = subperiod_report(
            result.returns,
            window,
            result.ledger,
            self.fee_benchmark().returns,
            self.mae_benchmark().ledger,
            crash=config.window == "crash",
            gamma=config.gamma,
        )
        row = perf.model_dump()
        return {column: row.get(column) for column in COMPARE_COLUMNS}

    def dump_features(self, asset_id: str, path: Optional[str] = None) -> Path:
        assets = self.assets()
        if asset_id not in assets:
            raise ConfigError(f"asset {asset_id!r} is unknown or too short to trade")
        target = path or str(Path(self.config.output_dir) / "features" / f"{asset_id}.csv")
        return dump_features(assets[asset_id].frame, self.config.lookbacks, target)


# ============================================
# Module-level entry points
# ============================================

def run_backtest(config: RunConfig, panel: Optional[PanelDataset] = None) -> Tuple[Dict, Path]:
    return BacktestService(config, panel).run_backtest()


def standard_matrix(base: RunConfig) -> List[RunConfig]:
    """Every DMA/DMS/single row under both lambda modes, plus naive rows."""
    configs = []
    for mode in ("cp", "tvp"):
        for combine in ["dma", "dms", *(f"single:{L}" for L in base.lookbacks)]:
            configs.append(base.model_copy(update=dict(lambda_mode=mode, combine=combine)))
    for L in base.lookbacks:
        configs.append(base.model_copy(update=dict(combine=f"naive:{L}")))
    return configs


def run_matrix(
    configs: Sequence[RunConfig], panel: Optional[PanelDataset] = None, write: bool = True
) -> pd.DataFrame:
    """
    One comparison row per config, in the given order. Configs sharing data
    settings share a service, so pools are computed once per lambda mode.
    """
    if not configs:
        raise ConfigError("run_matrix needs at least one configuration")
    services: Dict[Tuple, BacktestService] = {}
    rows = []
    for config in configs:
        key = tuple(repr(getattr(config, name)) for name in _DATA_FIELDS)
        if key not in services:
            services[key] = BacktestService(config, panel)
        rows.append(services[key].compare_row(config))
    table = pd.DataFrame(rows, columns=COMPARE_COLUMNS)
    if write:
        out = Path(configs[0].output_dir)
        out.mkdir(parents=True, exist_ok=True)
        table.to_csv(out / "compare.csv", index=False, float_format="%.17g")
        logger.info("Wrote comparison table %s", out / "compare.csv")
    return table


def validate_data(path: str) -> DataDiagnostics:
    diagnostics, _ = scan_panel(path)
    for finding in diagnostics.findings:
        logger.warning("%s: %s (%s %s)", finding.kind, finding.message, finding.asset_id or "", finding.month or "")
    logger.info("%d assets, %d findings in %s", len(diagnostics.summary), len(diagnostics.findings), path)
    return diagnostics


def synth(spec: SyntheticSpec, seed: int, path: str) -> Tuple[GroundTruth, Path]:
    """Write a synthetic panel CSV and its ground truth next to it."""
    panel, truth = generate_synthetic(spec, seed)
    out = write_panel(panel, path)
    truth_path = out.with_name(out.stem + "_truth.json")
    truth_path.write_text(json.dumps(truth.model_dump(mode="json"), sort_keys=True, indent=2) + "\n")
    logger.info("Wrote %s panel (%d assets) to %s", spec.generator, spec.n_assets, out)
    return truth, out
