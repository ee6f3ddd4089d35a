"""
Forecast-quality and economic performance metrics.

Return series are monthly log-returns; annualized figures are reported in
percent (Phi in basis points per year).
"""

import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import bisect

from app.core.config import settings
from app.core.errors import DataError, NumericError
from app.models.schemas import PerfReport, format_month, parse_month
from app.services.portfolio import StrategyReturns

logger = logging.getLogger(__name__)

LEDGER_COLUMNS = ["asset_id", "month", "shat", "s", "sign_pred", "sign_real"]
FEE_BRACKET = 0.05
WIDE_FEE_BRACKET = 0.5


# ============================================
# Forecast ledger
# ============================================

@dataclass
class ForecastLedger:
    """Stacked (asset, month) forecasts over every asset's test window."""

    frame: pd.DataFrame

    @classmethod
    def from_arrays(
        cls, asset_id: str, months: Sequence[int], shat: Sequence[float], s: Sequence[int], signs: Sequence[int]
    ) -> "ForecastLedger":
        s = np.asarray(s, dtype=int)
        frame = pd.DataFrame(
            {
                "asset_id": asset_id,
                "month": np.asarray(months, dtype=int),
                "shat": np.asarray(shat, dtype=float),
                "s": s,
                "sign_pred": np.asarray(signs, dtype=int),
                "sign_real": np.where(s == 1, 1, -1),
            },
            columns=LEDGER_COLUMNS,
        )
        return cls(frame)

    @classmethod
    def concat(cls, ledgers: Iterable["ForecastLedger"]) -> "ForecastLedger":
        frames = [ledger.frame for ledger in ledgers if not ledger.frame.empty]
        if not frames:
            return cls(pd.DataFrame(columns=LEDGER_COLUMNS))
        frame = pd.concat(frames, ignore_index=True).sort_values(["asset_id", "month"], kind="stable")
        if frame.duplicated(["asset_id", "month"]).any():
            raise DataError("ledger has more than one record per (asset, month)")
        return cls(frame.reset_index(drop=True))

    def __len__(self) -> int:
        return len(self.frame)

    def window(self, start: Optional[str], end: Optional[str]) -> "ForecastLedger":
        months = self.frame["month"].to_numpy()
        keep = np.ones(len(months), dtype=bool)
        if start is not None:
            keep &= months >= parse_month(start)
        if end is not None:
            keep &= months <= parse_month(end)
        return ForecastLedger(self.frame[keep].reset_index(drop=True))

    def keys(self) -> pd.MultiIndex:
        return pd.MultiIndex.from_frame(self.frame[["asset_id", "month"]])

    def to_csv(self, path) -> None:
        out = self.frame.assign(month=[format_month(int(m)) for m in self.frame["month"]])
        out.to_csv(path, index=False, float_format="%.17g")


def _require(ledger: ForecastLedger) -> pd.DataFrame:
    if len(ledger) == 0:
        raise NumericError("empty forecast ledger")
    return ledger.frame


def accuracy(ledger: ForecastLedger) -> float:
    frame = _require(ledger)
    return float(np.mean(frame["sign_pred"].to_numpy() == frame["sign_real"].to_numpy()))


def error_rate(ledger: ForecastLedger) -> float:
    frame = _require(ledger)
    return float(np.mean(frame["sign_pred"].to_numpy() != frame["sign_real"].to_numpy()))


def mae(ledger: ForecastLedger) -> float:
    frame = _require(ledger)
    return float(np.mean(np.abs(frame["shat"].to_numpy() - frame["s"].to_numpy())))


def relative_mae(ledger: ForecastLedger, benchmark: ForecastLedger) -> float:
    """Percent MAE improvement over the benchmark forecasts on identical keys."""
    if not ledger.keys().equals(benchmark.keys()):
        raise DataError("ledger and benchmark ledger cover different (asset, month) keys")
    return (1.0 - mae(ledger) / mae(benchmark)) * 100.0


# ============================================
# Return-series metrics
# ============================================

def _clean(series: Sequence[float]) -> np.ndarray:
    values = np.asarray(series, dtype=float)
    return values[~np.isnan(values)]


def mean_vol(series: Sequence[float], periods_per_year: int = settings.PERIODS_PER_YEAR) -> Tuple[float, float]:
    values = _clean(series)
    if len(values) < 2:
        raise NumericError("mean and volatility need at least two observations")
    mean = float(np.mean(values)) * periods_per_year * 100.0
    vol = float(np.std(values, ddof=1)) * np.sqrt(periods_per_year) * 100.0
    return mean, vol


def sharpe(series: Sequence[float], periods_per_year: int = settings.PERIODS_PER_YEAR) -> float:
    mean, vol = mean_vol(series, periods_per_year)
    if vol == 0.0:
        raise NumericError("Sharpe ratio of a zero-variance series")
    return mean / vol


def max_drawdown(series: Sequence[float]) -> float:
    """Largest peak-to-trough loss of the compounded path, in percent."""
    values = _clean(series)
    if len(values) == 0:
        raise NumericError("drawdown of an empty series")
    path = np.concatenate([[0.0], np.cumsum(values)])
    peaks = np.maximum.accumulate(path)
    return float(np.max(-np.expm1(path - peaks))) * 100.0


def accumulated(series: Sequence[float]) -> float:
    return float(np.sum(_clean(series))) * 100.0


def solve_monthly_fee(dcm: Sequence[float], bench: Sequence[float], gamma: float = settings.GAMMA) -> float:
    """
    Monthly fee equating average quadratic utility of two gross-return series.

    Found by bisection on [-0.05, 0.05], widened once to [-0.5, 0.5].
    """
    R_d = np.asarray(dcm, dtype=float)
    R_b = np.asarray(bench, dtype=float)
    if len(R_d) != len(R_b) or len(R_d) == 0:
        raise NumericError("fee needs two nonempty series of equal length")
    k = gamma / (2.0 * (1.0 + gamma))
    target = np.mean(R_b - k * R_b**2)

    def gap(phi: float) -> float:
        net = R_d - phi
        return float(np.mean(net - k * net**2) - target)

    if gap(0.0) == 0.0:
        return 0.0
    for bound in (FEE_BRACKET, WIDE_FEE_BRACKET):
        lo, hi = gap(-bound), gap(bound)
        if lo * hi <= 0:
            return float(bisect(gap, -bound, bound, xtol=1e-15, maxiter=500))
        logger.warning("Fee bracket [-%g, %g] has no sign change, widening", bound, bound)
    raise NumericError("management fee has no root on the widened bracket")


def management_fee(dcm: Sequence[float], bench: Sequence[float], gamma: float = settings.GAMMA) -> float:
    """Phi in basis points per year."""
    return solve_monthly_fee(dcm, bench, gamma) * 12 * 1e4


# ============================================
# Reports
# ============================================

def _window_mask(labels: Sequence[str], window: Optional[Tuple[str, str]]) -> np.ndarray:
    months = np.array([parse_month(m) for m in labels])
    if window is None:
        return np.ones(len(months), dtype=bool)
    return (months >= parse_month(window[0])) & (months <= parse_month(window[1]))


def subperiod_report(
    returns: StrategyReturns,
    window: Optional[Tuple[str, str]] = None,
    ledger: Optional[ForecastLedger] = None,
    benchmark: Optional[StrategyReturns] = None,
    mae_benchmark: Optional[ForecastLedger] = None,
    crash: bool = False,
    gamma: float = settings.GAMMA,
) -> PerfReport:
    """
    Metrics of the net series restricted to ``window``, rescaled to the
    ex-post target over the window's held months.

    Months without positions are skipped. Crash windows report the
    accumulated return instead of the maximum drawdown.
    """
    mask = _window_mask(returns.labels, window) & returns.held
    if not mask.any():
        raise NumericError(f"no portfolio months inside window {window}")
    series, factor = returns.rescaled(mask)
    labels = [m for m, keep in zip(returns.labels, mask) if keep]
    span = (labels[0], labels[-1])

    report = dict(
        strategy=returns.name,
        window=span,
        months=len(series),
        mean=float(np.mean(series)) * 12 * 100.0,
        accumulated=accumulated(series),
        max_dd=None if crash else max_drawdown(series),
        scale_factor=factor,
    )
    try:
        _, report["vol"] = mean_vol(series)
        report["sharpe"] = sharpe(series)
    except NumericError:
        logger.debug("%s: volatility undefined on %s", returns.name, span)

    trades = returns.turnover[mask]
    trades = trades[~np.isnan(trades)]
    if len(trades):
        report["turnover"] = float(trades.mean())

    if benchmark is not None:
        bench_mask = _window_mask(benchmark.labels, span) & benchmark.held
        if list(np.array(benchmark.labels)[bench_mask]) != labels:
            raise NumericError("strategy and fee benchmark cover different months")
        bench_series, _ = benchmark.rescaled(bench_mask)
        report["phi"] = management_fee(np.exp(series), np.exp(bench_series), gamma)

    if ledger is not None:
        window_ledger = ledger.window(*span)
        if len(window_ledger):
            report["accuracy"] = accuracy(window_ledger)
            report["mae"] = mae(window_ledger)
            if mae_benchmark is not None:
                report["relative_mae"] = relative_mae(window_ledger, mae_benchmark.window(*span))
    return PerfReport(**report)
