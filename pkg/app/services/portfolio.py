"""
Volatility-targeted TSMOM books: per-asset sleeves, the equal-weighted
cross-section, trading and rollover costs, turnover and ex-post scaling.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.core.config import settings
from app.core.errors import NumericError
from app.models.schemas import AssetClass, CostSchedule, PositionRow, format_month

logger = logging.getLogger(__name__)

BP = 1e-4
POSITION_COLUMNS = ["asset_id", "asset_class", "month", "sign", "weight", "r"]


def naive_sign(mom: float) -> int:
    return 1 if mom >= 0 else -1


def asset_strategy_return(sign: int, sigma_tg: float, sigma_ante: float, r: float) -> float:
    return sign * (sigma_tg / sigma_ante) * r


def portfolio_return(rows: Sequence[PositionRow], returns: Dict[str, float]) -> Optional[float]:
    """Equal-weighted average of the sleeves; None when nothing is held."""
    if not rows:
        return None
    total = 0.0
    for row in sorted(rows, key=lambda r: r.asset_id):
        total += row.sign * row.weight * returns[row.asset_id]
    return total / len(rows)


@dataclass
class Book:
    """Signed exposures on a contiguous month grid; NaN marks an asset out of the book."""

    months: np.ndarray  # global month indices
    assets: List[str]  # sorted
    classes: List[AssetClass]
    weights: np.ndarray  # (T, N) sign * sigma_tg / sigma_ante
    returns: np.ndarray  # (T, N)

    @classmethod
    def from_positions(cls, positions: pd.DataFrame) -> "Book":
        if positions.empty:
            raise NumericError("no positions to build a portfolio from")
        first, last = int(positions["month"].min()), int(positions["month"].max())
        months = np.arange(first, last + 1)
        classes = positions.drop_duplicates("asset_id").set_index("asset_id")["asset_class"]
        assets = sorted(classes.index)
        signed = positions.assign(w=positions["sign"] * positions["weight"])
        weights = (
            signed.pivot(index="month", columns="asset_id", values="w")
            .reindex(index=months, columns=assets)
            .to_numpy(dtype=float)
        )
        returns = (
            positions.pivot(index="month", columns="asset_id", values="r")
            .reindex(index=months, columns=assets)
            .to_numpy(dtype=float)
        )
        return cls(
            months=months,
            assets=assets,
            classes=[AssetClass(classes[a]) for a in assets],
            weights=weights,
            returns=returns,
        )

    @property
    def labels(self) -> List[str]:
        return [format_month(int(m)) for m in self.months]

    @property
    def active(self) -> np.ndarray:
        return ~np.isnan(self.weights)

    @property
    def n_assets(self) -> np.ndarray:
        return self.active.sum(axis=1)

    def restrict(self, assets: Sequence[str]) -> "Book":
        wanted = set(assets)
        keep = [i for i, a in enumerate(self.assets) if a in wanted]
        return Book(
            months=self.months,
            assets=[self.assets[i] for i in keep],
            classes=[self.classes[i] for i in keep],
            weights=self.weights[:, keep],
            returns=self.returns[:, keep],
        )

    def position_rows(self, t: int) -> List[PositionRow]:
        return [
            PositionRow(
                asset_id=self.assets[i],
                t=int(self.months[t]),
                sign=1 if self.weights[t, i] > 0 else -1,
                weight=abs(float(self.weights[t, i])),
            )
            for i in np.flatnonzero(self.active[t])
        ]


def _per_asset(book: Book, values: np.ndarray) -> np.ndarray:
    """Cross-sectional mean over held assets in column (asset_id) order."""
    n = book.n_assets
    total = np.where(book.active, values, 0.0).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 0, total / np.maximum(n, 1), np.nan)


def gross_returns(book: Book) -> np.ndarray:
    return _per_asset(book, book.weights * book.returns)


def _trades(book: Book) -> np.ndarray:
    held = np.nan_to_num(book.weights, nan=0.0)
    previous = np.vstack([np.zeros((1, held.shape[1])), held[:-1]])
    return np.abs(held - previous)


def apply_costs(book: Book, schedule: CostSchedule) -> Tuple[np.ndarray, np.ndarray]:
    """Monthly cost and net return; an asset leaving the book is not charged."""
    rebalance = np.array([schedule.rebalance_bp[c] for c in book.classes]) * BP
    rollover = np.array([schedule.rollover_bp[c] for c in book.classes]) * BP
    held = np.abs(np.nan_to_num(book.weights, nan=0.0))
    cost = _per_asset(book, rebalance * _trades(book) + rollover * held)
    return cost, gross_returns(book) - cost


def turnover_series(book: Book) -> np.ndarray:
    """% of per-asset exposure traded each month; the first book month is the build."""
    series = _per_asset(book, _trades(book)) * 100.0
    if len(series):
        series[0] = np.nan
    return series


def turnover(book: Book) -> float:
    series = turnover_series(book)
    valid = series[~np.isnan(series)]
    if len(valid) == 0:
        raise NumericError("turnover needs at least two portfolio months")
    return float(valid.mean())


def realized_vol(series: np.ndarray, periods_per_year: int = settings.PERIODS_PER_YEAR) -> float:
    values = np.asarray(series, dtype=float)
    values = values[~np.isnan(values)]
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1) * np.sqrt(periods_per_year))


def expost_scale(series: np.ndarray, target: float = settings.EXPOST_TARGET) -> Tuple[np.ndarray, float]:
    vol = realized_vol(series)
    if vol == 0.0:
        raise NumericError("cannot scale a series with zero variance")
    factor = target / vol
    return np.asarray(series, dtype=float) * factor, factor


@dataclass
class StrategyReturns:
    name: str
    months: np.ndarray
    labels: List[str]
    gross: np.ndarray
    cost: np.ndarray
    net: np.ndarray
    n_assets: np.ndarray
    turnover: np.ndarray
    scaled: np.ndarray
    scale_factor: float
    target: float = settings.EXPOST_TARGET

    @property
    def held(self) -> np.ndarray:
        return self.n_assets > 0

    def rescaled(self, mask: np.ndarray) -> Tuple[np.ndarray, float]:
        """Net returns on ``mask`` scaled to the ex-post target over those months alone."""
        try:
            return expost_scale(self.net[mask], self.target)
        except NumericError:
            # no volatility to target: keep the full-sample factor
            return self.scaled[mask], self.scale_factor


def run_portfolio(
    book: Book,
    schedule: CostSchedule,
    name: str = "",
    expost_target: float = settings.EXPOST_TARGET,
) -> StrategyReturns:
    cost, net = apply_costs(book, schedule)
    scaled, factor = expost_scale(net, expost_target)
    idle = int(np.sum(book.n_assets == 0))
    if idle:
        logger.info("%s: %d months without positions", name or "portfolio", idle)
    return StrategyReturns(
        name=name,
        months=book.months,
        labels=book.labels,
        gross=gross_returns(book),
        cost=cost,
        net=net,
        n_assets=book.n_assets,
        turnover=turnover_series(book),
        scaled=scaled,
        scale_factor=factor,
        target=expost_target,
    )


def write_returns(returns: StrategyReturns, path: str) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(
        {
            "month": returns.labels,
            "gross": returns.gross,
            "net": returns.net,
            "cost": returns.cost,
            "n_assets": returns.n_assets,
        }
    ).to_csv(out, index=False, float_format="%.17g")
    return out


def write_positions(book: Book, path: str) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    t, i = np.nonzero(book.active)
    pd.DataFrame(
        {
            "month": [format_month(int(book.months[k])) for k in t],
            "asset": [book.assets[k] for k in i],
            "sign": np.sign(book.weights[t, i]).astype(int),
            "weight": np.abs(book.weights[t, i]),
        }
    ).to_csv(out, index=False, float_format="%.17g")
    return out
