"""
Per asset-month features: momentum regressors, binary labels and ex-ante
EWMA volatility. Everything at month t uses returns strictly before t, except
the label s_t which is the prediction target.
"""

import logging
from pathlib import Path
from typing import List, Sequence

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from app.core.config import settings
from app.core.errors import DataError
from app.models.schemas import AssetSeries, add_months

logger = logging.getLogger(__name__)


class FeatureUnavailable(DataError):
    """Not enough history for the requested feature."""


def momentum(returns: Sequence[float], t: int, L: int) -> float:
    """Mom^L at t: sum of the L returns before t."""
    if L <= 0 or t - L < 0 or t > len(returns):
        raise FeatureUnavailable(f"momentum L={L} unavailable at t={t}")
    return float(np.sum(np.asarray(returns[t - L:t], dtype=float)))


def label(r: float) -> int:
    return 1 if r >= 0 else 0


def _ewma_variances(h: np.ndarray, delta: float, mean_mode: str) -> np.ndarray:
    """v_k for k = 1..n-1, seeded by the first squared deviation (k = 1)."""
    n = len(h)
    if mean_mode == "running":
        means = np.cumsum(h) / np.arange(1, n + 1)
    else:
        means = np.full(n, h.mean())
    dev2 = (h - means) ** 2
    v = np.empty(n - 1)
    v[0] = dev2[1]
    for k in range(2, n):
        v[k - 1] = delta * v[k - 2] + (1.0 - delta) * dev2[k]
    return v


def _annualize(v: float, periods_per_year: int, floor: float) -> float:
    return max(float(np.sqrt(periods_per_year * v)), floor)


def ewma_vol(
    history: Sequence[float],
    delta: float = settings.EWMA_DELTA,
    periods_per_year: int = settings.PERIODS_PER_YEAR,
    mean_mode: str = settings.EWMA_MEAN,
    floor: float = settings.SIGMA_FLOOR,
) -> float:
    """Annualized ex-ante volatility from the returns through t-1."""
    h = np.asarray(history, dtype=float)
    if len(h) < 2:
        raise FeatureUnavailable("ewma_vol needs at least 2 observations")
    v = _ewma_variances(h, delta, mean_mode)[-1]
    return _annualize(v, periods_per_year, floor)


def ewma_vol_path(
    returns: Sequence[float],
    delta: float = settings.EWMA_DELTA,
    periods_per_year: int = settings.PERIODS_PER_YEAR,
    mean_mode: str = settings.EWMA_MEAN,
    floor: float = settings.SIGMA_FLOOR,
) -> np.ndarray:
    """sigma[t] = ewma_vol(returns[:t]); NaN where fewer than 2 observations."""
    r = np.asarray(returns, dtype=float)
    n = len(r)
    sigma = np.full(n, np.nan)
    if n < 3:
        return sigma
    if mean_mode == "running":
        # running means make the recursion prefix-consistent: one pass suffices
        v = _ewma_variances(r, delta, mean_mode)
        for t in range(2, n):
            sigma[t] = _annualize(v[t - 2], periods_per_year, floor)
    else:
        for t in range(2, n):
            sigma[t] = ewma_vol(r[:t], delta, periods_per_year, mean_mode, floor)
    return sigma


def momentum_columns(lookbacks: Sequence[int]) -> List[str]:
    return [f"mom_{L}" for L in lookbacks]


def build_features(
    asset: AssetSeries,
    lookbacks: Sequence[int],
    offset: int = 0,
    delta: float = settings.EWMA_DELTA,
    mean_mode: str = settings.EWMA_MEAN,
    floor: float = settings.SIGMA_FLOOR,
    periods_per_year: int = settings.PERIODS_PER_YEAR,
) -> pd.DataFrame:
    """
    One row per month where every regressor and the volatility exist.

    Columns: t (asset-local index), month (t + offset; pass the absolute start
    month from parse_month to get absolute months), month_label,
    r (realized return), s, sigma_ante, mom_<L> for each lookback.
    """
    r = asset.as_array()
    n = len(r)
    t0 = max(max(lookbacks), 2)
    if n <= t0:
        return pd.DataFrame(
            columns=["t", "month", "month_label", "r", "s", "sigma_ante", *momentum_columns(lookbacks)]
        )
    t = np.arange(t0, n)
    sigma = ewma_vol_path(r, delta, periods_per_year, mean_mode, floor)
    frame = pd.DataFrame(
        {
            "t": t,
            "month": offset + t,
            "month_label": [add_months(asset.start_month, int(k)) for k in t],
            "r": r[t],
            "s": (r[t] >= 0).astype(int),
            "sigma_ante": sigma[t],
        }
    )
    for L, column in zip(lookbacks, momentum_columns(lookbacks)):
        # window i covers r[i:i+L], i.e. Mom^L at t = i + L
        sums = sliding_window_view(r, L).sum(axis=1)
        frame[column] = sums[t - L]
    return frame


def regressors(frame: pd.DataFrame, lookbacks: Sequence[int]) -> np.ndarray:
    """Design matrix: intercept then the momentum columns."""
    X = frame[momentum_columns(lookbacks)].to_numpy(dtype=float)
    return np.column_stack([np.ones(len(frame)), X])


def dump_features(frame: pd.DataFrame, lookbacks: Sequence[int], path: str) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    columns = ["month_label", "s", "sigma_ante", *momentum_columns(lookbacks)]
    frame[columns].rename(columns={"month_label": "month"}).to_csv(
        out, index=False, float_format="%.17g"
    )
    logger.info("Wrote feature dump %s", out)
    return out
