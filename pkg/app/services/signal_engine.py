"""
Forecast probability -> trading sign.

Three policies: a fixed cutoff, a cutoff re-selected every month by trailing
out-of-sample accuracy, and the expected-utility rule of a mean-variance
investor built from the asset's own return history.
"""

import logging
from typing import Optional, Sequence, Tuple

import numpy as np

from app.core.config import settings
from app.models.schemas import CutoffMode, CutoffPolicy, UtilityTable

logger = logging.getLogger(__name__)

COLD_START_CUTOFF = 0.5


def apply_cutoff(shat: float, c: float) -> int:
    return 1 if shat >= c else -1


def cv_select_cutoff(
    shat_history: Sequence[float], s_history: Sequence[int], grid: Sequence[float]
) -> float:
    """Grid cutoff with the best trailing accuracy; ties go nearest 0.5, then lower."""
    shat = np.asarray(shat_history, dtype=float)
    s = np.asarray(s_history, dtype=int)
    if len(shat) == 0:
        return COLD_START_CUTOFF
    actual_up = s == 1
    hits = [int(np.sum((shat >= c) == actual_up)) for c in grid]
    best = max(hits)
    candidates = [c for c, h in zip(grid, hits) if h == best]
    return min(candidates, key=lambda c: (round(abs(c - 0.5), 9), c))


def utility_table(
    history: Sequence[float],
    gamma: float = settings.GAMMA,
    dispersion: str = settings.UTILITY_DISPERSION,
) -> Optional[UtilityTable]:
    """Conditional moments of past returns; None unless both signs have occurred."""
    h = np.asarray(history, dtype=float)
    pos, neg = h[h >= 0], h[h < 0]
    if len(pos) == 0 or len(neg) == 0:
        return None
    if dispersion == "variance":
        disp_pos, disp_neg = float(np.var(pos)), float(np.var(neg))
    else:
        disp_pos, disp_neg = float(np.mean(pos**2)), float(np.mean(neg**2))
    return UtilityTable(
        r_pos=float(np.mean(pos)),
        r_neg=float(np.mean(neg)),
        disp_pos=disp_pos,
        disp_neg=disp_neg,
        gamma=gamma,
    )


def expected_utilities(shat: float, table: UtilityTable) -> Tuple[float, float]:
    long_ = shat * table.U_LP + (1.0 - shat) * table.U_LN
    short = shat * table.U_SP + (1.0 - shat) * table.U_SN
    return long_, short


def bayes_decide(shat: float, table: Optional[UtilityTable]) -> int:
    if table is None:
        return apply_cutoff(shat, COLD_START_CUTOFF)
    # E[U(L)] - E[U(S)]: the dispersion terms are shared by both actions in each state
    gap = shat * table.r_pos + (1.0 - shat) * table.r_neg
    return 1 if gap >= 0 else -1


def implied_cutoff(table: Optional[UtilityTable]) -> float:
    """Probability at which the two actions tie; NaN when one action always dominates."""
    if table is None:
        return COLD_START_CUTOFF
    if table.r_pos > 0 > table.r_neg:
        return -table.r_neg / (table.r_pos - table.r_neg)
    return float("nan")


def decide_signs(
    shat: Sequence[float],
    s: Sequence[int],
    t_local: Sequence[int],
    returns: Sequence[float],
    policy: CutoffPolicy,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Signs for one asset's test months, in order.

    ``shat``/``s`` are the test-window forecasts and labels; ``t_local`` indexes
    each decision month into ``returns`` (the asset's whole history). The
    cutoff used at step j only sees steps before j and returns before t_local[j].
    """
    shat = np.asarray(shat, dtype=float)
    s = np.asarray(s, dtype=int)
    returns = np.asarray(returns, dtype=float)
    n = len(shat)
    signs = np.empty(n, dtype=int)
    cutoffs = np.empty(n)
    for j in range(n):
        if policy.mode == CutoffMode.FIXED:
            c = policy.fixed_c
            signs[j] = apply_cutoff(shat[j], c)
        elif policy.mode == CutoffMode.CV:
            start = max(0, j - policy.cv_window)
            c = cv_select_cutoff(shat[start:j], s[start:j], policy.cv_grid)
            signs[j] = apply_cutoff(shat[j], c)
        else:
            table = utility_table(returns[: t_local[j]], policy.gamma, policy.dispersion)
            c = implied_cutoff(table)
            signs[j] = bayes_decide(shat[j], table)
        cutoffs[j] = c
    return signs, cutoffs
