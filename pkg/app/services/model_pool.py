"""
Dynamic model averaging / selection over every nonempty subset of momentum
lookbacks. One FilterBank holds all 2^K - 1 models of an asset; model
probabilities are forgotten with alpha and updated by Bayes' rule, in log space.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from app.core.config import settings
from app.core.errors import ConfigError
from app.models.schemas import AlphaGrid, FilterPrior, LambdaGrid, LookbackSet, ModelSpec
from app.services.dlr_filter import FilterBank

logger = logging.getLogger(__name__)


def enumerate_models(lookbacks: Sequence[int]) -> List[ModelSpec]:
    """All nonempty subsets, ordered by bitmask (bit j = lookbacks[j])."""
    K = len(lookbacks)
    return [
        ModelSpec(
            model_id=mask,
            lookbacks=tuple(L for j, L in enumerate(lookbacks) if mask >> j & 1),
        )
        for mask in range(1, 2**K)
    ]


def model_masks(models: Sequence[ModelSpec], K: int) -> np.ndarray:
    """(M, K + 1) inclusion mask; column 0 is the intercept, always on."""
    mask = np.zeros((len(models), K + 1), dtype=bool)
    mask[:, 0] = True
    for i, spec in enumerate(models):
        for j in range(K):
            mask[i, j + 1] = bool(spec.model_id >> j & 1)
    return mask


@dataclass(frozen=True)
class PoolState:
    lookbacks: Tuple[int, ...]
    models: Tuple[ModelSpec, ...]
    bank: FilterBank
    pi_post: np.ndarray
    pi_pred: np.ndarray
    last_alpha: float

    @property
    def M(self) -> int:
        return len(self.models)


@dataclass(frozen=True)
class PoolForecastRecord:
    alpha: float  # alpha behind pi_pred (the forecast weights)
    chosen_alpha: float  # alpha selected after observing s
    model_probs: np.ndarray
    pi_pred: np.ndarray
    shat_dma: float
    shat_dms: float
    dms_model_id: int
    lambdas: np.ndarray
    logliks: np.ndarray
    pi_post: np.ndarray
    inclusion: np.ndarray


def init_pool(
    lookbacks: LookbackSet,
    prior: Optional[FilterPrior] = None,
    max_lookbacks: int = settings.MAX_LOOKBACKS,
) -> PoolState:
    if lookbacks.K > max_lookbacks:
        raise ConfigError(f"{lookbacks.K} lookbacks exceed the limit of {max_lookbacks}")
    prior = prior or FilterPrior()
    models = tuple(enumerate_models(lookbacks.lookbacks))
    M = len(models)
    uniform = np.full(M, 1.0 / M)
    return PoolState(
        lookbacks=lookbacks.lookbacks,
        models=models,
        bank=FilterBank.from_masks(model_masks(models, lookbacks.K), prior),
        pi_post=uniform,
        pi_pred=uniform.copy(),
        last_alpha=1.0,
    )


def forecast_model_probs(pi_post: np.ndarray, alpha: float) -> np.ndarray:
    pi_post = np.asarray(pi_post, dtype=float)
    if alpha == 1.0:
        return pi_post / pi_post.sum()
    with np.errstate(divide="ignore"):
        logp = alpha * np.log(pi_post)
    logp -= logp.max()
    w = np.exp(logp)
    return w / w.sum()


def update_model_probs(
    pi_pred: np.ndarray, log_liks: np.ndarray, floor: float = settings.PROB_FLOOR
) -> np.ndarray:
    """Bayes' rule on log predictive likelihoods, then floor and renormalize."""
    with np.errstate(divide="ignore"):
        logp = np.log(np.asarray(pi_pred, dtype=float)) + np.asarray(log_liks, dtype=float)
    logp -= logp.max()
    w = np.exp(logp)
    w /= w.sum()
    w = np.maximum(w, floor)
    return w / w.sum()


def dma_forecast(pi_pred: np.ndarray, probs: np.ndarray) -> float:
    probs = np.asarray(probs, dtype=float)
    value = float(np.dot(pi_pred, probs))
    return float(np.clip(value, probs.min(), probs.max()))


def dms_forecast(
    pi_pred: np.ndarray, probs: np.ndarray, models: Sequence[ModelSpec]
) -> Tuple[float, int]:
    """Forecast of the most probable model; ties go to fewer predictors, then lower id."""
    best = min(
        range(len(models)),
        key=lambda i: (-pi_pred[i], len(models[i].lookbacks), models[i].model_id),
    )
    return float(probs[best]), models[best].model_id


def inclusion_probability(pi_post: np.ndarray, models: Sequence[ModelSpec], L: int) -> float:
    hits = [i for i, spec in enumerate(models) if L in spec.lookbacks]
    if not hits:
        raise ConfigError(f"lookback {L} is not part of the model pool")
    return float(np.clip(np.sum(np.asarray(pi_post)[hits]), 0.0, 1.0))


def inclusion_vector(pi_post: np.ndarray, models: Sequence[ModelSpec], lookbacks: Sequence[int]) -> np.ndarray:
    return np.array([inclusion_probability(pi_post, models, L) for L in lookbacks])


def step_pool(
    pool: PoolState,
    x_full: np.ndarray,
    s: int,
    lambda_grid: LambdaGrid,
    alpha_grid: AlphaGrid,
    laplace_mode: str = settings.LAPLACE_MODE,
    alpha_timing: str = settings.ALPHA_TIMING,
    floor: float = settings.PROB_FLOOR,
) -> Tuple[PoolState, PoolForecastRecord]:
    """
    Forecast with the current weights, then learn from s.

    With ``alpha_timing == "next"`` the forecast weights use the alpha chosen at
    the previous step. ``"current"`` uses the alpha chosen on s itself, which
    looks ahead and is kept only for comparison.
    """
    x_full = np.asarray(x_full, dtype=float)
    model_probs = pool.bank.predict_probs(x_full)
    bank, lambdas, logliks = pool.bank.step(x_full, s, lambda_grid.values, laplace_mode)

    best = None
    for alpha in sorted(alpha_grid.values, reverse=True):
        pred = forecast_model_probs(pool.pi_post, alpha)
        with np.errstate(divide="ignore"):
            score = logsumexp(np.log(pred) + logliks)
        if best is None or score > best[1]:
            best = (alpha, score, pred)
    chosen_alpha, _, chosen_pred = best

    if alpha_timing == "next":
        weights, used_alpha = pool.pi_pred, pool.last_alpha
    else:
        weights, used_alpha = chosen_pred, chosen_alpha

    pi_post = update_model_probs(chosen_pred, logliks, floor)
    shat_dms, dms_id = dms_forecast(weights, model_probs, pool.models)
    record = PoolForecastRecord(
        alpha=used_alpha,
        chosen_alpha=chosen_alpha,
        model_probs=model_probs,
        pi_pred=weights,
        shat_dma=dma_forecast(weights, model_probs),
        shat_dms=shat_dms,
        dms_model_id=dms_id,
        lambdas=lambdas,
        logliks=logliks,
        pi_post=pi_post,
        inclusion=inclusion_vector(pi_post, pool.models, pool.lookbacks),
    )
    new_pool = PoolState(
        lookbacks=pool.lookbacks,
        models=pool.models,
        bank=bank,
        pi_post=pi_post,
        pi_pred=forecast_model_probs(pi_post, chosen_alpha),
        last_alpha=chosen_alpha,
    )
    return new_pool, record


# ============================================
# Whole-stream runs
# ============================================

@dataclass
class PoolRun:
    """Per-step arrays of one asset's pool, index-aligned with its feature rows."""

    lookbacks: Tuple[int, ...]
    model_ids: np.ndarray  # (M,)
    model_lookbacks: Tuple[Tuple[int, ...], ...]
    probs: np.ndarray  # (T, M) forecasts made before s_t
    pi_pred: np.ndarray  # (T, M)
    lambdas: np.ndarray  # (T, M)
    logliks: np.ndarray  # (T, M)
    shat_dma: np.ndarray  # (T,)
    shat_dms: np.ndarray  # (T,)
    dms_model_id: np.ndarray  # (T,)
    alpha: np.ndarray  # (T,)
    inclusion: np.ndarray  # (T, K)
    means: Optional[np.ndarray] = None  # (T, M, K + 1) when traced
    variances: Optional[np.ndarray] = None

    def column(self, lookbacks: Sequence[int]) -> int:
        """Index of the model using exactly these lookbacks."""
        target = tuple(lookbacks)
        for i, lbs in enumerate(self.model_lookbacks):
            if lbs == target:
                return i
        raise ConfigError(f"no model with lookbacks {target}")


def run_pool(
    X: np.ndarray,
    s: Sequence[int],
    lookbacks: Sequence[int],
    prior: Optional[FilterPrior] = None,
    lambda_grid: Optional[LambdaGrid] = None,
    alpha_grid: Optional[AlphaGrid] = None,
    laplace_mode: str = settings.LAPLACE_MODE,
    alpha_timing: str = settings.ALPHA_TIMING,
    floor: float = settings.PROB_FLOOR,
    record_states: bool = False,
) -> PoolRun:
    """Step the pool over a design matrix whose columns are intercept + lookbacks."""
    X = np.asarray(X, dtype=float)
    lambda_grid = lambda_grid or LambdaGrid()
    alpha_grid = alpha_grid or AlphaGrid()
    pool = init_pool(LookbackSet(lookbacks=tuple(lookbacks)), prior)
    T, M, K = len(X), pool.M, len(lookbacks)

    probs, pi_pred = np.empty((T, M)), np.empty((T, M))
    lambdas, logliks = np.empty((T, M)), np.empty((T, M))
    shat_dma, shat_dms = np.empty(T), np.empty(T)
    dms_ids, alphas = np.empty(T, dtype=int), np.empty(T)
    inclusion = np.empty((T, K))
    means = np.empty((T, M, K + 1)) if record_states else None
    variances = np.empty((T, M, K + 1)) if record_states else None

    for t in range(T):
        pool, rec = step_pool(
            pool, X[t], int(s[t]), lambda_grid, alpha_grid, laplace_mode, alpha_timing, floor
        )
        probs[t], pi_pred[t] = rec.model_probs, rec.pi_pred
        lambdas[t], logliks[t] = rec.lambdas, rec.logliks
        shat_dma[t], shat_dms[t] = rec.shat_dma, rec.shat_dms
        dms_ids[t], alphas[t] = rec.dms_model_id, rec.alpha
        inclusion[t] = rec.inclusion
        if record_states:
            means[t] = pool.bank.m
            variances[t] = np.diagonal(pool.bank.C, axis1=1, axis2=2)

    return PoolRun(
        lookbacks=tuple(lookbacks),
        model_ids=np.array([spec.model_id for spec in pool.models]),
        model_lookbacks=tuple(spec.lookbacks for spec in pool.models),
        probs=probs,
        pi_pred=pi_pred,
        lambdas=lambdas,
        logliks=logliks,
        shat_dma=shat_dma,
        shat_dms=shat_dms,
        dms_model_id=dms_ids,
        alpha=alphas,
        inclusion=inclusion,
        means=means,
        variances=variances,
    )


def average_inclusion(runs: Dict[str, PoolRun], groups: Dict[str, str], rows: Dict[str, np.ndarray]) -> Dict[str, Dict[str, float]]:
    """
    Time-averaged inclusion probabilities per group (e.g. asset class).

    ``rows[asset]`` selects the steps to average (the test window); each asset
    counts once within its group, and the group "All" pools every asset.
    """
    per_asset = {}
    for asset_id, run in runs.items():
        selected = run.inclusion[rows[asset_id]]
        if len(selected):
            per_asset[asset_id] = (run.lookbacks, selected.mean(axis=0))
    out: Dict[str, Dict[str, float]] = {}
    for name in sorted(set(groups.values())) + ["All"]:
        members = [
            per_asset[a] for a in sorted(per_asset) if name == "All" or groups.get(a) == name
        ]
        if not members:
            continue
        lookbacks = members[0][0]
        avg = np.mean([values for _, values in members], axis=0)
        out[name] = {str(L): float(v) for L, v in zip(lookbacks, avg)}
    return out


# ============================================
# Trace files
# ============================================

def write_pool_trace(run: PoolRun, months: Sequence[str], path: str) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        {"t": list(months), "alpha": run.alpha, "dms_model_id": run.dms_model_id.astype(int)}
    )
    for j, L in enumerate(run.lookbacks):
        frame[f"IP_{L}"] = run.inclusion[:, j]
    frame["shat_dma"] = run.shat_dma
    frame["shat_dms"] = run.shat_dms
    frame.to_csv(out, index=False, float_format="%.17g")
    logger.debug("Wrote pool trace %s", out)
    return out


def write_filter_trace(run: PoolRun, column: int, months: Sequence[str], path: str) -> Path:
    """Per-step lambda, predictive log-likelihood, posterior means and variances of one model."""
    if run.means is None:
        raise ConfigError("filter trace requires a run with recorded states")
    coords = [0] + [j + 1 for j, L in enumerate(run.lookbacks) if L in run.model_lookbacks[column]]
    names = ["const"] + [f"mom_{L}" for L in run.model_lookbacks[column]]
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        {
            "t": list(months),
            "lambda": run.lambdas[:, column],
            "loglik": run.logliks[:, column],
            "shat": run.probs[:, column],
        }
    )
    for name, j in zip(names, coords):
        frame[f"m_{name}"] = run.means[:, column, j]
    for name, j in zip(names, coords):
        frame[f"var_{name}"] = run.variances[:, column, j]
    frame.to_csv(out, index=False, float_format="%.17g")
    logger.debug("Wrote filter trace %s", out)
    return out
