"""
Dynamic logistic regression in state-space form.

    theta_t = theta_{t-1} + w_t,       R_t = C_{t-1} / lambda
    P(s_t = 1) = logistic(x_t' theta_t)

The posterior is kept Gaussian: one Newton step from the prior mean gives the
new mean, the negative inverse Hessian at that mean gives the new covariance,
and a Laplace approximation gives the one-step predictive likelihood used to
pick lambda from a grid.

Two implementations live here. The functions operating on ``FilterState`` are
the reference (explicit Hessians, d x d inverses). ``FilterBank`` steps many
models at once; because the observation is scalar it uses the rank-one forms
of the same formulas, so no matrix is ever inverted there.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Sequence, Tuple

import numpy as np
from scipy.special import expit, log_expit
from scipy.stats import multivariate_normal

from app.core.config import settings
from app.core.errors import ConfigError, NumericError
from app.models.schemas import FilterPrior, LambdaGrid

logger = logging.getLogger(__name__)

LOGIT_CLAMP = 30.0
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class FilterState:
    m: np.ndarray
    C: np.ndarray
    last_lambda: float = 1.0

    @classmethod
    def from_prior(cls, d: int, prior: FilterPrior) -> "FilterState":
        return cls(m=np.zeros(d), C=prior.c0_scale * np.eye(d))

    @property
    def d(self) -> int:
        return len(self.m)


def _check_lambda(lam: float) -> None:
    if not 0.0 < lam <= 1.0:
        raise ConfigError(f"discount factor must lie in (0, 1], got {lam}")


def _log_bernoulli(s: int, z):
    return log_expit(z) if s == 1 else log_expit(-z)


def _inverse(A: np.ndarray, jitter: float) -> np.ndarray:
    try:
        inv = np.linalg.inv(A)
        if np.all(np.isfinite(inv)):
            return inv
    except np.linalg.LinAlgError:
        pass
    logger.warning("Singular matrix in filter update, retrying with jitter %g", jitter)
    try:
        inv = np.linalg.inv(A + jitter * np.eye(len(A)))
    except np.linalg.LinAlgError as e:
        raise NumericError("Hessian is not invertible even after jitter") from e
    if not np.all(np.isfinite(inv)):
        raise NumericError("Hessian is not invertible even after jitter")
    return inv


def predict_state(state: FilterState, lam: float) -> Tuple[np.ndarray, np.ndarray]:
    _check_lambda(lam)
    return state.m.copy(), state.C / lam


def predict_prob(a: np.ndarray, x: np.ndarray) -> float:
    z = float(np.dot(x, a))
    return float(expit(np.clip(z, -LOGIT_CLAMP, LOGIT_CLAMP)))


def _neg_hessian(theta: np.ndarray, R_inv: np.ndarray, x: np.ndarray) -> np.ndarray:
    p = predict_prob(theta, x)
    return p * (1.0 - p) * np.outer(x, x) + R_inv


def _newton_mode(
    a: np.ndarray, R_inv: np.ndarray, x: np.ndarray, s: int, jitter: float
) -> np.ndarray:
    p = predict_prob(a, x)
    gradient = x * (s - p)
    return a + _inverse(_neg_hessian(a, R_inv, x), jitter) @ gradient


def _step(
    state: FilterState,
    x: np.ndarray,
    s: int,
    lam: float,
    laplace_mode: str,
    jitter: float,
) -> Tuple[FilterState, float]:
    a, R = predict_state(state, lam)
    R_inv = _inverse(R, jitter)
    m = _newton_mode(a, R_inv, x, s, jitter)
    C = _inverse(_neg_hessian(m, R_inv, x), jitter)
    C = 0.5 * (C + C.T)
    theta = m if laplace_mode == "posterior" else a
    loglik = _laplace_log(a, R, R_inv, x, s, theta)
    return FilterState(m=m, C=C, last_lambda=lam), loglik


def _laplace_log(
    a: np.ndarray,
    R: np.ndarray,
    R_inv: np.ndarray,
    x: np.ndarray,
    s: int,
    theta: np.ndarray,
) -> float:
    sign, logdet = np.linalg.slogdet(_neg_hessian(theta, R_inv, x))
    if sign <= 0:
        raise NumericError("negative Hessian is not positive definite")
    d = len(a)
    return float(
        0.5 * d * LOG_2PI
        - 0.5 * logdet
        + _log_bernoulli(s, float(x @ theta))
        + multivariate_normal.logpdf(theta, mean=a, cov=R)
    )


def update(
    state: FilterState,
    x: Sequence[float],
    s: int,
    lam: float,
    jitter: float = settings.HESSIAN_JITTER,
) -> FilterState:
    """Single Newton step from the predicted mean; covariance at the new mean."""
    new_state, _ = _step(state, np.asarray(x, dtype=float), s, lam, "posterior", jitter)
    return new_state


def laplace_predictive(
    a: np.ndarray,
    R: np.ndarray,
    x: Sequence[float],
    s: int,
    mode: str = settings.LAPLACE_MODE,
    jitter: float = settings.HESSIAN_JITTER,
) -> float:
    """Log of the Laplace-approximated p(s | D_{t-1}); mode picks the expansion point."""
    x = np.asarray(x, dtype=float)
    R_inv = _inverse(R, jitter)
    theta = _newton_mode(a, R_inv, x, s, jitter) if mode == "posterior" else a
    return _laplace_log(a, R, R_inv, x, s, theta)


def step_with_lambda_selection(
    state: FilterState,
    x: Sequence[float],
    s: int,
    grid: LambdaGrid,
    laplace_mode: str = settings.LAPLACE_MODE,
    jitter: float = settings.HESSIAN_JITTER,
) -> Tuple[FilterState, float, Dict[float, float]]:
    """Run every lambda from the same incoming state, keep the best branch (ties: largest)."""
    x = np.asarray(x, dtype=float)
    logliks: Dict[float, float] = {}
    best = None
    for lam in sorted(grid.values, reverse=True):
        candidate, loglik = _step(state, x, s, lam, laplace_mode, jitter)
        logliks[lam] = loglik
        if best is None or loglik > best[1]:
            best = (candidate, loglik, lam)
    return best[0], best[2], logliks


@dataclass
class FilterTrace:
    lambdas: np.ndarray
    logliks: np.ndarray
    probs: np.ndarray
    means: np.ndarray
    variances: np.ndarray


def run_filter(
    X: np.ndarray,
    s: Iterable[int],
    grid: LambdaGrid,
    prior: FilterPrior = None,
    laplace_mode: str = settings.LAPLACE_MODE,
) -> FilterTrace:
    """Forecast-then-update over a whole stream with the reference implementation."""
    prior = prior or FilterPrior()
    X = np.asarray(X, dtype=float)
    state = FilterState.from_prior(X.shape[1], prior)
    lambdas, logliks, probs, means, variances = [], [], [], [], []
    for x, s_t in zip(X, s):
        probs.append(predict_prob(state.m, x))
        state, lam, ll = step_with_lambda_selection(state, x, int(s_t), grid, laplace_mode)
        lambdas.append(lam)
        logliks.append(ll[lam])
        means.append(state.m)
        variances.append(np.diag(state.C).copy())
    return FilterTrace(
        lambdas=np.array(lambdas),
        logliks=np.array(logliks),
        probs=np.array(probs),
        means=np.array(means),
        variances=np.array(variances),
    )


# ============================================
# Vectorized bank of filters
# ============================================

@dataclass(frozen=True)
class FilterBank:
    """
    M filters embedded in the full regressor space. ``mask[i]`` marks the
    coordinates model i uses; excluded coordinates keep mean 0 and the prior
    variance, with zero cross-covariance, so they never influence the model.
    """

    m: np.ndarray  # (M, d)
    C: np.ndarray  # (M, d, d)
    mask: np.ndarray  # (M, d) bool
    c0_scale: float
    last_lambda: np.ndarray = field(default=None)

    @classmethod
    def from_masks(cls, mask: np.ndarray, prior: FilterPrior) -> "FilterBank":
        mask = np.asarray(mask, dtype=bool)
        M, d = mask.shape
        C = np.broadcast_to(prior.c0_scale * np.eye(d), (M, d, d)).copy()
        return cls(
            m=np.zeros((M, d)),
            C=C,
            mask=mask,
            c0_scale=prior.c0_scale,
            last_lambda=np.ones(M),
        )

    def state(self, i: int) -> FilterState:
        idx = np.flatnonzero(self.mask[i])
        return FilterState(
            m=self.m[i, idx].copy(),
            C=self.C[i][np.ix_(idx, idx)].copy(),
            last_lambda=float(self.last_lambda[i]),
        )

    def logits(self, x_full: np.ndarray) -> np.ndarray:
        return np.einsum("md,md->m", self.m, self.mask * x_full)

    def predict_probs(self, x_full: np.ndarray) -> np.ndarray:
        return expit(np.clip(self.logits(x_full), -LOGIT_CLAMP, LOGIT_CLAMP))

    def step(
        self,
        x_full: np.ndarray,
        s: int,
        lambdas: Sequence[float],
        laplace_mode: str = settings.LAPLACE_MODE,
    ) -> Tuple["FilterBank", np.ndarray, np.ndarray]:
        """
        One predict/update for every model and every lambda.

        Returns the new bank, the chosen lambda per model and the log
        predictive likelihood of the chosen branch per model.
        """
        for lam in lambdas:
            _check_lambda(lam)
        lams = np.array(sorted(lambdas, reverse=True))
        X = self.mask * np.asarray(x_full, dtype=float)  # (M, d)

        z_a = np.einsum("md,md->m", self.m, X)
        p = expit(np.clip(z_a, -LOGIT_CLAMP, LOGIT_CLAMP))
        w = p * (1.0 - p)

        R = self.C[None] / lams[:, None, None, None]  # (G, M, d, d)
        Rx = np.einsum("gmij,mj->gmi", R, X)
        v = np.einsum("gmi,mi->gm", Rx, X)  # x'Rx

        # Newton step from a: (R^-1 + w xx')^-1 x (s - p) = Rx (s - p) / (1 + w x'Rx)
        g = (s - p)[None] / (1.0 + w[None] * v)
        m_new = self.m[None] + Rx * g[..., None]
        z_m = z_a[None] + v * g
        p_m = expit(np.clip(z_m, -LOGIT_CLAMP, LOGIT_CLAMP))
        w_m = p_m * (1.0 - p_m)
        k = w_m / (1.0 + w_m * v)
        C_new = R - k[..., None, None] * Rx[..., :, None] * Rx[..., None, :]
        C_new = 0.5 * (C_new + np.swapaxes(C_new, -1, -2))

        if laplace_mode == "posterior":
            # |C|/|R| = 1/(1 + w_m x'Rx); (m - a)'R^-1(m - a) = g^2 x'Rx
            loglik = -0.5 * np.log1p(w_m * v) + _log_bernoulli(s, z_m) - 0.5 * g * g * v
        else:
            loglik = -0.5 * np.log1p(w[None] * v) + _log_bernoulli(s, z_a)[None]

        pick = np.argmax(loglik, axis=0)  # first maximum = largest lambda
        cols = np.arange(len(self.m))
        outer = self.mask[:, :, None] & self.mask[:, None, :]
        d = self.m.shape[1]
        C_sel = np.where(outer, C_new[pick, cols], self.c0_scale * np.eye(d))
        bank = FilterBank(
            m=np.where(self.mask, m_new[pick, cols], 0.0),
            C=C_sel,
            mask=self.mask,
            c0_scale=self.c0_scale,
            last_lambda=lams[pick],
        )
        return bank, lams[pick], loglik[pick, cols]
