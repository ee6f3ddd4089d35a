"""
Pydantic schemas/models for the trend classifier.
These are the value types that cross service boundaries: panels, feature rows,
grids, policies, run configuration and reports.
"""

import math
import re
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.core.config import settings

_MONTH_RE = re.compile(r"^(\d{4})-(\d{2})$")


def parse_month(label: str) -> int:
    """'YYYY-MM' -> absolute month count (year * 12 + month - 1)."""
    match = _MONTH_RE.match(str(label).strip())
    if not match:
        raise ValueError(f"month must be YYYY-MM, got {label!r}")
    year, month = int(match.group(1)), int(match.group(2))
    if not 1 <= month <= 12:
        raise ValueError(f"month out of range in {label!r}")
    return year * 12 + month - 1


def format_month(absolute: int) -> str:
    year, month = divmod(int(absolute), 12)
    return f"{year:04d}-{month + 1:02d}"


def add_months(label: str, months: int) -> str:
    return format_month(parse_month(label) + months)


# ============================================
# Panel data
# ============================================

class AssetClass(str, Enum):
    EQUITY = "Equity"
    BOND = "Bond"
    CURRENCY = "Currency"
    COMMODITY = "Commodity"


class AssetSeries(BaseModel):
    """Contiguous monthly log-returns of one futures contract."""
    model_config = ConfigDict(frozen=True)

    asset_id: str
    asset_class: AssetClass
    start_month: str
    returns: List[float]

    @field_validator("start_month")
    @classmethod
    def _check_month(cls, value: str) -> str:
        parse_month(value)
        return value

    @field_validator("returns")
    @classmethod
    def _check_finite(cls, value: List[float]) -> List[float]:
        for i, r in enumerate(value):
            if not math.isfinite(r):
                raise ValueError(f"non-finite return at position {i}")
        return value

    @property
    def end_month(self) -> str:
        return add_months(self.start_month, len(self.returns) - 1)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.returns, dtype=float)


class PanelDataset(BaseModel):
    """Assets sorted by id plus the global calendar (month labels, index = position)."""
    model_config = ConfigDict(frozen=True)

    assets: List[AssetSeries]
    calendar: List[str]

    @model_validator(mode="after")
    def _check_panel(self) -> "PanelDataset":
        ids = [a.asset_id for a in self.assets]
        if len(set(ids)) != len(ids):
            raise ValueError("asset_ids must be unique")
        if not self.calendar:
            raise ValueError("calendar is empty")
        first, last = parse_month(self.calendar[0]), parse_month(self.calendar[-1])
        if [format_month(m) for m in range(first, last + 1)] != self.calendar:
            raise ValueError("calendar must be contiguous")
        for asset in self.assets:
            if parse_month(asset.start_month) < first or parse_month(asset.end_month) > last:
                raise ValueError(f"asset {asset.asset_id} lies outside the calendar")
        return self


class SplitPolicy(BaseModel):
    train_months: int = Field(default_factory=lambda: settings.TRAIN_MONTHS, gt=0)


# ============================================
# Features
# ============================================

class LookbackSet(BaseModel):
    model_config = ConfigDict(frozen=True)

    lookbacks: Tuple[int, ...] = Field(default_factory=lambda: settings.LOOKBACKS)

    @field_validator("lookbacks")
    @classmethod
    def _check_increasing(cls, value: Tuple[int, ...]) -> Tuple[int, ...]:
        if not value:
            raise ValueError("at least one lookback is required")
        if any(L <= 0 for L in value):
            raise ValueError("lookbacks must be positive")
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("lookbacks must be strictly increasing")
        return value

    @property
    def K(self) -> int:
        return len(self.lookbacks)


# ============================================
# Filter and pool grids
# ============================================

def _check_unit_grid(value: Tuple[float, ...]) -> Tuple[float, ...]:
    if not value:
        raise ValueError("grid must be nonempty")
    if any(not 0.0 < v <= 1.0 for v in value):
        raise ValueError("grid values must lie in (0, 1]")
    return value


class FilterPrior(BaseModel):
    c0_scale: float = Field(default_factory=lambda: settings.PRIOR_SCALE, gt=0)


class LambdaGrid(BaseModel):
    values: Tuple[float, ...] = Field(default_factory=lambda: settings.TVP_LAMBDAS)

    @field_validator("values")
    @classmethod
    def _check_values(cls, value: Tuple[float, ...]) -> Tuple[float, ...]:
        return _check_unit_grid(value)

    @classmethod
    def for_mode(cls, mode: str) -> "LambdaGrid":
        return cls(values=settings.TVP_LAMBDAS if mode == "tvp" else settings.CP_LAMBDAS)


class AlphaGrid(BaseModel):
    values: Tuple[float, ...] = Field(default_factory=lambda: settings.ALPHAS)

    @field_validator("values")
    @classmethod
    def _check_values(cls, value: Tuple[float, ...]) -> Tuple[float, ...]:
        return _check_unit_grid(value)


class ModelSpec(BaseModel):
    """One momentum subset; model_id is its bitmask over the lookback positions."""
    model_config = ConfigDict(frozen=True, protected_namespaces=())

    model_id: int = Field(gt=0)
    lookbacks: Tuple[int, ...]


# ============================================
# Signals
# ============================================

class CutoffMode(str, Enum):
    FIXED = "Fixed"
    CV = "CV"
    BAYES = "Bayes"


CV1_GRID = tuple(round(0.49 + 0.001 * i, 3) for i in range(21))
CV2_GRID = tuple(round(0.45 + 0.01 * i, 2) for i in range(11))


class CutoffPolicy(BaseModel):
    mode: CutoffMode = CutoffMode.FIXED
    fixed_c: float = Field(default_factory=lambda: settings.CUTOFF, gt=0, lt=1)
    cv_grid: Tuple[float, ...] = CV1_GRID
    cv_window: int = Field(default_factory=lambda: settings.CV_WINDOW, gt=0)
    gamma: float = Field(default_factory=lambda: settings.GAMMA, ge=0)
    dispersion: str = Field(default_factory=lambda: settings.UTILITY_DISPERSION)

    @field_validator("cv_grid")
    @classmethod
    def _check_grid(cls, value: Tuple[float, ...]) -> Tuple[float, ...]:
        if not value or any(not 0.0 < c < 1.0 for c in value):
            raise ValueError("cv_grid must be nonempty and inside (0, 1)")
        return value

    @classmethod
    def parse(cls, flag: str, **kwargs) -> "CutoffPolicy":
        """'fixed:0.5' | 'cv1' | 'cv2' | 'bayes'"""
        flag = flag.strip().lower()
        if flag.startswith("fixed"):
            _, _, value = flag.partition(":")
            return cls(mode=CutoffMode.FIXED, fixed_c=float(value or 0.5), **kwargs)
        if flag == "cv1":
            return cls(mode=CutoffMode.CV, cv_grid=CV1_GRID, **kwargs)
        if flag == "cv2":
            return cls(mode=CutoffMode.CV, cv_grid=CV2_GRID, **kwargs)
        if flag == "bayes":
            return cls(mode=CutoffMode.BAYES, **kwargs)
        raise ValueError(f"unknown cutoff policy {flag!r}")


class UtilityTable(BaseModel):
    """Conditional return moments (strictly before the decision month) and utilities."""
    r_pos: float
    r_neg: float
    disp_pos: float
    disp_neg: float
    gamma: float = Field(default_factory=lambda: settings.GAMMA)

    @property
    def risk_weight(self) -> float:
        return self.gamma / (2.0 * (1.0 + self.gamma))

    @property
    def U_LP(self) -> float:
        return self.r_pos - self.risk_weight * self.disp_pos

    @property
    def U_LN(self) -> float:
        return self.r_neg - self.risk_weight * self.disp_neg

    @property
    def U_SP(self) -> float:
        return -self.r_pos - self.risk_weight * self.disp_pos

    @property
    def U_SN(self) -> float:
        return -self.r_neg - self.risk_weight * self.disp_neg


# ============================================
# Portfolio
# ============================================

class PositionRow(BaseModel):
    asset_id: str
    t: int
    sign: int
    weight: float = Field(gt=0)
    sigma_tg: float = Field(default_factory=lambda: settings.SIGMA_TARGET, gt=0)

    @field_validator("sign")
    @classmethod
    def _check_sign(cls, value: int) -> int:
        if value not in (1, -1):
            raise ValueError("sign must be +1 or -1")
        return value

    @field_validator("weight")
    @classmethod
    def _check_weight(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("weight must be finite")
        return value


class CostSchedule(BaseModel):
    """Basis-point costs per asset class; placeholders, not published values."""
    rebalance_bp: Dict[AssetClass, float] = Field(
        default_factory=lambda: {
            AssetClass.EQUITY: 2.0,
            AssetClass.BOND: 1.0,
            AssetClass.CURRENCY: 1.0,
            AssetClass.COMMODITY: 3.0,
        }
    )
    rollover_bp: Dict[AssetClass, float] = Field(
        default_factory=lambda: {c: 1.0 for c in AssetClass}
    )

    @field_validator("rebalance_bp", "rollover_bp")
    @classmethod
    def _check_nonnegative(cls, value: Dict[AssetClass, float]) -> Dict[AssetClass, float]:
        if any(v < 0 for v in value.values()):
            raise ValueError("costs must be nonnegative")
        return value

    @classmethod
    def zero(cls) -> "CostSchedule":
        return cls(
            rebalance_bp={c: 0.0 for c in AssetClass},
            rollover_bp={c: 0.0 for c in AssetClass},
        )

    @classmethod
    def from_key_values(cls, values: Dict[str, str]) -> "CostSchedule":
        """Keys like EQUITY_REBALANCE_BP / COMMODITY_ROLLOVER_BP override defaults."""
        schedule = cls()
        rebalance, rollover = dict(schedule.rebalance_bp), dict(schedule.rollover_bp)
        for key, raw in values.items():
            name, _, kind = key.upper().partition("_")
            matches = [c for c in AssetClass if c.value.upper() == name]
            if not matches or kind not in ("REBALANCE_BP", "ROLLOVER_BP"):
                raise ValueError(f"unknown cost key {key!r}")
            target = rebalance if kind == "REBALANCE_BP" else rollover
            target[matches[0]] = float(raw)
        return cls(rebalance_bp=rebalance, rollover_bp=rollover)


# ============================================
# Reports
# ============================================

class PerfReport(BaseModel):
    """Economic and forecast metrics of one strategy over one window (percent units)."""
    strategy: str = ""
    window: Tuple[str, str]
    months: int
    mean: float
    vol: Optional[float] = None
    max_dd: Optional[float] = None
    accumulated: Optional[float] = None
    sharpe: Optional[float] = None
    phi: Optional[float] = None
    turnover: Optional[float] = None
    accuracy: Optional[float] = None
    mae: Optional[float] = None
    relative_mae: Optional[float] = None
    scale_factor: Optional[float] = None


class DataFinding(BaseModel):
    kind: str  # "gap" | "non_finite" | "duplicate" | "schema"
    message: str
    file: Optional[str] = None
    row: Optional[int] = None
    asset_id: Optional[str] = None
    month: Optional[str] = None


class AssetSummary(BaseModel):
    asset_id: str
    asset_class: str
    start: str
    end: str
    months: int
    mean: float
    vol: float
    sharpe: Optional[float] = None


class DataDiagnostics(BaseModel):
    path: str
    findings: List[DataFinding] = []
    summary: List[AssetSummary] = []

    @property
    def clean(self) -> bool:
        return not self.findings


# ============================================
# Synthetic data
# ============================================

class SyntheticSpec(BaseModel):
    generator: str = "iid-gaussian"  # iid-gaussian | ar1 | regime-switching-logit
    n_assets: int = Field(1, gt=0)
    n_months: int = Field(120, gt=1)
    start_month: str = "1980-01"
    mean: float = 0.0  # annualized
    vol: float = Field(0.20, gt=0)  # annualized
    persistence: float = Field(0.0, gt=-1, lt=1)
    planted_lookbacks: Tuple[int, ...] = (1,)
    intercept: float = 0.0
    coefficients: Tuple[float, ...] = (8.0,)
    flip_month: Optional[int] = None

    @field_validator("generator")
    @classmethod
    def _check_generator(cls, value: str) -> str:
        if value not in ("iid-gaussian", "ar1", "regime-switching-logit"):
            raise ValueError(f"unknown generator {value!r}")
        return value

    @field_validator("start_month")
    @classmethod
    def _check_start(cls, value: str) -> str:
        parse_month(value)
        return value

    @model_validator(mode="after")
    def _check_logit(self) -> "SyntheticSpec":
        if self.generator == "regime-switching-logit":
            if len(self.coefficients) != len(self.planted_lookbacks):
                raise ValueError("one coefficient per planted lookback is required")
            if not self.planted_lookbacks or min(self.planted_lookbacks) <= 0:
                raise ValueError("planted lookbacks must be positive")
            if max(self.planted_lookbacks) >= self.n_months:
                raise ValueError("planted lookbacks exceed the sample")
            if self.flip_month is not None and not 0 < self.flip_month < self.n_months:
                raise ValueError("flip_month must fall inside the sample")
        return self


class GroundTruth(BaseModel):
    generator: str
    seed: int
    spec: SyntheticSpec
    planted_lookbacks: Tuple[int, ...] = ()
    theta_before: List[float] = []
    theta_after: List[float] = []
    flip_month: Optional[int] = None


# ============================================
# Run configuration
# ============================================

WINDOWS: Dict[str, Optional[Tuple[str, str]]] = {
    "full": None,
    "crash": ("2009-03", "2010-06"),
    "post_crash": ("2010-07", "2020-09"),
}


class RunConfig(BaseModel):
    data_path: str = ""
    lookbacks: Tuple[int, ...] = Field(default_factory=lambda: settings.LOOKBACKS)
    lambda_mode: str = "cp"
    combine: str = "dma"
    cutoff: str = "fixed:0.5"
    cost_path: Optional[str] = None
    window: str = "full"
    seed: int = 0
    output_dir: str = Field(default_factory=lambda: settings.OUTPUT_DIR)
    output_format: str = "json"
    train_months: int = Field(default_factory=lambda: settings.TRAIN_MONTHS)
    jobs: int = Field(default_factory=lambda: settings.JOBS, ge=1)
    trace: bool = False

    sigma_target: float = Field(default_factory=lambda: settings.SIGMA_TARGET, gt=0)
    expost_target: float = Field(default_factory=lambda: settings.EXPOST_TARGET, gt=0)
    gamma: float = Field(default_factory=lambda: settings.GAMMA, ge=0)
    prior_scale: float = Field(default_factory=lambda: settings.PRIOR_SCALE, gt=0)
    ewma_delta: float = Field(default_factory=lambda: settings.EWMA_DELTA, gt=0, lt=1)
    sigma_floor: float = Field(default_factory=lambda: settings.SIGMA_FLOOR, gt=0)
    ewma_mean: str = Field(default_factory=lambda: settings.EWMA_MEAN)
    laplace_mode: str = Field(default_factory=lambda: settings.LAPLACE_MODE)
    alpha_timing: str = Field(default_factory=lambda: settings.ALPHA_TIMING)
    utility_dispersion: str = Field(default_factory=lambda: settings.UTILITY_DISPERSION)
    cv_window: int = Field(default_factory=lambda: settings.CV_WINDOW, gt=0)
    prob_floor: float = Field(default_factory=lambda: settings.PROB_FLOOR, ge=0)

    @field_validator("lookbacks", mode="before")
    @classmethod
    def _split_lookbacks(cls, value):
        if isinstance(value, str):
            return tuple(int(v) for v in value.split(",") if v.strip())
        return value

    @field_validator("lambda_mode")
    @classmethod
    def _check_lambda_mode(cls, value: str) -> str:
        if value not in ("cp", "tvp"):
            raise ValueError("lambda_mode must be cp or tvp")
        return value

    @field_validator("output_format")
    @classmethod
    def _check_format(cls, value: str) -> str:
        if value not in ("json", "csv"):
            raise ValueError("output_format must be json or csv")
        return value

    @field_validator("ewma_mean")
    @classmethod
    def _check_ewma_mean(cls, value: str) -> str:
        if value not in ("running", "full"):
            raise ValueError("ewma_mean must be running or full")
        return value

    @field_validator("laplace_mode")
    @classmethod
    def _check_laplace_mode(cls, value: str) -> str:
        if value not in ("posterior", "prior"):
            raise ValueError("laplace_mode must be posterior or prior")
        return value

    @field_validator("alpha_timing")
    @classmethod
    def _check_alpha_timing(cls, value: str) -> str:
        if value not in ("next", "current"):
            raise ValueError("alpha_timing must be next or current")
        return value

    @field_validator("utility_dispersion")
    @classmethod
    def _check_dispersion(cls, value: str) -> str:
        if value not in ("mean_square", "variance"):
            raise ValueError("utility_dispersion must be mean_square or variance")
        return value

    @model_validator(mode="after")
    def _check_consistency(self) -> "RunConfig":
        LookbackSet(lookbacks=self.lookbacks)
        if self.train_months < max(self.lookbacks) + 1:
            raise ValueError("train_months must be at least the longest lookback + 1")
        kind, L = self.combine_kind()
        if kind in ("single", "naive") and L not in self.lookbacks:
            raise ValueError(f"{self.combine} requires {L} in lookbacks {self.lookbacks}")
        CutoffPolicy.parse(self.cutoff)
        self.window_bounds()
        return self

    def combine_kind(self) -> Tuple[str, Optional[int]]:
        kind, _, value = self.combine.partition(":")
        if kind in ("dma", "dms") and not value:
            return kind, None
        if kind in ("single", "naive") and value.isdigit():
            return kind, int(value)
        raise ValueError(f"combine must be dma|dms|single:L|naive:L, got {self.combine!r}")

    def window_bounds(self) -> Optional[Tuple[str, str]]:
        if self.window in WINDOWS:
            return WINDOWS[self.window]
        start, sep, end = self.window.partition(":")
        if not sep:
            raise ValueError(f"window must be a name or YYYY-MM:YYYY-MM, got {self.window!r}")
        if parse_month(start) > parse_month(end):
            raise ValueError("window start is after its end")
        return start, end

    def cutoff_policy(self) -> CutoffPolicy:
        return CutoffPolicy.parse(
            self.cutoff,
            cv_window=self.cv_window,
            gamma=self.gamma,
            dispersion=self.utility_dispersion,
        )

    @property
    def strategy_name(self) -> str:
        kind, _ = self.combine_kind()
        if kind == "naive":
            return self.combine
        return f"{self.combine}-{self.lambda_mode}-{self.cutoff}"
