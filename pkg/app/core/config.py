from pathlib import Path
from typing import Dict, Optional, Tuple

from dotenv import dotenv_values
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.core.errors import ConfigError


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="TSMOM_", env_file=".env", extra="ignore"
    )

    PROJECT_NAME: str = "Dynamic Trend Classifier"
    VERSION: str = "0.1.0"

    # Data and calendar
    TRAIN_MONTHS: int = 36
    LOOKBACKS: Tuple[int, ...] = (1, 2, 4, 6, 8, 10, 12)

    # Ex-ante volatility (EWMA)
    EWMA_DELTA: float = 0.97
    PERIODS_PER_YEAR: int = 12
    SIGMA_FLOOR: float = 0.005
    EWMA_MEAN: str = "running"  # "running" | "full"

    # Dynamic logistic regression
    PRIOR_SCALE: float = 100.0
    TVP_LAMBDAS: Tuple[float, ...] = (0.98, 0.99, 1.0)
    CP_LAMBDAS: Tuple[float, ...] = (1.0,)
    LAPLACE_MODE: str = "posterior"  # "posterior" | "prior"
    HESSIAN_JITTER: float = 1e-8

    # Model pool
    ALPHAS: Tuple[float, ...] = (0.99, 1.0)
    PROB_FLOOR: float = 1e-12
    MAX_LOOKBACKS: int = 16
    ALPHA_TIMING: str = "next"  # "next" | "current"

    # Signals
    CUTOFF: float = 0.5
    CV_WINDOW: int = 36
    GAMMA: float = 10.0
    UTILITY_DISPERSION: str = "mean_square"  # "mean_square" | "variance"

    # Portfolio and reporting
    SIGMA_TARGET: float = 0.40
    EXPOST_TARGET: float = 0.10
    BENCHMARK_LOOKBACK: int = 12

    # Execution
    JOBS: int = 1
    OUTPUT_DIR: str = "runs"


settings = Settings()


def read_key_values(path: Optional[str]) -> Dict[str, str]:
    """Read a plain-text KEY=value file (``#`` comments allowed)."""
    if path is None:
        return {}
    file_path = Path(path)
    if not file_path.is_file():
        raise ConfigError(f"config file not found: {file_path}")
    values = dotenv_values(file_path)
    return {key: value for key, value in values.items() if value is not None}
