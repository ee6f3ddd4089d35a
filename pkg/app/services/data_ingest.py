"""
Monthly futures return panels: CSV loading/validation, writing, the per-asset
training split and synthetic generators used as test oracles.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit

from app.core.errors import DataError
from app.models.schemas import (
    AssetClass,
    AssetSeries,
    AssetSummary,
    DataDiagnostics,
    DataFinding,
    GroundTruth,
    PanelDataset,
    SplitPolicy,
    SyntheticSpec,
    add_months,
    format_month,
    parse_month,
)

logger = logging.getLogger(__name__)

COLUMNS = ("asset_id", "asset_class", "year_month", "log_return")
DEFAULT_SCHEMA: Dict[str, str] = {name: name for name in COLUMNS}
_CLASSES = {c.value.lower(): c for c in AssetClass}


def _csv_files(path: Path) -> List[Path]:
    if path.is_file():
        return [path]
    if path.is_dir():
        files = sorted(path.glob("*.csv"))
        if files:
            return files
        raise DataError("no CSV files found", file=str(path))
    raise DataError("path does not exist", file=str(path))


def _read_rows(
    path: Path, schema: Dict[str, str]
) -> Tuple[pd.DataFrame, List[DataFinding]]:
    findings: List[DataFinding] = []
    frames = []
    for file in _csv_files(path):
        try:
            raw = pd.read_csv(file, dtype=str, keep_default_na=False)
        except (OSError, pd.errors.ParserError, UnicodeDecodeError) as e:
            raise DataError(f"unreadable CSV: {e}", file=str(file)) from e
        missing = [schema[c] for c in COLUMNS if schema[c] not in raw.columns]
        if missing:
            findings.append(
                DataFinding(
                    kind="schema",
                    message=f"missing columns {missing}",
                    file=str(file),
                )
            )
            continue
        frame = pd.DataFrame({c: raw[schema[c]].str.strip() for c in COLUMNS})
        frame["src_file"] = str(file)
        frame["src_row"] = np.arange(len(frame)) + 2  # header is line 1
        frames.append(frame)
    if not frames:
        return pd.DataFrame(columns=[*COLUMNS, "src_file", "src_row"]), findings
    return pd.concat(frames, ignore_index=True), findings


def _summarize(asset_id: str, asset_class: str, months: List[int], r: np.ndarray) -> AssetSummary:
    mean = float(np.mean(r)) * 12
    vol = float(np.std(r, ddof=1)) * np.sqrt(12) if len(r) > 1 else 0.0
    return AssetSummary(
        asset_id=asset_id,
        asset_class=asset_class,
        start=format_month(months[0]),
        end=format_month(months[-1]),
        months=len(r),
        mean=round(mean * 100, 4),
        vol=round(vol * 100, 4),
        sharpe=round(mean / vol, 4) if vol > 0 else None,
    )


def scan_panel(
    path: str, schema: Optional[Dict[str, str]] = None
) -> Tuple[DataDiagnostics, pd.DataFrame]:
    """
    Read every CSV under ``path`` and collect findings instead of failing.

    Returns the diagnostics and the parsed rows (columns asset_id, asset_class,
    month (absolute), log_return, src_file, src_row) of the rows that parsed.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    rows, findings = _read_rows(Path(path), schema)

    parsed = []
    for rec in rows.itertuples(index=False):
        context = dict(file=rec.src_file, row=int(rec.src_row), asset_id=rec.asset_id)
        try:
            month = parse_month(rec.year_month)
        except ValueError as e:
            findings.append(DataFinding(kind="schema", message=str(e), **context))
            continue
        asset_class = _CLASSES.get(rec.asset_class.lower())
        if asset_class is None:
            findings.append(
                DataFinding(
                    kind="schema",
                    message=f"unknown asset_class {rec.asset_class!r}",
                    month=rec.year_month,
                    **context,
                )
            )
            continue
        try:
            value = float(rec.log_return)
        except ValueError:
            value = float("nan")
        if not np.isfinite(value):
            findings.append(
                DataFinding(
                    kind="non_finite",
                    message=f"non-finite log_return {rec.log_return!r}",
                    month=rec.year_month,
                    **context,
                )
            )
            continue
        parsed.append((rec.asset_id, asset_class.value, month, value, rec.src_file, int(rec.src_row)))

    table = pd.DataFrame(
        parsed, columns=["asset_id", "asset_class", "month", "log_return", "src_file", "src_row"]
    )

    dupes = table[table.duplicated(["asset_id", "month"], keep="first")]
    for rec in dupes.itertuples(index=False):
        findings.append(
            DataFinding(
                kind="duplicate",
                message="duplicate (asset, month)",
                file=rec.src_file,
                row=int(rec.src_row),
                asset_id=rec.asset_id,
                month=format_month(rec.month),
            )
        )
    table = table.drop_duplicates(["asset_id", "month"], keep="first")

    summary = []
    for asset_id, group in table.sort_values(["asset_id", "month"]).groupby("asset_id", sort=True):
        months = group["month"].tolist()
        classes = group["asset_class"].unique()
        if len(classes) > 1:
            findings.append(
                DataFinding(
                    kind="schema",
                    message=f"asset has several classes {sorted(classes)}",
                    asset_id=asset_id,
                )
            )
        present = set(months)
        for m in range(months[0], months[-1] + 1):
            if m not in present:
                findings.append(
                    DataFinding(
                        kind="gap",
                        message="missing month",
                        file=group["src_file"].iloc[0],
                        asset_id=asset_id,
                        month=format_month(m),
                    )
                )
        summary.append(
            _summarize(asset_id, classes[0], months, group["log_return"].to_numpy())
        )

    return DataDiagnostics(path=str(path), findings=findings, summary=summary), table


def load_panel(path: str, schema: Optional[Dict[str, str]] = None) -> PanelDataset:
    """Load a validated panel; any finding is a DataError naming its context."""
    diagnostics, table = scan_panel(path, schema)
    if diagnostics.findings:
        first = diagnostics.findings[0]
        extra = len(diagnostics.findings) - 1
        suffix = f" (+{extra} more findings)" if extra else ""
        raise DataError(
            f"{first.kind}: {first.message}{suffix}",
            file=first.file,
            row=first.row,
            asset_id=first.asset_id,
            month=first.month,
        )
    if table.empty:
        raise DataError("panel has no rows", file=str(path))

    assets = []
    for asset_id, group in table.sort_values(["asset_id", "month"]).groupby("asset_id", sort=True):
        assets.append(
            AssetSeries(
                asset_id=str(asset_id),
                asset_class=group["asset_class"].iloc[0],
                start_month=format_month(group["month"].iloc[0]),
                returns=group["log_return"].tolist(),
            )
        )
    first, last = int(table["month"].min()), int(table["month"].max())
    calendar = [format_month(m) for m in range(first, last + 1)]
    logger.info("Loaded %d assets over %d months from %s", len(assets), len(calendar), path)
    return PanelDataset(assets=assets, calendar=calendar)


def write_panel(panel: PanelDataset, path: str) -> Path:
    """Write one CSV in the load schema; 17 significant digits keep values bit-exact."""
    records = []
    for asset in panel.assets:
        start = parse_month(asset.start_month)
        for i, r in enumerate(asset.returns):
            records.append((asset.asset_id, asset.asset_class.value, format_month(start + i), r))
    frame = pd.DataFrame(records, columns=list(COLUMNS))
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False, float_format="%.17g")
    return out


def test_start(asset: AssetSeries, policy: SplitPolicy) -> Optional[str]:
    """First out-of-sample month, or None when the asset is too short to trade."""
    if len(asset.returns) <= policy.train_months:
        logger.info(
            "Excluding %s: %d months <= %d training months",
            asset.asset_id,
            len(asset.returns),
            policy.train_months,
        )
        return None
    return add_months(asset.start_month, policy.train_months)


# Not a pytest test despite the name.
test_start.__test__ = False


# ============================================
# Synthetic generators
# ============================================

def _logit_series(
    spec: SyntheticSpec, rng: np.random.Generator, sd: float
) -> np.ndarray:
    lags = spec.planted_lookbacks
    warmup = max(lags)
    theta = np.array(spec.coefficients, dtype=float)
    r = np.empty(spec.n_months)
    r[:warmup] = rng.normal(0.0, sd, warmup)
    for t in range(warmup, spec.n_months):
        flipped = spec.flip_month is not None and t >= spec.flip_month
        coef = -theta if flipped else theta
        mom = np.array([r[t - L:t].sum() for L in lags])
        p = expit(spec.intercept + coef @ mom)
        sign = 1.0 if rng.uniform() < p else -1.0
        r[t] = sign * abs(rng.normal(0.0, sd))
    return r


def generate_synthetic(spec: SyntheticSpec, seed: int) -> Tuple[PanelDataset, GroundTruth]:
    """Deterministic in (spec, seed); returns the panel and the planted truth."""
    rng = np.random.default_rng(seed)
    mu, sd = spec.mean / 12.0, spec.vol / np.sqrt(12.0)
    classes = list(AssetClass)
    assets = []
    for i in range(spec.n_assets):
        if spec.generator == "iid-gaussian":
            r = mu + sd * rng.standard_normal(spec.n_months)
        elif spec.generator == "ar1":
            phi = spec.persistence
            eps = sd * np.sqrt(1.0 - phi**2) * rng.standard_normal(spec.n_months)
            r = np.empty(spec.n_months)
            r[0] = mu + sd * rng.standard_normal()
            for t in range(1, spec.n_months):
                r[t] = mu + phi * (r[t - 1] - mu) + eps[t]
        else:
            r = _logit_series(spec, rng, sd)
        assets.append(
            AssetSeries(
                asset_id=f"SYN{i + 1:03d}",
                asset_class=classes[i % len(classes)],
                start_month=spec.start_month,
                returns=r.tolist(),
            )
        )
    calendar = [add_months(spec.start_month, k) for k in range(spec.n_months)]
    panel = PanelDataset(assets=assets, calendar=calendar)

    truth = GroundTruth(generator=spec.generator, seed=seed, spec=spec)
    if spec.generator == "regime-switching-logit":
        before = [spec.intercept, *spec.coefficients]
        after = [spec.intercept, *(-c for c in spec.coefficients)]
        truth = truth.model_copy(
            update=dict(
                planted_lookbacks=spec.planted_lookbacks,
                theta_before=before,
                theta_after=after if spec.flip_month is not None else before,
                flip_month=spec.flip_month,
            )
        )
    logger.debug("Generated %s panel with %d assets (seed %d)", spec.generator, spec.n_assets, seed)
    return panel, truth
