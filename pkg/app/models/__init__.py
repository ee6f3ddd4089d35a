"""
Models package - Pydantic schemas for the trend classifier.
"""

from app.models.schemas import (
    # Calendar helpers
    parse_month,
    format_month,
    add_months,

    # Panel
    AssetClass,
    AssetSeries,
    PanelDataset,
    SplitPolicy,

    # Features
    LookbackSet,

    # Filter / pool
    FilterPrior,
    LambdaGrid,
    AlphaGrid,
    ModelSpec,

    # Signals
    CutoffMode,
    CutoffPolicy,
    UtilityTable,
    CV1_GRID,
    CV2_GRID,

    # Portfolio
    PositionRow,
    CostSchedule,

    # Reports and diagnostics
    PerfReport,
    DataFinding,
    AssetSummary,
    DataDiagnostics,

    # Synthetic data
    SyntheticSpec,
    GroundTruth,

    # Run configuration
    RunConfig,
    WINDOWS,
)

__all__ = [
    "parse_month",
    "format_month",
    "add_months",
    "AssetClass",
    "AssetSeries",
    "PanelDataset",
    "SplitPolicy",
    "LookbackSet",
    "FilterPrior",
    "LambdaGrid",
    "AlphaGrid",
    "ModelSpec",
    "CutoffMode",
    "CutoffPolicy",
    "UtilityTable",
    "CV1_GRID",
    "CV2_GRID",
    "PositionRow",
    "CostSchedule",
    "PerfReport",
    "DataFinding",
    "AssetSummary",
    "DataDiagnostics",
    "SyntheticSpec",
    "GroundTruth",
    "RunConfig",
    "WINDOWS",
]
