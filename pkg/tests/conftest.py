import numpy as np
import pytest

from app.models.schemas import AssetClass, AssetSeries, PanelDataset, RunConfig, add_months
from app.services.data_ingest import write_panel


def make_panel(n_months=60, start="2000-01", seed=7, classes=None, starts=None):
    """Three assets on a shared calendar; the third starts six months late."""
    rng = np.random.default_rng(seed)
    classes = classes or [AssetClass.EQUITY, AssetClass.BOND, AssetClass.COMMODITY]
    starts = starts or [0, 0, 6]
    assets = []
    for i, (asset_class, offset) in enumerate(zip(classes, starts)):
        returns = rng.normal(0.005, 0.05, n_months - offset)
        assets.append(
            AssetSeries(
                asset_id=f"A{i + 1}",
                asset_class=asset_class,
                start_month=add_months(start, offset),
                returns=returns.tolist(),
            )
        )
    calendar = [add_months(start, k) for k in range(n_months)]
    return PanelDataset(assets=assets, calendar=calendar)


@pytest.fixture
def panel():
    return make_panel()


@pytest.fixture
def panel_csv(tmp_path, panel):
    return str(write_panel(panel, tmp_path / "panel.csv"))


@pytest.fixture
def run_config(tmp_path, panel_csv):
    def build(**overrides):
        values = dict(data_path=panel_csv, output_dir=str(tmp_path / "runs"))
        values.update(overrides)
        return RunConfig(**values)

    return build
