from pathlib import Path

import pytest
from fastapi.testclient import TestClient

from main import app


@pytest.fixture
def client():
    return TestClient(app)


def test_health(client):
    assert client.get("/health").json()["status"] == "ok"
    assert client.get("/api/v1/health").status_code == 200


def test_backtest(client, panel_csv, tmp_path):
    response = client.post(
        "/api/v1/backtest",
        json={"data_path": panel_csv, "combine": "naive:12", "output_dir": str(tmp_path)},
    )
    assert response.status_code == 200
    body = response.json()
    assert Path(body["bundle"], "report.json").is_file()
    assert body["report"]["full"]["vol"] == pytest.approx(10.0, abs=1e-8)


def test_invalid_config_is_rejected(client, panel_csv):
    response = client.post("/api/v1/backtest", json={"data_path": panel_csv, "combine": "median"})
    assert response.status_code == 422


def test_missing_data_is_an_input_error(client, tmp_path):
    response = client.post(
        "/api/v1/backtest",
        json={"data_path": str(tmp_path / "missing.csv"), "output_dir": str(tmp_path)},
    )
    assert response.status_code == 422
    assert response.json()["error"] == "DataError"


def test_synth_and_validate(client, tmp_path):
    target = tmp_path / "syn.csv"
    response = client.post(
        "/api/v1/synth",
        json={"spec": {"generator": "ar1", "n_assets": 2, "persistence": 0.3}, "seed": 1, "path": str(target)},
    )
    assert response.status_code == 200
    assert response.json()["truth"]["generator"] == "ar1"

    report = client.post("/api/v1/validate-data", json={"path": str(target)}).json()
    assert report["findings"] == []
    assert len(report["summary"]) == 2
