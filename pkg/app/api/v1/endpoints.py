from fastapi import APIRouter
from pydantic import BaseModel

from app.core.config import settings
from app.models.schemas import DataDiagnostics, RunConfig, SyntheticSpec
from app.services.backtest_service import BacktestService, synth, validate_data

router = APIRouter()


class SynthRequest(BaseModel):
    spec: SyntheticSpec = SyntheticSpec()
    seed: int = 0
    path: str


class DataRequest(BaseModel):
    path: str


@router.get("/health")
def health_check():
    return {"status": "ok", "service": settings.PROJECT_NAME}


@router.post("/backtest")
def run_backtest(config: RunConfig):
    report, path = BacktestService(config).run_backtest()
    return {"bundle": str(path), "report": report}


@router.post("/synth")
def generate_panel(request: SynthRequest):
    truth, path = synth(request.spec, request.seed, request.path)
    return {"path": str(path), "truth": truth}


@router.post("/validate-data", response_model=DataDiagnostics)
def check_panel(request: DataRequest):
    return validate_data(request.path)
