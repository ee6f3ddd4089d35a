from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from app.api.v1.endpoints import router as api_router
from app.core.config import settings
from app.core.errors import ConfigError, DataError, NumericError
from app.core.logger import setup_logging

setup_logging()

app = FastAPI(
    title=settings.PROJECT_NAME,
    version=settings.VERSION,
    openapi_url="/api/v1/openapi.json",
)

app.include_router(api_router, prefix="/api/v1")


@app.exception_handler(ConfigError)
@app.exception_handler(DataError)
async def invalid_input_handler(request: Request, exc: Exception):
    return JSONResponse(
        status_code=422,
        content={"error": type(exc).__name__, "detail": str(exc)},
    )


@app.exception_handler(NumericError)
async def numeric_error_handler(request: Request, exc: NumericError):
    return JSONResponse(
        status_code=500,
        content={"error": "NumericError", "detail": str(exc)},
    )


@app.get("/")
def root():
    return {"message": f"Welcome to the {settings.PROJECT_NAME} API"}


@app.get("/health")
def health_check():
    return {"status": "ok", "service": settings.PROJECT_NAME}
