import time
import logging
from typing import List, Optional

from fastapi import FastAPI, HTTPException, Depends, Query
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
import uvicorn

from config import settings
from database.result_store import ResultStore
from logger_config import setup_logging
from models.exceptions import AffineSSLError, ContractError
from models.schemas import (
    ErrorResponse, HealthResponse, MetricsRecord, ProbeResult,
    ResultsTable, RunDetail, RunListResponse,
)
from services.report_service import build_tables

logger = logging.getLogger(__name__)

# Initialize FastAPI app
app = FastAPI(
    title=f"{settings.app_name} Results API",
    description="Read-only access to pretraining runs, probe results and rendered tables",
    version=settings.app_version
)

# Add CORS middleware
app.add_middleware(
    CORSMiddleware,
    allow_origins=settings.allowed_origins,
    allow_credentials=True,
    allow_methods=["GET"],
    allow_headers=["*"],
)

# Global variables
result_store: Optional[ResultStore] = None
app_start_time = time.time()


@app.on_event("startup")
async def startup_event():
    """Open the result store on startup."""
    global result_store
    try:
        logger.info(f"Opening result store at {settings.output_dir}...")
        result_store = ResultStore(settings.output_dir)
        logger.info("Result store opened successfully")
    except Exception as e:
        logger.error(f"Failed to open result store: {str(e)}")
        raise


@app.on_event("shutdown")
async def shutdown_event():
    logger.info("Shutting down results API")


def get_result_store() -> ResultStore:
    """Dependency to get the result store instance."""
    if result_store is None:
        raise HTTPException(status_code=500, detail="Result store not initialized")
    return result_store


def require_run(run_id: str, store: ResultStore) -> None:
    if not store.exists(run_id):
        raise HTTPException(status_code=404, detail=f"Run {run_id} not found")


@app.get("/health", response_model=HealthResponse)
async def health_check():
    """Health check endpoint."""
    return HealthResponse(
        status="healthy",
        version=settings.app_version,
        uptime=time.time() - app_start_time
    )


@app.get("/runs", response_model=RunListResponse)
async def list_runs(store: ResultStore = Depends(get_result_store)):
    """List every grid cell with its status."""
    try:
        runs = store.list_runs()
        return RunListResponse(runs=runs, total=len(runs))
    except Exception as e:
        logger.error(f"Error listing runs: {str(e)}")
        raise HTTPException(status_code=500, detail="Failed to list runs")


@app.get("/runs/{run_id}", response_model=RunDetail, responses={404: {"model": ErrorResponse}})
async def get_run(run_id: str, store: ResultStore = Depends(get_result_store)):
    """Config and status of one cell."""
    detail = store.get_run(run_id)
    if detail is None:
        raise HTTPException(status_code=404, detail=f"Run {run_id} not found")
    return detail


@app.get("/runs/{run_id}/metrics", response_model=List[MetricsRecord], responses={404: {"model": ErrorResponse}})
async def get_run_metrics(
    run_id: str,
    limit: Optional[int] = Query(default=None, ge=1, description="Return at most this many records"),
    store: ResultStore = Depends(get_result_store)
):
    """Per-step metrics stream of one cell."""
    require_run(run_id, store)
    return store.read_metrics(run_id, limit)


@app.get("/runs/{run_id}/probes", response_model=List[ProbeResult], responses={404: {"model": ErrorResponse}})
async def get_run_probes(run_id: str, store: ResultStore = Depends(get_result_store)):
    """Linear-probe results of one cell, one per (epoch, dataset)."""
    require_run(run_id, store)
    return store.list_probes(run_id)


@app.get("/tables", response_model=List[ResultsTable])
async def get_tables(store: ResultStore = Depends(get_result_store)):
    """Result tables computed from every stored probe result."""
    probes = store.list_probes()
    if not probes:
        return []
    return build_tables(probes)


@app.get("/stats")
async def get_stats(store: ResultStore = Depends(get_result_store)):
    """Store statistics."""
    try:
        stats = store.get_stats()
        stats["uptime"] = time.time() - app_start_time
        return stats
    except Exception as e:
        logger.error(f"Error getting stats: {str(e)}")
        raise HTTPException(status_code=500, detail="Failed to get statistics")


# Error handlers
@app.exception_handler(HTTPException)
async def http_exception_handler(request, exc):
    """Custom HTTP exception handler."""
    return JSONResponse(
        status_code=exc.status_code,
        content={"detail": exc.detail, "error_code": f"HTTP_{exc.status_code}"}
    )


@app.exception_handler(AffineSSLError)
async def domain_exception_handler(request, exc):
    """Package errors become 400 (caller contract) or 500 responses carrying their error code."""
    logger.error(f"{exc.error_code}: {str(exc)}")
    status_code = 400 if isinstance(exc, ContractError) else 500
    return JSONResponse(
        status_code=status_code,
        content={"detail": str(exc), "error_code": exc.error_code}
    )


@app.exception_handler(Exception)
async def general_exception_handler(request, exc):
    """General exception handler for unexpected errors."""
    logger.error(f"Unexpected error: {str(exc)}")
    return JSONResponse(
        status_code=500,
        content={"detail": "Internal server error", "error_code": "INTERNAL_ERROR"}
    )


def serve(host: Optional[str] = None, port: Optional[int] = None, reload: bool = False) -> None:
    setup_logging()
    uvicorn.run(
        "main:app",
        host=host or settings.host,
        port=port or settings.port,
        reload=reload,
        log_level=settings.log_level.lower()
    )


if __name__ == "__main__":
    serve(reload=settings.debug)
