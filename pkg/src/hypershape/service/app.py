"""FastAPI application exposing dataset generation, training, reconstruction,
evaluation and sampler benchmarks.

Paths in requests refer to the server's filesystem. Errors come back as
``{"kind", "detail"}``: 400 for bad arguments (including request
validation), 422 for unreadable or malformed data.
"""
from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from .. import __version__
from ..errors import HyperShapeError
from . import handlers
from .schemas import (BenchRequest, BenchResponse, DatasetRequest, DatasetResponse, ErrorResponse,
                      EvaluateRequest, EvaluateResponse, ReconstructRequest, ReconstructResponse, TrainRequest,
                      TrainResponse)

STATUS = {handlers.BAD_ARGUMENT: 400, handlers.DATA_ERROR: 422}

app = FastAPI(title="hypershape", version=__version__)
ERRORS = {400: {"model": ErrorResponse}, 422: {"model": ErrorResponse}}


@app.exception_handler(HyperShapeError)
async def _package_error(request: Request, exc: HyperShapeError):
    kind = handlers.classify(exc) or "internal"
    return JSONResponse(status_code=STATUS.get(kind, 500), content={"kind": kind, "detail": str(exc)})


@app.exception_handler(RequestValidationError)
async def _validation_error(request: Request, exc: RequestValidationError):
    return JSONResponse(status_code=400, content={"kind": handlers.BAD_ARGUMENT, "detail": str(exc.errors())})


@app.get("/health")
def health() -> dict:
    return {"status": "ok", "version": __version__}


@app.post("/dataset/generate", response_model=DatasetResponse, responses=ERRORS)
def dataset_generate(req: DatasetRequest):
    return handlers.run_dataset(req)


@app.post("/train", response_model=TrainResponse, responses=ERRORS)
def train(req: TrainRequest):
    return handlers.run_train(req)


@app.post("/reconstruct", response_model=ReconstructResponse, responses=ERRORS)
def reconstruct(req: ReconstructRequest):
    return handlers.run_reconstruct(req)


@app.post("/evaluate", response_model=EvaluateResponse, responses=ERRORS)
def evaluate(req: EvaluateRequest):
    return handlers.run_evaluate(req)


@app.post("/bench", response_model=BenchResponse, responses=ERRORS)
def bench(req: BenchRequest):
    return handlers.run_bench(req)
