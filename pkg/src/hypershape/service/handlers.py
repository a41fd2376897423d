"""Request execution shared by the HTTP routes and the in-process CLI."""
from __future__ import annotations

import time
from dataclasses import asdict
from pathlib import Path
from typing import Optional

from .. import data, pipeline
from .. import encoder as enc
from .. import implicit_fn as imp
from ..data import DatasetConfig
from ..encoder import EncoderArch
from ..errors import (BadArgument, BadSpec, DataError, DegenerateCloud, EmptyView, FileError, GridMismatch,
                      ShapeMismatch)
from ..pipeline import EvalConfig, TrainConfig, config_from_dict
from ..ply import read_ply, write_ply
from ..sampler import SamplerConfig
from .schemas import (BenchRequest, BenchResponse, DatasetRequest, DatasetResponse, EvaluateRequest,
                      EvaluateResponse, ReconstructRequest, ReconstructResponse, TrainRequest, TrainResponse)

BAD_ARGUMENT = "bad_argument"
DATA_ERROR = "data_error"

_BAD_ARGUMENT = (BadArgument, BadSpec, GridMismatch)
_DATA_ERROR = (DataError, FileError, EmptyView, DegenerateCloud, ShapeMismatch)


def classify(exc: BaseException) -> Optional[str]:
    """Map a package exception to an error kind, or None if unexpected."""
    if isinstance(exc, _BAD_ARGUMENT):
        return BAD_ARGUMENT
    if isinstance(exc, _DATA_ERROR):
        return DATA_ERROR
    return None


def _section(cls, values: dict, seed: Optional[int], defaults: Optional[dict] = None):
    merged = {**(defaults or {}), **values}
    if seed is not None:
        merged["seed"] = seed
    try:
        return config_from_dict(cls, merged)
    except TypeError as exc:
        raise BadArgument(str(exc)) from exc


def _arch(values: dict) -> EncoderArch:
    try:
        return EncoderArch.from_dict(values) if values else EncoderArch()
    except (TypeError, KeyError) as exc:
        raise BadArgument(f"bad arch section: {exc}") from exc


def run_dataset(req: DatasetRequest) -> DatasetResponse:
    cfg = _section(DatasetConfig, req.dataset, req.seed)
    t0 = time.perf_counter()
    samples = data.generate_dataset(cfg)
    data.save_dataset(samples, req.out_dir, binary=not req.ascii)
    splits = {sp: len(data.by_split(samples, sp)) for sp in data.SPLITS}
    return DatasetResponse(out_dir=str(req.out_dir), samples=len(samples),
                           splits={k: v for k, v in splits.items() if v},
                           seconds=time.perf_counter() - t0)


def run_train(req: TrainRequest) -> TrainResponse:
    cfg = _section(TrainConfig, req.train, req.seed)
    arch = _arch(req.arch)
    samples = data.load_dataset(req.dataset_dir, splits=["train", "validation"])
    t0 = time.perf_counter()
    res = pipeline.train(samples, arch, cfg)
    seconds = time.perf_counter() - t0
    Path(req.checkpoint).parent.mkdir(parents=True, exist_ok=True)
    enc.save_checkpoint(req.checkpoint, res.model, {
        "best_epoch": res.best_epoch, "best_val_loss": res.best_val_loss, "train": asdict(cfg)})
    if req.curve:
        res.write_curve(req.curve)
    return TrainResponse(checkpoint=str(req.checkpoint), best_epoch=res.best_epoch,
                         best_val_loss=res.best_val_loss, epochs_run=len(res.history), steps=res.steps,
                         seconds=seconds, history=res.history)


def run_reconstruct(req: ReconstructRequest) -> ReconstructResponse:
    cfg = _section(EvalConfig, req.eval, req.seed)
    model, _ = enc.load_checkpoint(req.checkpoint)
    partial = read_ply(req.partial)
    t0 = time.perf_counter()
    rec = pipeline.reconstruct(model, partial, cfg)
    seconds = time.perf_counter() - t0
    if req.out:
        write_ply(req.out, rec.cloud, binary=not req.ascii)
    return ReconstructResponse(points=len(rec.cloud), exhausted=rec.exhausted, report=rec.report.to_dict(),
                               out=req.out, seconds=seconds)


def run_evaluate(req: EvaluateRequest) -> EvaluateResponse:
    cfg = _section(EvalConfig, req.eval, req.seed)
    unknown = set(req.splits) - set(data.SPLITS)
    if unknown:
        raise BadArgument(f"unknown splits: {sorted(unknown)}")
    model, _ = enc.load_checkpoint(req.checkpoint)
    samples = data.load_dataset(req.dataset_dir, splits=req.splits)
    if req.limit is not None:
        samples = samples[:req.limit]
    rep = pipeline.evaluate(model, samples, cfg)
    return EvaluateResponse(**rep.to_dict())


def bench_config(values: dict, seed: Optional[int]) -> SamplerConfig:
    """Sampler settings of the evaluation protocol at the FPS target size,
    overridden by ``values``."""
    ev = EvalConfig()
    return _section(SamplerConfig, values, seed, asdict(ev.sampler(ev.fps_target)))


def run_bench(req: BenchRequest) -> BenchResponse:
    cfg = bench_config(req.sampler, req.seed)
    if req.params is not None:
        try:
            params = imp.loads(Path(req.params).read_bytes())
        except OSError as exc:
            raise FileError(str(exc)) from exc
    else:
        model, _ = enc.load_checkpoint(req.checkpoint)
        params = enc.predict([read_ply(req.partial)], model)[0]
    report = pipeline.bench_samplers(params, req.resolutions, cfg)
    pipeline.validate_bench(report)
    return BenchResponse(report=report)
