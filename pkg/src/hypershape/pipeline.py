"""Training, reconstruction, Jaccard evaluation and sampler benchmarking."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import torch
from scipy.spatial import cKDTree

from . import encoder as enc
from . import geometry
from .data import QueryBatch, Sample, make_query_batch
from .encoder import Backbone, EncoderArch
from .errors import BadArgument, DataError
from .geometry import CANONICAL_BOUNDS, PointCloud
from .implicit_fn import ImplicitParams
from .sampler import SampleReport, SamplerConfig, sample_gradient, sample_grid

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 60
    query_size: int = 2000
    noise_std: float = 0.02
    label_eps: float = 0.01
    input_noise: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 10
    fixed_queries: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise BadArgument("lr must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise BadArgument("batch_size must be >= 1 and epochs >= 0")
        if self.query_size < 10 or self.query_size % 10:
            raise BadArgument("query_size must be a positive multiple of 10")

    @classmethod
    def paper_scale(cls, **kw) -> "TrainConfig":
        return cls(batch_size=32, epochs=60, **kw)


@dataclass(frozen=True)
class EvalConfig:
    sample_count: int = 100_000
    fps_target: int = 16384
    resolution: int = 40
    step: float = 0.1
    steps_per_round: int = 20
    threshold: float = 0.85
    # initial candidates ~ N(0, 0.1) read as variance 0.1
    init_std: float = float(np.sqrt(0.1))
    max_rounds: int = 50
    max_step: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.fps_target > self.sample_count:
            raise BadArgument("fps_target must not exceed sample_count")
        if self.resolution < 1:
            raise BadArgument("resolution must be >= 1")

    def sampler(self, n_points: Optional[int] = None) -> SamplerConfig:
        return SamplerConfig(
            n_points=n_points or self.sample_count,
            step=self.step,
            steps_per_round=self.steps_per_round,
            threshold=self.threshold,
            init_std=self.init_std,
            max_rounds=self.max_rounds,
            max_step=self.max_step,
            seed=self.seed,
        )


def config_from_dict(cls, d: dict):
    """Build a config dataclass from a dict, rejecting unknown keys."""
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise BadArgument(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**d)


# -- training ------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Backbone
    history: List[dict]
    best_epoch: int
    best_val_loss: float
    steps: int = 0

    def write_curve(self, path: Union[str, Path]) -> None:
        if not self.history:
            return
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.history[0]))
            w.writeheader()
            w.writerows(self.history)


class _Prepared:
    """Per-sample tensors that stay fixed across epochs."""

    def __init__(self, samples: Sequence[Sample], arch: EncoderArch):
        self.samples = list(samples)
        self.index = [enc.build_index(s.partial, arch) for s in self.samples]
        self.trees = [cKDTree(s.complete.points) for s in self.samples]

    def queries(self, i: int, cfg: TrainConfig, seed: int) -> QueryBatch:
        return make_query_batch(self.samples[i].complete, cfg.query_size, cfg.noise_std, cfg.label_eps,
                                seed, tree=self.trees[i])


def _sample_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _batch_tensors(prep: _Prepared, ids, cfg: TrainConfig, epoch: int, arch: EncoderArch, rng_base: int,
                   dtype=torch.float32):
    idx = []
    for i in ids:
        ix = prep.index[i]
        if cfg.input_noise > 0:
            rng = np.random.default_rng(_sample_seed(rng_base, 2, epoch, i))
            pts = prep.samples[i].partial.points
            ix = enc.build_index(PointCloud(pts + rng.normal(0, cfg.input_noise, pts.shape)), arch)
        idx.append(ix)
    qseed = [(_sample_seed(rng_base, 1, i) if cfg.fixed_queries else _sample_seed(rng_base, 0, epoch, i))
             for i in ids]
    qb = [prep.queries(i, cfg, s) for i, s in zip(ids, qseed)]
    edges, centers, nb = enc.stack_indices(idx, dtype)
    q = torch.as_tensor(np.stack([b.points for b in qb]), dtype=dtype)
    y = torch.as_tensor(np.stack([b.labels for b in qb]), dtype=dtype)
    return edges, centers, nb, q, y


def _mean_loss(model: Backbone, prep: _Prepared, cfg: TrainConfig, batches) -> float:
    total, count = 0.0, 0
    with torch.no_grad():
        for edges, centers, nb, q, y in batches:
            loss = enc.batch_loss(model, edges, centers, nb, q, y)
            total += float(loss) * len(q)
            count += len(q)
    return total / max(count, 1)


def train(samples: Sequence[Sample], arch: EncoderArch = EncoderArch(), cfg: TrainConfig = TrainConfig(),
          on_epoch: Optional[Callable[[dict], None]] = None, model: Optional[Backbone] = None) -> TrainResult:
    """Adam on mean BCE of the generated occupancy MLPs.

    Uses samples tagged ``train`` for updates and ``validation`` for early
    stopping (training loss is monitored when there is no validation
    split). Returns the parameters of the best-monitored epoch.
    """
    train_set = [s for s in samples if s.split == "train"]
    val_set = [s for s in samples if s.split == "validation"]
    if not train_set:
        raise DataError("dataset has no training samples")
    for s in train_set + val_set:
        if len(s.partial) < max(arch.n_proxies, arch.proxy_knn) or len(s.complete) == 0:
            raise DataError(f"sample {s.meta.get('id')} is too small for the encoder")

    torch.manual_seed(cfg.seed)
    if model is None:
        model = Backbone(arch, seed=cfg.seed)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)

    prep = _Prepared(train_set, arch)
    val_prep = _Prepared(val_set, arch) if val_set else None
    val_cfg = TrainConfig(**{**asdict(cfg), "fixed_queries": True, "input_noise": 0.0})
    val_batches = []
    if val_prep is not None:
        for lo in range(0, len(val_set), cfg.batch_size):
            ids = list(range(lo, min(lo + cfg.batch_size, len(val_set))))
            val_batches.append(_batch_tensors(val_prep, ids, val_cfg, 0, arch, _sample_seed(cfg.seed, 99)))

    best_state = {k: v.clone() for k, v in model.state_dict().items()}
    best_loss, best_epoch, bad_epochs, steps = float("inf"), 0, 0, 0
    history = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng(_sample_seed(cfg.seed, 3, epoch)).permutation(len(train_set))
        run, seen = 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            ids = order[lo:lo + cfg.batch_size].tolist()
            edges, centers, nb, q, y = _batch_tensors(prep, ids, cfg, epoch, arch, cfg.seed)
            opt.zero_grad(set_to_none=True)
            loss = enc.batch_loss(model, edges, centers, nb, q, y)
            loss.backward()
            opt.step()
            steps += 1
            run += float(loss.detach()) * len(ids)
            seen += len(ids)
        train_loss = run / seen
        val_loss = _mean_loss(model, val_prep, cfg, val_batches) if val_batches else train_loss
        row = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
               "seconds": time.perf_counter() - t0}
        history.append(row)
        log.info("epoch %d train %.4f val %.4f", epoch, train_loss, val_loss)
        if on_epoch:
            on_epoch(row)
        if val_loss < best_loss:
            best_loss, best_epoch, bad_epochs = val_loss, epoch, 0
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, history, best_epoch, best_loss, steps)


# -- reconstruction and evaluation -----------------------------------------------

@dataclass
class Reconstruction:
    cloud: PointCloud
    report: SampleReport
    params: ImplicitParams

    @property
    def exhausted(self) -> bool:
        return self.report.exhausted


def reconstruct_params(params: ImplicitParams, cfg: EvalConfig = EvalConfig()) -> Reconstruction:
    cloud, report = sample_gradient(params, cfg.sampler())
    if len(cloud) > cfg.fps_target:
        cloud = cloud.subset(geometry.farthest_point_sample(cloud, cfg.fps_target, 0))
    if report.exhausted:
        log.warning("sampler exhausted: %d of %d points", report.accepted, cfg.sample_count)
    return Reconstruction(cloud, report, params)


def reconstruct(model: Backbone, partial: PointCloud, cfg: EvalConfig = EvalConfig()) -> Reconstruction:
    """Encode the partial cloud, sample the generated MLP and downsample with FPS."""
    return reconstruct_params(enc.predict([partial], model)[0], cfg)


@dataclass
class EvalReport:
    per_sample: List[dict] = field(default_factory=list)
    per_split: Dict[str, float] = field(default_factory=dict)
    exhausted: int = 0
    skipped: int = 0
    wall_time: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def sample_jaccard(prediction: PointCloud, truth: PointCloud, resolution: int = 40) -> float:
    return geometry.jaccard(geometry.voxelize(prediction, resolution, CANONICAL_BOUNDS),
                            geometry.voxelize(truth, resolution, CANONICAL_BOUNDS))


def evaluate(model: Backbone, samples: Sequence[Sample], cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """Voxel Jaccard between reconstruction and ground truth for each sample.

    Failing samples are skipped and counted rather than aborting the run.
    """
    if not samples:
        raise BadArgument("no samples to evaluate")
    report = EvalReport()
    times = []
    for s in samples:
        t0 = time.perf_counter()
        try:
            rec = reconstruct(model, s.partial, cfg)
            j = sample_jaccard(rec.cloud, s.complete, cfg.resolution)
        except Exception as exc:  # noqa: BLE001 - one bad sample must not kill the split
            log.warning("skipping %s: %s", s.meta.get("id"), exc)
            report.skipped += 1
            continue
        dt = time.perf_counter() - t0
        times.append(dt)
        report.exhausted += int(rec.exhausted)
        report.per_sample.append({"id": s.meta.get("id"), "split": s.split, "jaccard": j,
                                  "points": len(rec.cloud), "exhausted": rec.exhausted, "seconds": dt})
    splits = sorted({r["split"] for r in report.per_sample})
    report.per_split = {sp: float(np.mean([r["jaccard"] for r in report.per_sample if r["split"] == sp]))
                        for sp in splits}
    if times:
        report.wall_time = {"mean": float(np.mean(times)), "max": float(np.max(times)), "total": float(np.sum(times))}
    return report


# -- benchmarking --------------------------------------------------------------

BENCH_SCHEMA = {
    "type": "object",
    "required": ["gradient", "grid", "n_points"],
    "properties": {
        "n_points": {"type": "integer", "minimum": 1},
        "gradient": {"$ref": "#/definitions/run"},
        "grid": {"type": "array", "items": {"$ref": "#/definitions/gridrun"}},
    },
    "definitions": {
        "run": {
            "type": "object",
            "required": ["method", "accepted", "function_evals", "gradient_evals", "rounds_used",
                         "exhausted", "working_set", "seconds"],
            "properties": {
                "method": {"type": "string"},
                "accepted": {"type": "integer", "minimum": 0},
                "function_evals": {"type": "integer", "minimum": 0},
                "gradient_evals": {"type": "integer", "minimum": 0},
                "rounds_used": {"type": "integer", "minimum": 0},
                "exhausted": {"type": "boolean"},
                "working_set": {"type": "integer", "minimum": 0},
                "seconds": {"type": "number", "minimum": 0},
                "budget": {"type": "integer", "minimum": 0},
            },
        },
        "gridrun": {
            "allOf": [
                {"$ref": "#/definitions/run"},
                {"type": "object", "required": ["resolution", "evals_match_cube"],
                 "properties": {"resolution": {"type": "integer", "minimum": 1},
                                "evals_match_cube": {"type": "boolean"}}},
            ]
        },
    },
}


def bench_samplers(params: ImplicitParams, resolutions: Sequence[int], cfg: SamplerConfig) -> dict:
    """Accepted points, evaluation counts, working-set size and wall time for
    the gradient sampler and the grid sampler at each resolution."""
    if not resolutions:
        raise BadArgument("need at least one grid resolution")
    t0 = time.perf_counter()
    _, rep = sample_gradient(params, cfg)
    grad = {**rep.to_dict(), "seconds": time.perf_counter() - t0,
            "budget": cfg.n_points * cfg.max_rounds * cfg.steps_per_round}
    grids = []
    for r in resolutions:
        t0 = time.perf_counter()
        _, g = sample_grid(params, int(r), CANONICAL_BOUNDS, cfg.threshold)
        grids.append({**g.to_dict(), "seconds": time.perf_counter() - t0, "resolution": int(r),
                      "evals_match_cube": g.function_evals == int(r) ** 3})
    return {"n_points": cfg.n_points, "gradient": grad, "grid": grids}


def validate_bench(report: dict) -> None:
    import jsonschema

    jsonschema.validate(report, BENCH_SCHEMA)
