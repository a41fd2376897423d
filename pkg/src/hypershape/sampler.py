"""Extract confidence-annotated point clouds from an occupancy MLP.

``sample_gradient`` moves a working set of Gaussian candidates downhill on
``-log g(x)`` and copies every candidate whose confidence exceeds the
threshold into the output. ``sample_grid`` is the brute-force baseline that
tests every cell center of a regular grid.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import geometry
from .errors import BadArgument
from .geometry import CANONICAL_BOUNDS, PointCloud
from .implicit_fn import ImplicitParams, forward, input_gradient

GRID_CHUNK = 65536


@dataclass(frozen=True)
class SamplerConfig:
    n_points: int = 100_000
    step: float = 0.1
    steps_per_round: int = 20
    threshold: float = 0.85
    init_std: float = 0.1
    max_rounds: int = 50
    seed: int = 0
    # False keeps accepted candidates descending instead of re-drawing them
    reinit_accepted: bool = True
    box: float = 1.0
    # cap on the length of one update; None applies the raw gradient step
    max_step: Optional[float] = None

    def __post_init__(self):
        if self.n_points < 1:
            raise BadArgument("n_points must be >= 1")
        if not self.step > 0:
            raise BadArgument("step must be positive")
        if not 0.0 < self.threshold < 1.0:
            raise BadArgument("threshold must lie in (0, 1)")
        if not self.init_std > 0:
            raise BadArgument("init_std must be positive")
        if self.steps_per_round < 1 or self.max_rounds < 1:
            raise BadArgument("steps_per_round and max_rounds must be >= 1")
        if self.max_step is not None and not self.max_step > 0:
            raise BadArgument("max_step must be positive")


@dataclass
class SampleReport:
    method: str
    accepted: int = 0
    function_evals: int = 0
    gradient_evals: int = 0
    rounds_used: int = 0
    exhausted: bool = False
    working_set: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _draw(seed: int, kind: int, counter: int, n: int, std: float) -> np.ndarray:
    # one stream per (seed, kind, counter); slots consume it in index order
    return np.random.default_rng([seed, kind, counter]).normal(0.0, std, size=(n, 3))


def sample_gradient(params: ImplicitParams, cfg: SamplerConfig = SamplerConfig()):
    """Gradient-descent sampler.

    Runs in rounds of ``steps_per_round`` steps. Each step evaluates every
    candidate, accepts those above ``threshold`` (up to ``n_points`` in
    total), then moves all candidates by ``-step * grad``. Accepted
    candidates and those leaving the ``[-box, box]^3`` cube are re-drawn;
    at each round boundary, candidates not accepted during the round are
    re-drawn too. Stops as soon as the output is full or after
    ``max_rounds`` rounds.
    """
    n = cfg.n_points
    report = SampleReport("gradient", working_set=n)
    cand = _draw(cfg.seed, 0, 0, n, cfg.init_std)
    out_pts, out_conf = [], []
    total = 0
    hit_this_round = np.zeros(n, dtype=bool)
    step_id = 0

    for rnd in range(cfg.max_rounds):
        report.rounds_used = rnd + 1
        if rnd > 0:
            stale = ~hit_this_round
            if stale.any():
                cand[stale] = _draw(cfg.seed, 1, rnd, int(stale.sum()), cfg.init_std)
            hit_this_round[:] = False
        for _ in range(cfg.steps_per_round):
            step_id += 1
            conf, grad = input_gradient(params, cand)
            report.function_evals += n
            report.gradient_evals += n
            acc = np.flatnonzero(conf > cfg.threshold)
            if acc.size:
                take = acc[: n - total]
                out_pts.append(cand[take].copy())
                out_conf.append(conf[take])
                total += take.size
                hit_this_round[acc] = True
            if total >= n:
                break
            move = cfg.step * grad
            if cfg.max_step is not None:
                length = np.linalg.norm(move, axis=1, keepdims=True)
                move *= np.minimum(1.0, cfg.max_step / np.maximum(length, 1e-300))
            cand -= move
            redraw = np.any(np.abs(cand) > cfg.box, axis=1)
            if cfg.reinit_accepted and acc.size:
                redraw[acc] = True
            if redraw.any():
                cand[redraw] = _draw(cfg.seed, 0, step_id, int(redraw.sum()), cfg.init_std)
        if total >= n:
            break

    report.accepted = total
    report.exhausted = total < n
    if out_pts:
        cloud = PointCloud(np.concatenate(out_pts), np.concatenate(out_conf))
    else:
        cloud = PointCloud(np.zeros((0, 3)), np.zeros(0))
    return cloud, report


def sample_grid(params: ImplicitParams, resolution: int, bounds=CANONICAL_BOUNDS, threshold: float = 0.85):
    """Evaluate every cell center of a ``resolution**3`` grid and keep those
    above ``threshold``."""
    centers = geometry.cell_centers(resolution, bounds)
    conf = np.empty(len(centers))
    for lo in range(0, len(centers), GRID_CHUNK):
        conf[lo:lo + GRID_CHUNK] = forward(params, centers[lo:lo + GRID_CHUNK])
    keep = conf > threshold
    report = SampleReport(
        "grid",
        accepted=int(keep.sum()),
        function_evals=len(centers),
        rounds_used=1,
        working_set=len(centers),
    )
    return PointCloud(centers[keep], conf[keep]), report
