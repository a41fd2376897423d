"""Acceptance checks, one per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (the lines are repeated in
the terminal summary) or directly with ``python tests/test_acceptance.py``.

Criteria 7 and 8 train the desk-scale model. The trained checkpoint is
cached under ``$HYPERSHAPE_ACCEPTANCE_CACHE`` (default ``.acceptance/`` in
the repository) keyed by a hash of the package sources and the recipe, so
a rerun with unchanged code reuses it and any code change retrains.
"""
from __future__ import annotations

import hashlib
import json
import os
import sys
import time
from dataclasses import asdict
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
import oracles  # noqa: E402

from hypershape import data, geometry, pipeline  # noqa: E402
from hypershape import encoder as enc  # noqa: E402
from hypershape import implicit_fn as imp  # noqa: E402
from hypershape.data import DatasetConfig, Sample, ShapeSpec, ViewSpec  # noqa: E402
from hypershape.encoder import EncoderArch  # noqa: E402
from hypershape.geometry import PointCloud  # noqa: E402
from hypershape.implicit_fn import ImplicitParams, MlpArch  # noqa: E402
from hypershape.pipeline import EvalConfig, TrainConfig  # noqa: E402
from hypershape.sampler import SamplerConfig, sample_gradient, sample_grid  # noqa: E402

# pinned tolerances
GRAD_FD_H = 1e-5
GRAD_REL_TOL = 1e-4
GRAD_RUNTIME_S = 5.0
BACKBONE_FD_H = 1e-4
BACKBONE_REL_TOL = 1e-3
BACKBONE_RUNTIME_S = 60.0
JACCARD_TOL = 1e-12
DESK_MIN_JACCARD = 0.50
DESK_RUNTIME_S = 2 * 3600
GRID_80_EVALS = 80 ** 3
FPS_TARGET = 16384
BALL_RADIUS = 0.3
BALL_DIST = 0.05
BALL_MIN_FRACTION = 0.90
BALL_RUNTIME_S = 600.0

# desk-scale recipe (criteria 7 and 8)
DESK_DATA = DatasetConfig(families=("sphere", "box", "cylinder"), instances=20, views=8, seed=0)
DESK_ARCH = EncoderArch()
DESK_TRAIN = TrainConfig(lr=1e-4, epochs=600, patience=30, seed=0)
# 5 sampler rounds instead of 50: inputs whose field never clears tau otherwise cost
# 100M evaluations each; a round cap can only lower the measured Jaccard
DESK_EVAL = EvalConfig(max_rounds=5)

# single-ball overfit recipe (criteria 3 and 9)
BALL_ARCH = EncoderArch()
BALL_TRAIN = TrainConfig(lr=3e-4, epochs=4000, batch_size=1, patience=4000, seed=0)

RESULTS: list = []


def record(criterion: int, title: str, passed: bool, detail: str) -> bool:
    line = f"{'PASS' if passed else 'FAIL'}  criterion {criterion}: {title} -- {detail}"
    RESULTS.append(line)
    print(line, flush=True)
    return passed


def kink_distance(params: ImplicitParams, x) -> float:
    h, m = np.asarray(x, dtype=float), np.inf
    for layer in params.layers[:-1]:
        z = layer.weight @ h * layer.scale + layer.bias
        m = min(m, float(np.abs(z).min()))
        h = np.where(z >= 0, z, params.arch.leaky_slope * z)
    return m


# -- criterion 1 -----------------------------------------------------------------

def check_implicit_gradient() -> bool:
    t0 = time.perf_counter()
    r = np.random.default_rng(2024)
    errs, skipped = [], 0
    while len(errs) < 100:
        p = ImplicitParams.random(seed=int(r.integers(2**31)), std=float(r.uniform(0.5, 2.0)))
        x = r.uniform(-0.6, 0.6, size=3)
        if kink_distance(p, x) < 1e-4:
            skipped += 1
            continue
        _, g = imp.input_gradient(p, x)
        fd = oracles.central_diff(lambda y: float(imp.bce_to_one(p, y)[0]), x, GRAD_FD_H)
        errs.append(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))
    dt = time.perf_counter() - t0
    worst = max(errs)
    return record(1, "implicit-function input gradients vs central differences",
                  worst <= GRAD_REL_TOL and dt < GRAD_RUNTIME_S,
                  f"100 probes ({skipped} kink-adjacent skipped), max rel err {worst:.2e} <= {GRAD_REL_TOL:g}, "
                  f"{dt:.2f} s < {GRAD_RUNTIME_S:g} s")


# -- criterion 2 -----------------------------------------------------------------

TOY = EncoderArch(n_proxies=6, proxy_knn=4, embed_dim=8, n_heads=2, depth=2, geo_knn=2,
                  target_arch=MlpArch((3, 4, 1)))


def check_backbone_gradient() -> bool:
    t0 = time.perf_counter()
    worst = 0.0
    for seed in (0, 1, 2):
        model = enc.Backbone(TOY, seed=seed).double()
        r = np.random.default_rng(100 + seed)
        cloud = PointCloud(r.uniform(-0.5, 0.5, size=(120, 3)))
        qb = data.make_query_batch(cloud, 60, seed=seed)
        _, grads = enc.backward(cloud, qb, model)
        named = dict(model.named_parameters())
        names = sorted(named)
        for _ in range(20):
            name = names[r.integers(len(names))]
            flat = named[name].data.view(-1)
            j = int(r.integers(flat.numel()))
            old = float(flat[j])
            flat[j] = old + BACKBONE_FD_H
            lp, _ = enc.backward(cloud, qb, model)
            flat[j] = old - BACKBONE_FD_H
            lm, _ = enc.backward(cloud, qb, model)
            flat[j] = old
            fd = (lp - lm) / (2 * BACKBONE_FD_H)
            an = float(grads[name].ravel()[j])
            worst = max(worst, abs(an - fd) / max(abs(fd), abs(an), 1e-8))
    dt = time.perf_counter() - t0
    return record(2, "backbone parameter gradients vs central differences",
                  worst <= BACKBONE_REL_TOL and dt < BACKBONE_RUNTIME_S,
                  f"3 seeds x 20 params, max rel err {worst:.2e} <= {BACKBONE_REL_TOL:g}, "
                  f"{dt:.1f} s < {BACKBONE_RUNTIME_S:g} s")


# -- shared trained models ---------------------------------------------------------

def ball_sample() -> Sample:
    """A centered sphere of radius 0.3 and its upper-hemisphere partial view."""
    unit = data.make_shape(ShapeSpec("sphere", {"radius": 1.0}), 20000, seed=0)
    complete = PointCloud(unit.points * (BALL_RADIUS / 0.5))
    partial = data.partial_view(complete, ViewSpec(direction=(0, 0, 1)))
    return Sample(partial, complete, {"id": "ball", "split": "train"})


@lru_cache(maxsize=None)
def ball_model():
    t0 = time.perf_counter()
    res = pipeline.train([ball_sample()], BALL_ARCH, BALL_TRAIN)
    return res, time.perf_counter() - t0


def _source_hash(*parts) -> str:
    h = hashlib.sha256()
    src = Path(pipeline.__file__).parent
    for f in sorted(src.rglob("*.py")):
        h.update(f.read_bytes())
    for part in parts:
        h.update(json.dumps(part, sort_keys=True, default=str).encode())
    return h.hexdigest()[:16]


def cache_dir() -> Path:
    default = Path(__file__).resolve().parents[1] / ".acceptance"
    return Path(os.environ.get("HYPERSHAPE_ACCEPTANCE_CACHE", default))


@lru_cache(maxsize=None)
def desk_dataset():
    return data.generate_dataset(DESK_DATA)


@lru_cache(maxsize=None)
def desk_model():
    """Train (or reload) the criterion-7 checkpoint; returns (model, meta)."""
    key = _source_hash(asdict(DESK_DATA), DESK_ARCH.to_dict(), asdict(DESK_TRAIN))
    path = cache_dir() / f"desk-{key}.ckpt"
    if path.exists():
        return enc.load_checkpoint(path)
    t0 = time.perf_counter()
    samples = desk_dataset()
    gen_s = time.perf_counter() - t0
    res = pipeline.train(samples, DESK_ARCH, DESK_TRAIN)
    meta = {"best_epoch": res.best_epoch, "best_val_loss": res.best_val_loss, "epochs_run": len(res.history),
            "generate_seconds": gen_s, "train_seconds": time.perf_counter() - t0 - gen_s}
    path.parent.mkdir(parents=True, exist_ok=True)
    enc.save_checkpoint(path, res.model, meta)
    res.write_curve(path.with_suffix(".csv"))
    return enc.load_checkpoint(path)


# -- criterion 3 -----------------------------------------------------------------

def _sound(params: ImplicitParams, cfg: SamplerConfig, resolution: int) -> tuple:
    a, ra = sample_gradient(params, cfg)
    b, rb = sample_gradient(params, cfg)
    g, _ = sample_grid(params, resolution, threshold=cfg.threshold)
    g2, _ = sample_grid(params, resolution, threshold=cfg.threshold)
    sound = all(len(c) == 0 or bool(np.all(imp.forward(params, c.points) > cfg.threshold)) for c in (a, g))
    same = (np.array_equal(a.points, b.points) and np.array_equal(a.confidence, b.confidence) and ra == rb
            and np.array_equal(g.points, g2.points))
    return sound, same, len(a) + len(g)


def check_sampler_soundness() -> bool:
    r = np.random.default_rng(7)
    sound, same, points = True, True, 0
    for i in range(10):
        p = ImplicitParams.random(seed=int(r.integers(2**31)), std=float(r.uniform(1.0, 4.0)))
        cfg = SamplerConfig(n_points=500, threshold=float(r.uniform(0.3, 0.9)), max_rounds=3, seed=i)
        s, d, n = _sound(p, cfg, 24)
        sound, same, points = sound and s, same and d, points + n
    res, _ = ball_model()
    trained = enc.predict([ball_sample().partial], res.model)[0]
    s, d, n = _sound(trained, DESK_EVAL.sampler(4000), 40)
    sound, same, points = sound and s, same and d, points + n
    return record(3, "sampler soundness and determinism", sound and same and points > 0,
                  f"10 random draws + 1 trained checkpoint, {points} returned points all re-evaluate > tau: {sound}; "
                  f"repeated seeded runs bit-identical: {same}")


# -- criterion 4 -----------------------------------------------------------------

def check_budget() -> bool:
    r = np.random.default_rng(11)
    within = True
    for i in range(10):
        p = ImplicitParams.random(seed=int(r.integers(2**31)), std=3.0)
        cfg = SamplerConfig(n_points=200, threshold=0.9, max_rounds=int(r.integers(1, 5)),
                            steps_per_round=int(r.integers(1, 10)), seed=i)
        _, rep = sample_gradient(p, cfg)
        within &= rep.function_evals <= cfg.n_points * cfg.max_rounds * cfg.steps_per_round
    flat = ImplicitParams.from_arrays([([[0.0, 0.0, 0.0]], [-10.0], [1.0])], MlpArch((3, 1)))
    cfg = SamplerConfig(n_points=300, max_rounds=4, steps_per_round=5)
    cloud, rep = sample_gradient(flat, cfg)
    budget = cfg.n_points * cfg.max_rounds * cfg.steps_per_round
    ok = within and rep.exhausted and rep.accepted == 0 and len(cloud) == 0 and rep.function_evals <= budget
    return record(4, "termination and evaluation budget", ok,
                  f"10 random runs within N*max_rounds*I: {within}; empty field exhausted={rep.exhausted} "
                  f"after {rep.function_evals} <= {budget} evals")


# -- criterion 5 -----------------------------------------------------------------

def check_oracles() -> bool:
    r = np.random.default_rng(5)
    fails = {"fps": 0, "knn": 0, "voxelize": 0, "jaccard": 0}
    lo, hi = geometry.CANONICAL_BOUNDS
    for _ in range(50):
        n = int(r.integers(2, 201))
        pts = r.uniform(-0.6, 0.6, size=(n, 3))
        k = int(r.integers(1, n + 1))
        start = int(r.integers(n))
        fails["fps"] += geometry.farthest_point_sample(pts, k, start).tolist() != oracles.fps(pts, k, start)
        q = r.uniform(-0.6, 0.6, size=3)
        fails["knn"] += geometry.knn(pts, q, k).tolist() != oracles.knn(pts, q, k)
        res = int(r.integers(1, 20))
        g = geometry.voxelize(pts, res)
        cells, dropped = oracles.voxel_cells(pts, res, lo, hi)
        fails["voxelize"] += set(map(tuple, g.occupied_cells().tolist())) != cells or g.dropped != dropped
        other = r.uniform(-0.6, 0.6, size=(int(r.integers(1, 201)), 3))
        h = geometry.voxelize(other, res)
        ref = oracles.jaccard_sets(cells, oracles.voxel_cells(other, res, lo, hi)[0])
        fails["jaccard"] += abs(geometry.jaccard(g, h) - ref) > JACCARD_TOL
    return record(5, "FPS / knn / voxelize / Jaccard vs brute force", not any(fails.values()),
                  f"50 instances of <= 200 points, mismatches {fails}")


# -- criterion 6 -----------------------------------------------------------------

def check_query_batch() -> bool:
    gt = data.make_shape(ShapeSpec("box", {"x": 1.0, "y": 0.7, "z": 0.4}), 3000, seed=1)
    qb = data.make_query_batch(gt, 1000, seed=4)
    counts = qb.counts()
    ref = [tuple(p) for p in gt.points]
    wrong = 0
    for p, label, tag in zip(qb.points, qb.labels, qb.provenance):
        expected = 1.0 if tag == "surface" else float(oracles.nearest_dist(tuple(p), ref) <= 0.01)
        wrong += label != expected
    ok = counts == {"surface": 500, "perturbed": 400, "uniform": 100} and wrong == 0
    return record(6, "query-batch composition and labels", ok,
                  f"n=1000 composition {counts}, {wrong} labels disagree with brute-force NN thresholding")


# -- criterion 7 -----------------------------------------------------------------

@lru_cache(maxsize=None)
def desk_evaluation():
    t0 = time.perf_counter()
    model, meta = desk_model()
    held = data.by_split(desk_dataset(), "holdout-views")
    rep = pipeline.evaluate(model, held, DESK_EVAL)
    return rep, meta, time.perf_counter() - t0


def check_desk_scale() -> bool:
    rep, meta, eval_s = desk_evaluation()
    mean = rep.per_split.get("holdout-views", 0.0)
    runtime = meta.get("generate_seconds", 0.0) + meta.get("train_seconds", 0.0) + eval_s
    per_family = {}
    for row in rep.per_sample:
        per_family.setdefault(row["id"].split("-")[0], []).append(row["jaccard"])
    fam = ", ".join(f"{k} {np.mean(v):.3f}" for k, v in sorted(per_family.items()))
    return record(7, "desk-scale held-out-view Jaccard at 40^3", mean >= DESK_MIN_JACCARD,
                  f"mean {mean:.4f} >= {DESK_MIN_JACCARD} over {len(rep.per_sample)} views ({fam}); "
                  f"best epoch {meta.get('best_epoch')} of {meta.get('epochs_run')}, "
                  f"train+eval {runtime / 60:.1f} min (target < {DESK_RUNTIME_S / 3600:g} h), "
                  f"{rep.exhausted} exhausted, {rep.skipped} skipped")


# -- criterion 8 -----------------------------------------------------------------

def check_scaling() -> bool:
    model, _ = desk_model()
    held = data.by_split(desk_dataset(), "holdout-views")
    cfg = DESK_EVAL.sampler(FPS_TARGET)
    rows, grid_ok = [], True
    for s in held[:: max(1, len(held) // 6)]:
        params = enc.predict([s.partial], model)[0]
        rep = pipeline.bench_samplers(params, [20, 40, 80], cfg)
        pipeline.validate_bench(rep)
        grid_ok &= [g["function_evals"] for g in rep["grid"]] == [8000, 64000, 512000]
        g = rep["gradient"]
        rows.append((s.meta["id"], g["accepted"] == FPS_TARGET and g["function_evals"] < GRID_80_EVALS,
                     g["accepted"], g["function_evals"]))
    ok = grid_ok and all(r[1] for r in rows)
    per = "; ".join(f"{i} {n} pts/{e} evals" for i, _, n, e in rows)
    return record(8, "gradient sampler vs 80^3 grid evaluation count", ok,
                  f"grid evals exactly R^3 for R in (20,40,80): {grid_ok}; {sum(r[1] for r in rows)}/{len(rows)} "
                  f"held-out inputs reach {FPS_TARGET} points in < {GRID_80_EVALS} evals ({per})")


# -- criterion 9 -----------------------------------------------------------------

def check_ball_overfit() -> bool:
    res, train_s = ball_model()
    t0 = time.perf_counter()
    rec = pipeline.reconstruct(res.model, ball_sample().partial, DESK_EVAL)
    dt = train_s + time.perf_counter() - t0
    dist = np.maximum(np.linalg.norm(rec.cloud.points, axis=1) - BALL_RADIUS, 0.0)
    frac = float(np.mean(dist <= BALL_DIST)) if len(dist) else 0.0
    return record(9, "overfit ball reconstruction", frac >= BALL_MIN_FRACTION and dt < BALL_RUNTIME_S,
                  f"{frac:.1%} of {len(dist)} points within {BALL_DIST} of the r={BALL_RADIUS} ball "
                  f"(>= {BALL_MIN_FRACTION:.0%}), final train BCE {res.history[-1]['train_loss']:.3f}, "
                  f"{dt:.0f} s < {BALL_RUNTIME_S:g} s")


CHECKS = [check_implicit_gradient, check_backbone_gradient, check_sampler_soundness, check_budget,
          check_oracles, check_query_batch, check_desk_scale, check_scaling, check_ball_overfit]


TRAINS = {check_sampler_soundness, check_desk_scale, check_scaling, check_ball_overfit}


@pytest.mark.parametrize("check", [
    pytest.param(c, id=f"criterion_{i + 1}", marks=[pytest.mark.slow] if c in TRAINS else [])
    for i, c in enumerate(CHECKS)
])
def test_criterion(check):
    torch.set_num_threads(1)
    assert check()


def main() -> int:
    torch.set_num_threads(1)
    ok = True
    for check in CHECKS:
        ok &= check()
    print("\n".join(["", "summary:"] + RESULTS))
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
