"""Command-line client.

Each subcommand builds the service's request model and either runs it
in-process or posts it to a running service (``--server URL``). The
response is printed as JSON on stdout.

``--config`` takes a JSON file with optional sections ``dataset``,
``train``, ``arch``, ``eval`` and ``sampler``; each subcommand reads the
sections it needs. ``--seed`` overrides the seed of those sections.

Exit codes: 0 success, 2 bad arguments, 3 data error, 1 anything else.
"""
from __future__ import annotations

import json
import logging
import sys
from typing import Callable, Optional

import click
from pydantic import BaseModel, ValidationError

from . import __version__
from .service import handlers
from .service.schemas import BenchRequest, DatasetRequest, EvaluateRequest, ReconstructRequest, TrainRequest

EXIT_OK, EXIT_FAILURE, EXIT_BAD_ARGS, EXIT_DATA = 0, 1, 2, 3
SECTIONS = ("dataset", "train", "arch", "eval", "sampler")
ROUTES = {
    DatasetRequest: ("/dataset/generate", handlers.run_dataset),
    TrainRequest: ("/train", handlers.run_train),
    ReconstructRequest: ("/reconstruct", handlers.run_reconstruct),
    EvaluateRequest: ("/evaluate", handlers.run_evaluate),
    BenchRequest: ("/bench", handlers.run_bench),
}


class CliFailure(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise CliFailure(EXIT_BAD_ARGS, f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliFailure(EXIT_BAD_ARGS, f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise CliFailure(EXIT_BAD_ARGS, "config must be a JSON object")
    unknown = set(cfg) - set(SECTIONS)
    if unknown:
        raise CliFailure(EXIT_BAD_ARGS, f"unknown config sections: {sorted(unknown)}")
    for name, section in cfg.items():
        if not isinstance(section, dict):
            raise CliFailure(EXIT_BAD_ARGS, f"config section {name!r} must be an object")
    return cfg


def _build(model: type, **fields) -> BaseModel:
    try:
        return model(**fields)
    except ValidationError as exc:
        raise CliFailure(EXIT_BAD_ARGS, str(exc)) from exc


def _remote(server: str, path: str, req: BaseModel) -> dict:
    import httpx

    try:
        resp = httpx.post(server.rstrip("/") + path, json=req.model_dump(), timeout=None)
    except httpx.HTTPError as exc:
        raise CliFailure(EXIT_FAILURE, f"cannot reach {server}: {exc}") from exc
    if resp.status_code == 200:
        return resp.json()
    try:
        body = resp.json()
    except ValueError:
        body = {"kind": "internal", "detail": resp.text}
    code = {handlers.BAD_ARGUMENT: EXIT_BAD_ARGS, handlers.DATA_ERROR: EXIT_DATA}.get(body.get("kind"), EXIT_FAILURE)
    raise CliFailure(code, f"server error {resp.status_code}: {body.get('detail')}")


def _local(run: Callable, req: BaseModel) -> dict:
    try:
        return run(req).model_dump()
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        kind = handlers.classify(exc)
        if kind == handlers.BAD_ARGUMENT:
            raise CliFailure(EXIT_BAD_ARGS, str(exc)) from exc
        if kind == handlers.DATA_ERROR:
            raise CliFailure(EXIT_DATA, str(exc)) from exc
        raise


def dispatch(req: BaseModel, server: Optional[str]) -> dict:
    path, run = ROUTES[type(req)]
    return _remote(server, path, req) if server else _local(run, req)


def _emit(result: dict) -> None:
    click.echo(json.dumps(result, indent=2, sort_keys=True))


def common(f):
    f = click.option("--server", default=None, metavar="URL", help="Send the request to a running service.")(f)
    f = click.option("--config", "config_path", default=None, metavar="JSON", help="JSON config file.")(f)
    f = click.option("--seed", type=int, default=None, help="Seed overriding the config.")(f)
    return f


def _run(build: Callable[[dict], BaseModel], config_path, server) -> None:
    try:
        req = build(_load_config(config_path))
        _emit(dispatch(req, server))
    except CliFailure as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(exc.code)


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Point-cloud shape completion with hypernetwork-generated occupancy functions."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


@main.group()
def dataset() -> None:
    """Procedural dataset tools."""


@dataset.command("gen")
@click.option("--out", required=True, help="Output directory.")
@click.option("--ascii", "ascii_", is_flag=True, help="Write ASCII PLY files.")
@common
def dataset_gen(out, ascii_, seed, config_path, server):
    """Generate a procedural dataset of (partial, complete) pairs."""
    _run(lambda cfg: _build(DatasetRequest, out_dir=out, dataset=cfg.get("dataset", {}), seed=seed, ascii=ascii_),
         config_path, server)


@main.command()
@click.option("--data", "data_dir", required=True, help="Dataset directory.")
@click.option("--out", required=True, help="Checkpoint path to write.")
@click.option("--curve", default=None, help="Optional CSV path for the training curve.")
@common
def train(data_dir, out, curve, seed, config_path, server):
    """Train the encoder on a dataset directory."""
    _run(lambda cfg: _build(TrainRequest, dataset_dir=data_dir, checkpoint=out, train=cfg.get("train", {}),
                            arch=cfg.get("arch", {}), seed=seed, curve=curve),
         config_path, server)


@main.command()
@click.option("--checkpoint", required=True)
@click.option("--input", "partial", required=True, help="Partial cloud (PLY).")
@click.option("--out", default=None, help="Write the completed cloud here (PLY).")
@click.option("--ascii", "ascii_", is_flag=True, help="Write ASCII PLY.")
@common
def reconstruct(checkpoint, partial, out, ascii_, seed, config_path, server):
    """Complete one partial cloud."""
    _run(lambda cfg: _build(ReconstructRequest, checkpoint=checkpoint, partial=partial, out=out,
                            eval=cfg.get("eval", {}), seed=seed, ascii=ascii_),
         config_path, server)


@main.command()
@click.option("--checkpoint", required=True)
@click.option("--data", "data_dir", required=True, help="Dataset directory.")
@click.option("--split", "splits", multiple=True, default=("holdout-views",), show_default=True)
@click.option("--limit", type=int, default=None, help="Evaluate at most this many samples.")
@common
def evaluate(checkpoint, data_dir, splits, limit, seed, config_path, server):
    """Voxel Jaccard of reconstructions against ground truth."""
    _run(lambda cfg: _build(EvaluateRequest, checkpoint=checkpoint, dataset_dir=data_dir, splits=list(splits),
                            eval=cfg.get("eval", {}), seed=seed, limit=limit),
         config_path, server)


@main.command()
@click.option("--params", default=None, help="Serialized implicit function.")
@click.option("--checkpoint", default=None)
@click.option("--input", "partial", default=None, help="Partial cloud (PLY) used with --checkpoint.")
@click.option("--resolution", "resolutions", type=int, multiple=True, default=(20, 40, 80), show_default=True)
@common
def bench(params, checkpoint, partial, resolutions, seed, config_path, server):
    """Compare gradient-sampler and grid-sampler evaluation counts."""
    _run(lambda cfg: _build(BenchRequest, params=params, checkpoint=checkpoint, partial=partial,
                            resolutions=list(resolutions), sampler=cfg.get("sampler", {}), seed=seed),
         config_path, server)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    uvicorn.run("hypershape.service.app:app", host=host, port=port)


if __name__ == "__main__":
    main()
