"""Request and response models shared by the HTTP service and the CLI.

Config sections are plain dicts whose keys are the fields of the matching
config dataclass (``DatasetConfig``, ``TrainConfig``, ``EncoderArch``,
``EvalConfig``, ``SamplerConfig``); unknown keys are rejected when the
request is executed. A request-level ``seed`` overrides the section's own.
"""
from __future__ import annotations

from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field, model_validator


class DatasetRequest(BaseModel):
    out_dir: str
    dataset: Dict[str, Any] = Field(default_factory=dict)
    seed: Optional[int] = None
    ascii: bool = False


class DatasetResponse(BaseModel):
    out_dir: str
    samples: int
    splits: Dict[str, int]
    seconds: float


class TrainRequest(BaseModel):
    dataset_dir: str
    checkpoint: str
    train: Dict[str, Any] = Field(default_factory=dict)
    arch: Dict[str, Any] = Field(default_factory=dict)
    seed: Optional[int] = None
    curve: Optional[str] = None


class TrainResponse(BaseModel):
    checkpoint: str
    best_epoch: int
    best_val_loss: float
    epochs_run: int
    steps: int
    seconds: float
    history: List[Dict[str, float]]


class ReconstructRequest(BaseModel):
    checkpoint: str
    partial: str
    out: Optional[str] = None
    eval: Dict[str, Any] = Field(default_factory=dict)
    seed: Optional[int] = None
    ascii: bool = False


class ReconstructResponse(BaseModel):
    points: int
    exhausted: bool
    report: Dict[str, Any]
    out: Optional[str] = None
    seconds: float


class EvaluateRequest(BaseModel):
    checkpoint: str
    dataset_dir: str
    splits: List[str] = Field(default_factory=lambda: ["holdout-views"])
    eval: Dict[str, Any] = Field(default_factory=dict)
    seed: Optional[int] = None
    limit: Optional[int] = Field(default=None, ge=1)


class EvaluateResponse(BaseModel):
    per_split: Dict[str, float]
    per_sample: List[Dict[str, Any]]
    exhausted: int
    skipped: int
    wall_time: Dict[str, float]


class BenchRequest(BaseModel):
    """Benchmark either a serialized implicit function (``params``) or the
    function a checkpoint generates for a partial cloud."""

    params: Optional[str] = None
    checkpoint: Optional[str] = None
    partial: Optional[str] = None
    resolutions: List[int] = Field(default_factory=lambda: [20, 40, 80])
    sampler: Dict[str, Any] = Field(default_factory=dict)
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.params is None) == (self.checkpoint is None):
            raise ValueError("give exactly one of params or checkpoint")
        if self.checkpoint is not None and self.partial is None:
            raise ValueError("checkpoint needs a partial cloud")
        if not self.resolutions or min(self.resolutions) < 1:
            raise ValueError("resolutions must be a non-empty list of positive integers")
        return self


class BenchResponse(BaseModel):
    report: Dict[str, Any]


class ErrorResponse(BaseModel):
    kind: str
    detail: str
