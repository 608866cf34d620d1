"""Pydantic request/response models for the lab service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class GenerateDataRequest(BaseModel):
    seed: int = 0
    out: str
    scenes: int = 2000
    max_objects: int = 6
    num_classes: int = 5
    size_min: float = 0.08
    size_max: float = 0.5
    max_overlap_iou: float = 0.7
    stream: int = 0


class GenerateDataResponse(BaseModel):
    path: str
    scenes: int
    objects: int
    seed: int


class TrainRequest(BaseModel):
    config_path: str | None = None
    config_text: str | None = None
    overrides: dict = Field(default_factory=dict)
    out: str


class MetricsRow(BaseModel):
    epoch: int
    step: int
    loss_total: float
    loss_mqf: float
    loss_r: float
    loss_pd: float
    loss_aux: float
    instability_online: float
    instability_ema: float
    consistency: float
    ap50: float
    ap: float
    seed: int


class TrainResponse(BaseModel):
    run_dir: str
    seed: int
    epochs: int
    wall_clock: float
    final: MetricsRow
    checkpoints: dict[str, str]
    metrics_csv: str


class EvalRequest(BaseModel):
    checkpoint: str
    data: str


class EvalResponse(BaseModel):
    checkpoint: str
    kind: str
    scenes: int
    ap: float
    ap50: float


class AblateRequest(BaseModel):
    preset: str
    seeds: int = 4
    out: str
    config_path: str | None = None
    overrides: dict = Field(default_factory=dict)


class AblateRow(BaseModel):
    preset: str
    label: str
    seeds: int
    ap_mean: float
    ap_min: float
    ap_max: float
    ap50_mean: float
    ap_per_seed: list[float]


class AblateResponse(BaseModel):
    preset: str
    out: str
    table: str
    rows: list[AblateRow]


class GradcheckRequest(BaseModel):
    config_path: str | None = None
    config_text: str | None = None
    overrides: dict = Field(default_factory=dict)
    n_params: int = 32
    seed: int | None = None


class GradcheckEntryModel(BaseModel):
    parameter: str
    index: int
    analytic: float
    numeric: float
    rel_err: float


class GradcheckResponse(BaseModel):
    loss: float
    n_params: int
    max_rel_err: float
    entries: list[GradcheckEntryModel]


class ReportRequest(BaseModel):
    runs: list[str]


class ReportResponse(BaseModel):
    table: str
    csv: str
    rows: list[dict]


class HealthResponse(BaseModel):
    status: str
    version: str
