"""FastAPI application wrapping the lab.

All heavy endpoints run synchronously: runs at this scale take seconds to
minutes, and synchronous execution keeps the determinism contract simple.
Relative output paths resolve against the ``QUERYDISTILL_OUT_ROOT``
environment variable when it is set.
"""

from __future__ import annotations

import math
import os
from pathlib import Path

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..harness.ablate import ablate
from ..harness.config import (
    ConfigError,
    TrainConfig,
    apply_overrides,
    load_config,
    parse_config,
)
from ..harness.evaluate import evaluate_checkpoint
from ..harness.gradcheck import gradcheck
from ..harness.report import report
from ..harness.train import TrainingAborted, metrics_csv_text, train
from ..synthdata import SceneConfig, generate_scenes, save_scenes
from . import schemas

OUT_ROOT_ENV = "QUERYDISTILL_OUT_ROOT"


def resolve_out_path(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _clean(value: float) -> float | None:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _clean_row(row: dict) -> dict:
    return {key: _clean(value) for key, value in row.items()}


def _assemble_config(
    config_path: str | None, config_text: str | None, overrides: dict
) -> TrainConfig:
    if config_path is not None:
        cfg = load_config(resolve_out_path(config_path))
    elif config_text is not None:
        cfg = parse_config(config_text)
    else:
        cfg = TrainConfig()
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def create_app() -> FastAPI:
    app = FastAPI(title="querydistill lab", version=__version__)

    @app.get("/health", response_model=schemas.HealthResponse)
    def health() -> schemas.HealthResponse:
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/datasets", response_model=schemas.GenerateDataResponse)
    def generate_dataset(req: schemas.GenerateDataRequest) -> schemas.GenerateDataResponse:
        scfg = SceneConfig(
            num_classes=req.num_classes,
            max_objects=req.max_objects,
            size_min=req.size_min,
            size_max=req.size_max,
            max_overlap_iou=req.max_overlap_iou,
        )
        try:
            scenes = generate_scenes(req.seed, req.scenes, scfg, stream=req.stream)
        except RuntimeError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        out = resolve_out_path(req.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_scenes(scenes, out)
        return schemas.GenerateDataResponse(
            path=str(out),
            scenes=len(scenes),
            objects=sum(len(s.objects) for s in scenes),
            seed=req.seed,
        )

    @app.post("/runs", response_model=schemas.TrainResponse)
    def run_training(req: schemas.TrainRequest) -> schemas.TrainResponse:
        try:
            cfg = _assemble_config(req.config_path, req.config_text, req.overrides)
        except (ConfigError, FileNotFoundError) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        out = resolve_out_path(req.out)
        try:
            record = train(cfg, out)
        except TrainingAborted as exc:
            raise HTTPException(status_code=500, detail=str(exc)) from exc
        return schemas.TrainResponse(
            run_dir=str(out),
            seed=record.seed,
            epochs=len(record.metrics),
            wall_clock=record.wall_clock,
            final=schemas.MetricsRow(**{**record.final, **_nan_to_zero(record.final)}),
            checkpoints=record.checkpoints,
            metrics_csv=str(out / "metrics.csv"),
        )

    @app.post("/evaluations", response_model=schemas.EvalResponse)
    def run_evaluation(req: schemas.EvalRequest) -> schemas.EvalResponse:
        try:
            result = evaluate_checkpoint(
                resolve_out_path(req.checkpoint), resolve_out_path(req.data)
            )
        except (FileNotFoundError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        return schemas.EvalResponse(**result)

    @app.post("/ablations", response_model=schemas.AblateResponse)
    def run_ablation(req: schemas.AblateRequest) -> schemas.AblateResponse:
        try:
            base_cfg = _assemble_config(req.config_path, None, req.overrides)
        except (ConfigError, FileNotFoundError) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        out = resolve_out_path(req.out)
        try:
            result = ablate(req.preset, seeds=req.seeds, out_root=out, base=base_cfg)
        except (ConfigError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        return schemas.AblateResponse(
            preset=req.preset,
            out=str(out / req.preset),
            table=result.table_text(),
            rows=[schemas.AblateRow(**row) for row in result.summary_rows()],
        )

    @app.post("/gradchecks", response_model=schemas.GradcheckResponse)
    def run_gradcheck(req: schemas.GradcheckRequest) -> schemas.GradcheckResponse:
        try:
            cfg = _assemble_config(req.config_path, req.config_text, req.overrides)
        except (ConfigError, FileNotFoundError) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        result = gradcheck(cfg, n_params=req.n_params, seed=req.seed)
        return schemas.GradcheckResponse(**result.to_dict())

    @app.post("/reports", response_model=schemas.ReportResponse)
    def run_report(req: schemas.ReportRequest) -> schemas.ReportResponse:
        try:
            result = report([resolve_out_path(r) for r in req.runs])
        except FileNotFoundError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        return schemas.ReportResponse(
            table=result["table"],
            csv=result["csv"],
            rows=[_clean_row(row) for row in result["rows"]],
        )

    return app


def _nan_to_zero(row: dict) -> dict:
    return {
        key: (0.0 if isinstance(value, float) and not math.isfinite(value) else value)
        for key, value in row.items()
    }


app = create_app()
