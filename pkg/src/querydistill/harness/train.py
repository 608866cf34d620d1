"""The training loop: per step a student forward, an optional teacher
forward plus distillation, one optimizer step and one EMA update; per epoch
validation snapshots, a metrics row and checkpoints.

Reference mode pins torch to a single thread so that two runs of the same
config and seed produce bitwise-identical metrics CSVs.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .. import metrics as metrics_mod
from ..ema import EmaState, ema_init, ema_update
from ..matching import CostWeights, batched_cost_matrices, solve_batch
from ..network import Detector, save_checkpoint
from ..synthdata import FeatureEmbedder, Scene, SceneConfig, generate_scenes, load_scenes
from .config import TrainConfig
from .step import cost_weights_from, gts_to_tensors, run_training_step

METRIC_COLUMNS = [
    "epoch",
    "step",
    "loss_total",
    "loss_mqf",
    "loss_r",
    "loss_pd",
    "loss_aux",
    "instability_online",
    "instability_ema",
    "consistency",
    "ap50",
    "ap",
    "seed",
]

_SHUFFLE_SALT = 0xBA7C4


class TrainingAborted(RuntimeError):
    pass


@dataclass
class RunRecord:
    config: dict
    metrics: list[dict]
    seed: int
    wall_clock: float
    run_dir: str | None = None
    checkpoints: dict = field(default_factory=dict)

    @property
    def final(self) -> dict:
        return self.metrics[-1] if self.metrics else {}

    def metric_series(self, key: str) -> list[float]:
        return [row[key] for row in self.metrics]


def set_reference_mode() -> None:
    torch.set_num_threads(1)


def make_optimizer(student: Detector, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.schedule.optimizer == "sgd":
        return torch.optim.SGD(
            student.parameters(),
            lr=cfg.schedule.lr,
            momentum=cfg.schedule.momentum,
            weight_decay=cfg.schedule.weight_decay,
        )
    return torch.optim.Adam(
        student.parameters(), lr=cfg.schedule.lr, weight_decay=cfg.schedule.weight_decay
    )


def scene_config_from(cfg: TrainConfig) -> SceneConfig:
    d = cfg.data
    return SceneConfig(
        num_classes=cfg.model.num_classes,
        max_objects=d.max_objects,
        grid_size=cfg.model.grid_size,
        d_model=cfg.model.d_model,
        noise_sigma=d.noise_sigma,
        size_min=d.size_min,
        size_max=d.size_max,
        max_overlap_iou=d.max_overlap_iou,
    )


def load_or_generate_data(cfg: TrainConfig) -> tuple[list[Scene], list[Scene], FeatureEmbedder]:
    scfg = scene_config_from(cfg)
    d = cfg.data
    train = load_scenes(d.train_file) if d.train_file else generate_scenes(
        d.seed, d.train_scenes, scfg, stream=0
    )
    val = load_scenes(d.val_file) if d.val_file else generate_scenes(
        d.seed, d.val_scenes, scfg, stream=1
    )
    return train, val, FeatureEmbedder(d.seed, scfg)


def render_features(
    embedder: FeatureEmbedder, scenes: list[Scene], dtype: torch.dtype = torch.float64
) -> torch.Tensor:
    return torch.from_numpy(embedder.render_batch(scenes)).to(dtype)


def detections_for_ap(
    boxes: np.ndarray, scores: np.ndarray
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Expand [S, N, 4] boxes and [S, N, C] scores into per-scene detection
    triples (every query/class pair is one detection)."""
    s, n, c = scores.shape
    out = []
    classes = np.tile(np.arange(c), n)
    for b in range(s):
        out.append((np.repeat(boxes[b], c, axis=0), scores[b].ravel(), classes))
    return out


def evaluate_detector(
    model: Detector,
    feats: torch.Tensor,
    scenes: list[Scene],
    weights: CostWeights,
    chunk: int = 64,
) -> tuple[metrics_mod.MatchSnapshot, list, list]:
    """Final-stage predictions of a fixed model over a scene list: the match
    snapshot (per GT, matched query index) plus AP inputs."""
    assigns: list[np.ndarray] = []
    preds = []
    gts = []
    with torch.no_grad():
        for start in range(0, len(scenes), chunk):
            batch_scenes = scenes[start : start + chunk]
            out = model(feats[start : start + chunk])[-1]
            gt_boxes, gt_classes, gt_counts = gts_to_tensors(batch_scenes)
            cost = batched_cost_matrices(
                out.boxes, out.scores, gt_boxes, gt_classes, gt_counts, weights
            )
            q_to_g = solve_batch(cost, gt_counts)
            for b, scene in enumerate(batch_scenes):
                m = len(scene.objects)
                gt_to_q = np.full(m, -1, dtype=np.int64)
                for q, g in enumerate(q_to_g[b]):
                    if g >= 0:
                        gt_to_q[g] = q
                assigns.append(gt_to_q)
                gts.append(
                    (
                        gt_boxes[b, :m].cpu().numpy(),
                        gt_classes[b, :m].cpu().numpy(),
                    )
                )
            preds.extend(
                detections_for_ap(out.boxes.cpu().numpy(), out.scores.cpu().numpy())
            )
    return metrics_mod.MatchSnapshot.from_assignments(assigns), preds, gts


def _format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_csv_text(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for row in rows:
        writer.writerow([_format_value(row[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


DIAGNOSTIC_COLUMNS = [
    "step",
    "two_class_queries",
    "teacher_primary_queries",
    "higher_cost_pairs",
    "pd_gated_off",
    "aux_slots",
]


def train(cfg: TrainConfig, out_dir: str | Path | None = None) -> RunRecord:
    """Run one training configuration end to end.

    Writes, when ``out_dir`` is given: resolved ``config.ini`` and
    ``run.json``, per-epoch ``metrics.csv`` rows, per-step distillation
    ``diagnostics.csv``, and per-epoch student / EMA checkpoints.
    """
    started = time.time()
    if cfg.run.reference_mode:
        set_reference_mode()
    torch.manual_seed(cfg.run.seed)

    dtype = torch.float32 if cfg.run.precision == "float32" else torch.float64
    train_scenes, val_scenes, embedder = load_or_generate_data(cfg)
    train_feats = render_features(embedder, train_scenes, dtype)
    val_feats = render_features(embedder, val_scenes, dtype)

    detector_cfg = cfg.detector_config()
    student = Detector(detector_cfg, seed=cfg.run.seed, dtype=dtype)
    teacher_state: EmaState = ema_init(
        student, decay=cfg.ema.decay, stop_after_epoch=cfg.stop_epoch_resolved()
    )
    optimizer = make_optimizer(student, cfg)
    weights = cost_weights_from(cfg)
    use_teacher = cfg.distill.md or cfg.distill.pd or cfg.distill.aux

    run_dir = Path(out_dir) if out_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.ini").write_text(cfg.to_text(), encoding="utf-8")

    resolved = cfg.resolved_dict()
    ckpt_extra = {"data": resolved["data"], "loss": resolved["loss"]}

    rows: list[dict] = []
    diag_rows: list[dict] = []
    checkpoints: dict[str, str] = {}
    prev_online = None
    prev_ema = None
    global_step = 0

    for epoch in range(cfg.schedule.epochs):
        if epoch == cfg.schedule.lr_decay_epoch:
            for group in optimizer.param_groups:
                group["lr"] *= cfg.schedule.lr_decay_factor
        order = np.random.default_rng(
            np.random.SeedSequence((cfg.run.seed, epoch, _SHUFFLE_SALT))
        ).permutation(len(train_scenes))

        sums = {"loss_total": 0.0, "loss_mqf": 0.0, "loss_r": 0.0, "loss_pd": 0.0, "loss_aux": 0.0}
        steps_in_epoch = 0
        for start in range(0, len(order), cfg.schedule.batch_size):
            idx = order[start : start + cfg.schedule.batch_size]
            scenes = [train_scenes[i] for i in idx]
            feats = train_feats[torch.from_numpy(idx)]
            try:
                result = run_training_step(
                    student, teacher_state.teacher if use_teacher else None, feats, scenes, cfg
                )
            except FloatingPointError as exc:
                _dump_aborted_step(run_dir, epoch, global_step, scenes, str(exc))
                raise TrainingAborted(f"non-finite activations: {exc}") from exc
            if not torch.isfinite(result.total):
                _dump_aborted_step(
                    run_dir, epoch, global_step, scenes, f"loss={float(result.total)}",
                    result.components,
                )
                raise TrainingAborted(f"non-finite loss at step {global_step}")

            optimizer.zero_grad()
            result.total.backward()
            optimizer.step()
            ema_update(teacher_state, student, epoch)

            global_step += 1
            steps_in_epoch += 1
            sums["loss_total"] += float(result.total)
            for key in ("loss_mqf", "loss_r", "loss_pd", "loss_aux"):
                sums[key] += result.components[key]
            diag_rows.append(
                {
                    "step": global_step,
                    "two_class_queries": result.diagnostics["two_class_queries"],
                    "teacher_primary_queries": result.diagnostics["teacher_primary_queries"],
                    "higher_cost_pairs": result.diagnostics["higher_cost_pairs"],
                    "pd_gated_off": result.diagnostics["pd_gated_off"],
                    "aux_slots": sum(
                        sum(sizes) for sizes in result.diagnostics["aux_group_sizes"]
                    ),
                }
            )

        online_snap, online_preds, val_gts = evaluate_detector(
            student, val_feats, val_scenes, weights
        )
        ema_snap, _, _ = evaluate_detector(
            teacher_state.teacher, val_feats, val_scenes, weights
        )
        row = {
            "epoch": epoch,
            "step": global_step,
            "seed": cfg.run.seed,
            "loss_total": sums["loss_total"] / max(steps_in_epoch, 1),
            "loss_mqf": sums["loss_mqf"] / max(steps_in_epoch, 1),
            "loss_r": sums["loss_r"] / max(steps_in_epoch, 1),
            "loss_pd": sums["loss_pd"] / max(steps_in_epoch, 1),
            "loss_aux": sums["loss_aux"] / max(steps_in_epoch, 1),
            "instability_online": (
                metrics_mod.instability(prev_online, online_snap)
                if prev_online is not None
                else float("nan")
            ),
            "instability_ema": (
                metrics_mod.instability(prev_ema, ema_snap)
                if prev_ema is not None
                else float("nan")
            ),
            "consistency": metrics_mod.consistency(online_snap, ema_snap),
            "ap50": metrics_mod.average_precision(online_preds, val_gts, (0.5,)),
            "ap": metrics_mod.average_precision(online_preds, val_gts),
        }
        rows.append(row)
        prev_online, prev_ema = online_snap, ema_snap

        if run_dir is not None:
            student_path = run_dir / f"student_epoch_{epoch:03d}.ckpt"
            ema_path = run_dir / f"ema_epoch_{epoch:03d}.ckpt"
            save_checkpoint(student, student_path, kind="student", seed=cfg.run.seed, extra=ckpt_extra)
            save_checkpoint(teacher_state.teacher, ema_path, kind="ema", seed=cfg.run.seed, extra=ckpt_extra)
            checkpoints[f"student_epoch_{epoch}"] = str(student_path)
            checkpoints[f"ema_epoch_{epoch}"] = str(ema_path)

    record = RunRecord(
        config=resolved,
        metrics=rows,
        seed=cfg.run.seed,
        wall_clock=time.time() - started,
        run_dir=str(run_dir) if run_dir is not None else None,
        checkpoints=checkpoints,
    )
    if run_dir is not None:
        final_student = run_dir / "student_final.ckpt"
        final_ema = run_dir / "ema_final.ckpt"
        save_checkpoint(student, final_student, kind="student", seed=cfg.run.seed, extra=ckpt_extra)
        save_checkpoint(teacher_state.teacher, final_ema, kind="ema", seed=cfg.run.seed, extra=ckpt_extra)
        record.checkpoints["student_final"] = str(final_student)
        record.checkpoints["ema_final"] = str(final_ema)
        (run_dir / "metrics.csv").write_text(metrics_csv_text(rows), encoding="utf-8")
        with open(run_dir / "diagnostics.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=DIAGNOSTIC_COLUMNS)
            writer.writeheader()
            writer.writerows(diag_rows)
        (run_dir / "run.json").write_text(
            json.dumps(
                {
                    "config": record.config,
                    "seed": record.seed,
                    "wall_clock": record.wall_clock,
                    "metrics": rows,
                    "checkpoints": record.checkpoints,
                },
                indent=2,
                allow_nan=True,
            ),
            encoding="utf-8",
        )
    return record


def _dump_aborted_step(
    run_dir: Path | None,
    epoch: int,
    step: int,
    scenes: list[Scene],
    reason: str,
    components: dict | None = None,
) -> None:
    dump = {
        "epoch": epoch,
        "step": step,
        "reason": reason,
        "scene_seeds": [s.seed for s in scenes],
        "components": components or {},
    }
    if run_dir is not None:
        (run_dir / "aborted_step.json").write_text(json.dumps(dump, indent=2))
