"""Standalone checkpoint evaluation against a scene file."""

from __future__ import annotations

from pathlib import Path

from .. import metrics as metrics_mod
from ..matching import CostWeights
from ..network import load_checkpoint
from ..synthdata import FeatureEmbedder, SceneConfig, load_scenes
from .train import evaluate_detector, render_features


def evaluate_checkpoint(checkpoint: str | Path, data: str | Path) -> dict:
    """Load a checkpoint, re-render the features of a JSONL scene file with
    the run's stored data settings, and report AP metrics."""
    model, header = load_checkpoint(checkpoint)
    scenes = load_scenes(data)
    extra = header.get("extra", {})
    data_meta = extra.get("data", {})
    loss_meta = extra.get("loss", {})
    scfg = SceneConfig(
        num_classes=model.cfg.num_classes,
        max_objects=int(data_meta.get("max_objects", 6)),
        grid_size=model.cfg.grid_size,
        d_model=model.cfg.d_model,
        noise_sigma=float(data_meta.get("noise_sigma", 0.1)),
        size_min=float(data_meta.get("size_min", 0.08)),
        size_max=float(data_meta.get("size_max", 0.5)),
        max_overlap_iou=float(data_meta.get("max_overlap_iou", 0.7)),
    )
    embedder = FeatureEmbedder(int(data_meta.get("seed", 0)), scfg)
    feats = render_features(embedder, scenes)
    weights = CostWeights(
        cls=float(loss_meta.get("cost_cls", 2.0)),
        l1=float(loss_meta.get("cost_l1", 5.0)),
        giou=float(loss_meta.get("cost_giou", 2.0)),
        focal_alpha=float(loss_meta.get("focal_alpha", 0.25)),
        focal_gamma=float(loss_meta.get("focal_gamma", 2.0)),
    )
    _, preds, gts = evaluate_detector(model, feats, scenes, weights)
    return {
        "checkpoint": str(checkpoint),
        "kind": header.get("kind", "student"),
        "scenes": len(scenes),
        "ap": metrics_mod.average_precision(preds, gts),
        "ap50": metrics_mod.average_precision(preds, gts, (0.5,)),
    }
