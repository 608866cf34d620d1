"""Deterministic synthetic detection scenes and their feature grids.

A scene is a handful of class-labelled boxes; its "image" is a G x G grid of
d-dimensional cells.  Every cell covered by an object accumulates that
class's fixed embedding plus a fixed linear encoding of the offset from the
cell center to the box center and of the box size, and every cell gets
Gaussian noise on top.  Both the scenes and the rendering are pure functions
of integer seeds, so datasets are reproducible byte for byte and features
are re-rendered on load instead of stored.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box

_EMBEDDER_SALT = 0xE3BED
_NOISE_SALT = 0x11015E


@dataclass(frozen=True)
class GroundTruth:
    box: Box
    class_index: int


@dataclass
class Scene:
    seed: int
    objects: list[GroundTruth] = field(default_factory=list)


@dataclass(frozen=True)
class SceneConfig:
    num_classes: int = 5
    max_objects: int = 6
    grid_size: int = 8
    d_model: int = 32
    noise_sigma: float = 0.1
    size_min: float = 0.08
    size_max: float = 0.5
    max_overlap_iou: float = 0.7
    rejection_budget: int = 1000


def _pairwise_iou_ok(box: Box, others: list[GroundTruth], limit: float) -> bool:
    from . import geometry

    return all(geometry.iou(box, g.box) <= limit for g in others)


def generate_scene(seed: int, config: SceneConfig) -> Scene:
    """Sample one scene: object count uniform in [1, max_objects], classes
    uniform, sizes log-uniform, centers uniform over positions keeping the
    box inside the unit square.  Pairwise GT IoU above ``max_overlap_iou``
    is rejection-sampled away; an exhausted budget raises."""
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    count = int(rng.integers(1, config.max_objects + 1))
    objects: list[GroundTruth] = []
    log_lo, log_hi = np.log(config.size_min), np.log(config.size_max)
    attempts = 0
    while len(objects) < count:
        if attempts >= config.rejection_budget:
            raise RuntimeError(
                f"scene {seed}: rejection budget exhausted after {attempts} attempts"
            )
        attempts += 1
        w = float(np.exp(rng.uniform(log_lo, log_hi)))
        h = float(np.exp(rng.uniform(log_lo, log_hi)))
        cx = float(rng.uniform(w / 2, 1 - w / 2))
        cy = float(rng.uniform(h / 2, 1 - h / 2))
        cls = int(rng.integers(config.num_classes))
        box = Box(cx, cy, w, h)
        if _pairwise_iou_ok(box, objects, config.max_overlap_iou):
            objects.append(GroundTruth(box=box, class_index=cls))
    return Scene(seed=int(seed), objects=objects)


def scene_seed(dataset_seed: int, index: int, stream: int = 0) -> int:
    """Stable per-scene child seed of a dataset seed; distinct ``stream``
    values give disjoint splits (train vs val) of the same seed."""
    ss = np.random.SeedSequence((int(dataset_seed), int(stream), int(index)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def generate_scenes(
    dataset_seed: int, count: int, config: SceneConfig, stream: int = 0
) -> list[Scene]:
    return [generate_scene(scene_seed(dataset_seed, i, stream), config) for i in range(count)]


def cell_centers(grid_size: int) -> np.ndarray:
    """[G*G, 2] array of cell-center coordinates in row-major order."""
    step = 1.0 / grid_size
    axis = (np.arange(grid_size) + 0.5) * step
    uy, ux = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([ux.ravel(), uy.ravel()], axis=1)


class FeatureEmbedder:
    """Seeded, training-free feature renderer shared by a whole run.

    Class embeddings have unit-scale norm; box geometry enters through a
    fixed Gaussian projection of (dx, dy, w, h).
    """

    def __init__(self, seed: int, config: SceneConfig):
        self.seed = int(seed)
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, _EMBEDDER_SALT)))
        d = config.d_model
        self.class_embeddings = rng.normal(size=(config.num_classes, d)) / np.sqrt(d)
        self.geo_projection = rng.normal(size=(d, 4)) / 2.0
        self.centers = cell_centers(config.grid_size)

    def render(self, scene: Scene) -> np.ndarray:
        """Render one scene to a [G*G, d_model] float64 grid."""
        cfg = self.config
        grid = np.zeros((cfg.grid_size * cfg.grid_size, cfg.d_model))
        if cfg.noise_sigma > 0:
            rng = np.random.default_rng(np.random.SeedSequence((scene.seed, _NOISE_SALT)))
            grid += cfg.noise_sigma * rng.standard_normal(grid.shape)
        ux, uy = self.centers[:, 0], self.centers[:, 1]
        for obj in scene.objects:
            b = obj.box
            covered = (
                (ux >= b.cx - b.w / 2)
                & (ux <= b.cx + b.w / 2)
                & (uy >= b.cy - b.h / 2)
                & (uy <= b.cy + b.h / 2)
            )
            if not covered.any():
                continue
            offsets = np.stack(
                [
                    b.cx - ux[covered],
                    b.cy - uy[covered],
                    np.full(covered.sum(), b.w),
                    np.full(covered.sum(), b.h),
                ],
                axis=1,
            )
            grid[covered] += self.class_embeddings[obj.class_index]
            grid[covered] += offsets @ self.geo_projection.T
        return grid

    def render_batch(self, scenes: list[Scene]) -> np.ndarray:
        return np.stack([self.render(s) for s in scenes], axis=0)


def save_scenes(scenes: list[Scene], path: str | Path) -> None:
    """Write scenes as JSON lines: {"seed": ..., "objects": [{cx,cy,w,h,class}]}."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenes:
            record = {
                "seed": s.seed,
                "objects": [
                    {
                        "cx": g.box.cx,
                        "cy": g.box.cy,
                        "w": g.box.w,
                        "h": g.box.h,
                        "class": g.class_index,
                    }
                    for g in s.objects
                ],
            }
            fh.write(json.dumps(record) + "\n")


def load_scenes(path: str | Path) -> list[Scene]:
    scenes = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            scenes.append(
                Scene(
                    seed=int(record["seed"]),
                    objects=[
                        GroundTruth(
                            box=Box(o["cx"], o["cy"], o["w"], o["h"]),
                            class_index=int(o["class"]),
                        )
                        for o in record["objects"]
                    ],
                )
            )
    return scenes
