"""Analytic-vs-numeric gradient verification of the full training objective.

Discrete decisions (matches, fused targets, score updates, gates, group
selection) are frozen into one step plan; the loss of that plan is then a
smooth function of the student parameters, differentiated once by autograd
and once by central finite differences at a sample of parameter entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from ..ema import ema_init, ema_update
from ..network import Detector
from ..synthdata import FeatureEmbedder, generate_scenes
from .config import TrainConfig
from .train import scene_config_from, set_reference_mode
from .step import build_step_plan, execute_step_plan


@dataclass
class GradcheckEntry:
    parameter: str
    index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradcheckReport:
    loss: float
    n_params: int
    max_rel_err: float
    entries: list[GradcheckEntry] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "loss": self.loss,
            "n_params": self.n_params,
            "max_rel_err": self.max_rel_err,
            "entries": [vars(e) for e in self.entries],
        }


def _rel_err(a: float, b: float) -> float:
    denom = max(abs(a), abs(b))
    if denom < 1e-10:
        return abs(a - b)
    return abs(a - b) / denom


def gradcheck(
    cfg: TrainConfig,
    n_params: int = 32,
    h: float = 1e-5,
    batch_scenes: int = 4,
    warmup_steps: int = 3,
    seed: int | None = None,
) -> GradcheckReport:
    """Compare autograd against central differences on one fixed batch.

    A few warmup optimizer steps decorrelate student and teacher so every
    enabled distillation path is exercised non-trivially.  Deterministic
    under a fixed seed.
    """
    set_reference_mode()
    seed = cfg.run.seed if seed is None else seed
    torch.manual_seed(seed)
    scfg = scene_config_from(cfg)
    scenes = generate_scenes(cfg.data.seed, batch_scenes, scfg, stream=0)
    embedder = FeatureEmbedder(cfg.data.seed, scfg)
    feats = torch.from_numpy(embedder.render_batch(scenes))

    student = Detector(cfg.detector_config(), seed=seed)
    teacher_state = ema_init(student, decay=cfg.ema.decay)
    use_teacher = cfg.distill.md or cfg.distill.pd or cfg.distill.aux
    from .train import make_optimizer

    optimizer = make_optimizer(student, cfg)
    for _ in range(warmup_steps):
        plan = build_step_plan(
            student, teacher_state.teacher if use_teacher else None, feats, scenes, cfg
        )
        result = execute_step_plan(student, feats, plan, cfg)
        optimizer.zero_grad()
        result.total.backward()
        optimizer.step()
        ema_update(teacher_state, student, epoch=0)

    plan = build_step_plan(
        student, teacher_state.teacher if use_teacher else None, feats, scenes, cfg
    )

    def loss_value() -> float:
        return float(execute_step_plan(student, feats, plan, cfg).total.detach())

    base = execute_step_plan(student, feats, plan, cfg).total
    for p in student.parameters():
        p.grad = None
    base.backward()

    params = list(student.named_parameters())
    sizes = [p.numel() for _, p in params]
    total = sum(sizes)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x6AADC)))
    chosen = rng.choice(total, size=min(n_params, total), replace=False)

    entries = []
    for flat_index in sorted(int(i) for i in chosen):
        offset = flat_index
        for (name, p), size in zip(params, sizes):
            if offset < size:
                break
            offset -= size
        analytic = float(p.grad.reshape(-1)[offset]) if p.grad is not None else 0.0
        with torch.no_grad():
            original = float(p.reshape(-1)[offset])
            p.reshape(-1)[offset] = original + h
        plus = loss_value()
        with torch.no_grad():
            p.reshape(-1)[offset] = original - h
        minus = loss_value()
        with torch.no_grad():
            p.reshape(-1)[offset] = original
        numeric = (plus - minus) / (2 * h)
        entries.append(
            GradcheckEntry(
                parameter=name,
                index=flat_index,
                analytic=analytic,
                numeric=numeric,
                rel_err=_rel_err(analytic, numeric),
            )
        )
    return GradcheckReport(
        loss=float(base.detach()),
        n_params=len(entries),
        max_rel_err=max(e.rel_err for e in entries) if entries else 0.0,
        entries=entries,
    )
