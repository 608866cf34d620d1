"""Exponential-moving-average teacher and its stop-update schedule.

The teacher shares the student's parameter layout bit for bit and never
requires gradients.  Once the configured stop epoch is reached the teacher
freezes and its bytes no longer change.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
from torch import nn

DEFAULT_DECAY = 0.99


@dataclass
class EmaState:
    teacher: nn.Module
    decay: float
    stop_after_epoch: int | None = None
    frozen: bool = False
    updates: int = 0


def ema_init(
    student: nn.Module,
    decay: float = DEFAULT_DECAY,
    stop_after_epoch: int | None = None,
) -> EmaState:
    """Teacher starts as an exact copy of the student."""
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"decay must lie in [0, 1): {decay}")
    teacher = copy.deepcopy(student)
    teacher.requires_grad_(False)
    teacher.eval()
    return EmaState(teacher=teacher, decay=decay, stop_after_epoch=stop_after_epoch)


def _check_layout(teacher: nn.Module, student: nn.Module) -> None:
    t_params = list(teacher.named_parameters())
    s_params = list(student.named_parameters())
    if [(n, tuple(p.shape)) for n, p in t_params] != [
        (n, tuple(p.shape)) for n, p in s_params
    ]:
        raise ValueError("teacher/student parameter layouts differ")


def ema_update(state: EmaState, student: nn.Module, epoch: int) -> EmaState:
    """One elementwise update ``t <- d * t + (1 - d) * s``.

    Reaching ``stop_after_epoch`` freezes the teacher permanently; frozen
    teachers are skipped so their bytes stay identical forever after.
    """
    if state.stop_after_epoch is not None and epoch >= state.stop_after_epoch:
        state.frozen = True
    if state.frozen:
        return state
    _check_layout(state.teacher, student)
    d = state.decay
    with torch.no_grad():
        for p_t, p_s in zip(state.teacher.parameters(), student.parameters()):
            p_t.mul_(d).add_(p_s, alpha=1.0 - d)
    state.updates += 1
    return state
