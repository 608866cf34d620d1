"""Scalar training losses with analytic gradients.

The quality focal loss binds classification and regression together by
supervising the sigmoid score of a class with the IoU of the prediction
against its matched GT.  The multi-target extension accepts a second class
target when the teacher-side match disagrees in class, and the regression
loss down-weights the higher-cost member when one GT is regressed by two
queries.

All functions accept torch tensors (differentiable) or plain floats and
preserve the input flavor.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import torch

from . import geometry
from .geometry import Box

SCORE_EPS = 1e-7
DEFAULT_GAMMA = 2.0
DEFAULT_DOWNWEIGHT = 0.51
DEFAULT_LAMBDA_L1 = 5.0
DEFAULT_LAMBDA_GIOU = 2.0


@dataclass(frozen=True)
class ClassTarget:
    """One class target: an index plus the IoU quality target t in [0, 1]."""

    class_index: int
    iou_target: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.iou_target <= 1.0) or not math.isfinite(self.iou_target):
            raise ValueError(f"iou target outside [0,1]: {self.iou_target}")


@dataclass(frozen=True)
class MultiTarget:
    """Primary class target plus an optional secondary of a different class."""

    primary: ClassTarget
    secondary: ClassTarget | None = None

    def __post_init__(self) -> None:
        if self.secondary is not None and (
            self.secondary.class_index == self.primary.class_index
        ):
            raise ValueError("secondary target must use a different class index")


class RegressionRole(enum.Enum):
    LOWER_COST = "lower_cost"
    HIGHER_COST = "higher_cost"


def qfl(s, t, gamma: float = DEFAULT_GAMMA):
    """Quality focal loss ``-|t - s|^gamma ((1 - t) log(1 - s) + t log s)``.

    ``s`` is clamped to [1e-7, 1 - 1e-7] before the logs; ``t`` outside
    [0, 1] is rejected.  Elementwise over tensors.
    """
    scalar = not isinstance(s, torch.Tensor)
    s_t = torch.as_tensor(s, dtype=torch.float64) if scalar else s
    t_t = torch.as_tensor(t, dtype=s_t.dtype) if not isinstance(t, torch.Tensor) else t
    if ((t_t < 0) | (t_t > 1)).any() or not torch.isfinite(t_t).all():
        raise ValueError("qfl target t must lie in [0, 1]")
    s_c = s_t.clamp(SCORE_EPS, 1 - SCORE_EPS)
    loss = -((t_t - s_c).abs() ** gamma) * (
        (1 - t_t) * torch.log(1 - s_c) + t_t * torch.log(s_c)
    )
    return float(loss) if scalar and loss.ndim == 0 else loss


def multi_target_qfl(scores, targets: MultiTarget, gamma: float = DEFAULT_GAMMA):
    """QFL over one or two class targets of a score vector.

    With no secondary target this is exactly ``qfl(s, t)`` at the primary
    entry; with a secondary it is the sum of the two per-class terms.
    """
    scalar = not isinstance(scores, torch.Tensor)
    v = torch.as_tensor(scores, dtype=torch.float64) if scalar else scores
    loss = qfl(v[targets.primary.class_index], targets.primary.iou_target, gamma)
    if targets.secondary is not None:
        loss = loss + qfl(
            v[targets.secondary.class_index], targets.secondary.iou_target, gamma
        )
    return float(loss) if scalar else loss


def background_qfl(scores, gamma: float = DEFAULT_GAMMA):
    """QFL with t = 0 summed over every class of a score vector."""
    scalar = not isinstance(scores, torch.Tensor)
    v = torch.as_tensor(scores, dtype=torch.float64) if scalar else scores
    loss = qfl(v, torch.zeros_like(v), gamma).sum()
    return float(loss) if scalar else loss


def regression_loss(
    b,
    b_gt,
    role: RegressionRole = RegressionRole.LOWER_COST,
    w_d: float = DEFAULT_DOWNWEIGHT,
    lambda_l1: float = DEFAULT_LAMBDA_L1,
    lambda_giou: float = DEFAULT_LAMBDA_GIOU,
):
    """Weighted L1 + GIoU regression loss for one box pair.

    The higher-cost member of a doubly-regressed GT is scaled by ``w_d``
    (exactly ``w_d *`` the lower-cost value for identical boxes).  Accepts
    Box values or 4-tensors.
    """
    if not 0.0 < w_d <= 1.0:
        raise ValueError(f"w_d must lie in (0, 1]: {w_d}")
    if isinstance(b, Box) and isinstance(b_gt, Box):
        base = lambda_l1 * geometry.l1_distance(b, b_gt) + lambda_giou * (
            1.0 - geometry.giou(b, b_gt)
        )
    else:
        base = lambda_l1 * geometry.paired_l1(b, b_gt) + lambda_giou * (
            1.0 - geometry.paired_giou(b, b_gt)
        )
    return base if role is RegressionRole.LOWER_COST else w_d * base
