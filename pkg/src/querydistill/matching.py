"""Cost-matrix construction and optimal one-to-one assignment.

Rows are predictions (queries), columns are ground-truth objects.  The cell
cost is a weighted sum of a focal-style classification cost on the sigmoid
score of the GT class, an L1 box distance, and a negated GIoU.  The solver
delegates to ``scipy.optimize.linear_sum_assignment``; optimality is pinned
by an exhaustive-permutation oracle in the test suite.

Everything here operates on detached values; assignment decisions never
carry gradients.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from . import geometry

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CostWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


@dataclass
class CostMatrix:
    """Dense [num_queries, num_gts] cost matrix with its component breakdown.

    ``total = weights.cls * cls + weights.l1 * l1 - weights.giou * giou``
    holds cell by cell (components store the raw values, not the weighted
    contributions).
    """

    total: np.ndarray
    cls: np.ndarray
    l1: np.ndarray
    giou: np.ndarray
    weights: CostWeights

    @property
    def num_queries(self) -> int:
        return self.total.shape[0]

    @property
    def num_gts(self) -> int:
        return self.total.shape[1]

    def recombine(self) -> np.ndarray:
        w = self.weights
        return w.cls * self.cls + w.l1 * self.l1 - w.giou * self.giou


@dataclass
class MatchResult:
    """A one-to-one query<->GT assignment.

    ``pairs`` is sorted by query index; each GT index appears exactly once
    unless the degenerate ``num_queries < num_gts`` case left surplus GTs
    unmatched (then ``unmatched_gts`` is non-empty and a warning record is
    attached).
    """

    pairs: list[tuple[int, int]]
    pair_costs: list[float]
    unmatched_queries: list[int]
    unmatched_gts: list[int]
    num_queries: int
    num_gts: int
    cost: CostMatrix | None = None
    warning: str | None = None

    def assignment(self) -> dict[int, int]:
        return {q: g for q, g in self.pairs}

    def total_cost(self) -> float:
        return float(sum(self.pair_costs))


def focal_cls_cost(score, alpha: float = 0.25, gamma: float = 2.0):
    """Def-DETR style focal classification cost on a sigmoid score.

    Works on floats, numpy arrays and torch tensors.
    """
    if isinstance(score, torch.Tensor):
        p = score.clamp(1e-7, 1 - 1e-7)
        log, log1m = torch.log(p), torch.log(1 - p)
    else:
        p = np.clip(np.asarray(score, dtype=np.float64), 1e-7, 1 - 1e-7)
        log, log1m = np.log(p), np.log(1 - p)
    pos = alpha * (1 - p) ** gamma * (-log)
    neg = (1 - alpha) * p**gamma * (-log1m)
    return pos - neg


def build_cost_matrix(preds, gts, weights: CostWeights | None = None) -> CostMatrix:
    """Build the cost matrix between Prediction-like and GroundTruth-like lists.

    ``preds`` need a ``box`` (Box) and ``scores`` (per-class array); ``gts``
    need a ``box`` and ``class_index``.  Non-finite scores are rejected with
    the offending query index.
    """
    if weights is None:
        weights = CostWeights()
    if len(preds) == 0:
        raise ValueError("cost matrix needs at least one prediction")
    for i, p in enumerate(preds):
        if not np.all(np.isfinite(np.asarray(p.scores, dtype=np.float64))):
            raise ValueError(f"non-finite prediction scores at query {i}")
    n, m = len(preds), len(gts)
    cls = np.zeros((n, m))
    l1 = np.zeros((n, m))
    gi = np.zeros((n, m))
    for i, p in enumerate(preds):
        scores = np.asarray(p.scores, dtype=np.float64)
        for j, g in enumerate(gts):
            cls[i, j] = focal_cls_cost(
                scores[g.class_index], weights.focal_alpha, weights.focal_gamma
            )
            l1[i, j] = geometry.l1_distance(p.box, g.box)
            gi[i, j] = geometry.giou(p.box, g.box)
    total = weights.cls * cls + weights.l1 * l1 - weights.giou * gi
    return CostMatrix(total=total, cls=cls, l1=l1, giou=gi, weights=weights)


def hungarian(cost: CostMatrix | np.ndarray) -> MatchResult:
    """Minimum-cost one-to-one assignment of GT columns to query rows.

    Deterministic for identical input bytes.  When there are fewer queries
    than GTs (degenerate config) every query gets matched and the surplus
    GTs are reported unmatched with a warning record.
    """
    matrix = cost.total if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=np.float64)
    if matrix.ndim != 2:
        raise ValueError("cost matrix must be two-dimensional")
    if not np.all(np.isfinite(matrix)):
        raise ValueError("cost matrix contains non-finite entries")
    n, m = matrix.shape
    warning = None
    if m == 0:
        rows = np.zeros(0, dtype=int)
        cols = np.zeros(0, dtype=int)
    else:
        rows, cols = linear_sum_assignment(matrix)
    if n < m:
        warning = f"degenerate assignment: {n} queries for {m} GTs; surplus GTs unmatched"
        logger.warning(warning)
    order = np.argsort(rows, kind="stable")
    pairs = [(int(rows[k]), int(cols[k])) for k in order]
    pair_costs = [float(matrix[q, g]) for q, g in pairs]
    matched_q = {q for q, _ in pairs}
    matched_g = {g for _, g in pairs}
    return MatchResult(
        pairs=pairs,
        pair_costs=pair_costs,
        unmatched_queries=[q for q in range(n) if q not in matched_q],
        unmatched_gts=[g for g in range(m) if g not in matched_g],
        num_queries=n,
        num_gts=m,
        cost=cost if isinstance(cost, CostMatrix) else None,
        warning=warning,
    )


def match(preds, gts, weights: CostWeights | None = None) -> MatchResult:
    """Compose :func:`build_cost_matrix` and :func:`hungarian`.

    The returned result retains the cost matrix so later consumers can read
    any cell (regression down-weighting, auxiliary-group selection).
    """
    return hungarian(build_cost_matrix(preds, gts, weights))


# --- batched tensor path --------------------------------------------------


def batched_cost_matrices(
    boxes: torch.Tensor,
    scores: torch.Tensor,
    gt_boxes: torch.Tensor,
    gt_classes: torch.Tensor,
    gt_counts: np.ndarray,
    weights: CostWeights,
) -> np.ndarray:
    """Cost tensors for a padded batch: [B, N, 4]/[B, N, C] predictions vs
    [B, M, 4]/[B, M] padded GTs -> float64 [B, N, M]; padded columns are
    garbage and must be sliced off via ``gt_counts`` before solving."""
    with torch.no_grad():
        if not torch.isfinite(scores).all():
            bad = (~torch.isfinite(scores)).any(dim=-1).nonzero()
            b, i = (int(v) for v in bad[0])
            raise ValueError(f"non-finite prediction scores at scene {b}, query {i}")
        p = scores.gather(
            2, gt_classes.clamp(min=0).unsqueeze(1).expand(-1, scores.shape[1], -1)
        )
        cls = focal_cls_cost(p, weights.focal_alpha, weights.focal_gamma)
        l1 = geometry.pairwise_l1(boxes, gt_boxes)
        gi = geometry.pairwise_giou(boxes, gt_boxes)
        total = weights.cls * cls + weights.l1 * l1 - weights.giou * gi
    return total.cpu().numpy()


def solve_batch(cost: np.ndarray, gt_counts: np.ndarray) -> list[np.ndarray]:
    """Solve one assignment per scene of a padded [B, N, M] cost batch.

    Returns, per scene, an int array of length N mapping query -> gt index
    (-1 for unmatched queries).
    """
    out = []
    n = cost.shape[1]
    for b in range(cost.shape[0]):
        m = int(gt_counts[b])
        assign = np.full(n, -1, dtype=np.int64)
        if m > 0:
            rows, cols = linear_sum_assignment(cost[b, :, :m])
            assign[rows] = cols
        out.append(assign)
    return out


def brute_force_min_cost(matrix: np.ndarray) -> float:
    """Exhaustive-permutation minimum assignment cost (oracle, <= 7 columns).

    Enumerates every injective map of columns into rows with vectorized
    numpy indexing; intended for verification, not production use.
    """
    from itertools import permutations

    matrix = np.asarray(matrix, dtype=np.float64)
    n, m = matrix.shape
    if m == 0:
        return 0.0
    if n >= m:
        perms = np.array(list(permutations(range(n), m)), dtype=np.int64)
        totals = matrix[perms, np.arange(m)].sum(axis=1)
    else:
        perms = np.array(list(permutations(range(m), n)), dtype=np.int64)
        totals = matrix[np.arange(n), perms].sum(axis=1)
    if math.isnan(totals.min()):
        raise ValueError("non-finite cost matrix")
    return float(totals.min())
