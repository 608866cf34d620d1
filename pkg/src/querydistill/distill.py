"""Online distillation of an EMA teacher into the training student.

Three mechanisms, orchestrated per training step:

* matching distillation: the teacher's query<->GT assignment is fused with
  the student's own assignment into per-query supervision: up to two class
  targets (when the two matches disagree in class) and exactly one
  regression target, with the higher-cost member of a doubly-regressed GT
  down-weighted;
* prediction distillation: the teacher's initial queries are decoded by the
  student and the resulting predictions are constrained, pair by pair,
  against the teacher's own outputs, quality-weighted and gated so the
  regression constraint only fires where the teacher box beats the
  student's;
* auxiliary groups: the two lowest-cost teacher queries per GT, taken from
  every teacher decoder stage, seed extra query groups that the student
  decodes and learns from in isolated forward passes.

Teacher-derived quantities are always detached; no gradient ever reaches
the teacher, and assignment decisions are made on detached values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from . import geometry
from .losses import (
    DEFAULT_DOWNWEIGHT,
    DEFAULT_GAMMA,
    DEFAULT_LAMBDA_GIOU,
    DEFAULT_LAMBDA_L1,
    ClassTarget,
    MultiTarget,
    RegressionRole,
    qfl,
)
from .matching import CostWeights, MatchResult, batched_cost_matrices, solve_batch
from .network import StageOutput

DEFAULT_SCORE_ALPHA = 0.25
DEFAULT_SCORE_BETA = 0.75
PD_VARIANTS = ("naive", "weighted", "gated")
AUX_VARIANTS = ("md", "re_matching", "original_matching")


@dataclass(frozen=True)
class RegTarget:
    gt_index: int
    role: RegressionRole


@dataclass
class QueryTargets:
    """Fused supervision for one query; ``cls`` None means background."""

    cls: MultiTarget | None
    reg: RegTarget | None
    provenance: str  # student_match | teacher_match | both | none
    secondary_weight: float = 1.0


@dataclass
class DistillTargets:
    queries: list[QueryTargets]
    num_gts: int
    diagnostics: dict = field(default_factory=dict)


def _clamped_iou(value: float) -> float:
    return float(min(max(value, 0.0), 1.0))


def fuse_assignments(
    student: Mapping[int, int],
    teacher: Mapping[int, int],
    iou: np.ndarray,
    gt_classes: np.ndarray,
    cost: np.ndarray | None,
    *,
    num_queries: int,
    w_d: float = DEFAULT_DOWNWEIGHT,
    fill_regression: bool = True,
    secondary_iou_threshold: float | None = None,
    secondary_hard: bool = False,
    cls_downweight: bool = False,
) -> DistillTargets:
    """Fuse a student-side and a teacher-side query->GT assignment.

    Classification: the student-matched GT is the primary target (t = IoU of
    the student's prediction against it); a teacher match to a GT of a
    different class attaches a secondary target; a query matched only by the
    teacher takes the teacher target as primary; matched by neither means
    background.  Regression: the student-matched GT wins, the teacher match
    fills unmatched queries (when ``fill_regression``); whenever one GT ends
    up regressed by several queries, the one with the smallest student-side
    cost keeps full weight and the rest take the ``higher_cost`` role.

    The teacher mapping need not be injective (auxiliary groups inherit two
    slots per GT); for two one-to-one matches each GT draws at most two
    regressors with exactly one ``higher_cost`` among them.
    """
    queries: list[QueryTargets] = []
    regressors: dict[int, list[int]] = {}
    two_class = 0
    teacher_primary = 0
    for i in range(num_queries):
        s = student.get(i)
        t = teacher.get(i)
        if s is not None:
            primary = ClassTarget(int(gt_classes[s]), _clamped_iou(iou[i, s]))
            secondary = None
            if t is not None and t != s and int(gt_classes[t]) != int(gt_classes[s]):
                t_iou = _clamped_iou(iou[i, t])
                if secondary_iou_threshold is None or t_iou >= secondary_iou_threshold:
                    secondary = ClassTarget(
                        int(gt_classes[t]), 1.0 if secondary_hard else t_iou
                    )
            entry = QueryTargets(
                cls=MultiTarget(primary, secondary),
                reg=RegTarget(s, RegressionRole.LOWER_COST),
                provenance="both" if t is not None else "student_match",
                secondary_weight=w_d if (cls_downweight and secondary is not None) else 1.0,
            )
            regressors.setdefault(s, []).append(i)
            if secondary is not None:
                two_class += 1
        elif t is not None:
            entry = QueryTargets(
                cls=MultiTarget(ClassTarget(int(gt_classes[t]), _clamped_iou(iou[i, t]))),
                reg=RegTarget(t, RegressionRole.LOWER_COST) if fill_regression else None,
                provenance="teacher_match",
            )
            if fill_regression:
                regressors.setdefault(t, []).append(i)
            teacher_primary += 1
        else:
            entry = QueryTargets(cls=None, reg=None, provenance="none")
        queries.append(entry)

    higher_cost = 0
    for gt, members in regressors.items():
        if len(members) < 2:
            continue
        if cost is None:
            raise ValueError("student-side costs required to rank multiple regressors")
        ranked = sorted(members, key=lambda q: (cost[q, gt], q))
        for q in ranked[1:]:
            queries[q].reg = RegTarget(gt, RegressionRole.HIGHER_COST)
            higher_cost += 1

    return DistillTargets(
        queries=queries,
        num_gts=int(len(gt_classes)),
        diagnostics={
            "two_class_queries": two_class,
            "teacher_primary_queries": teacher_primary,
            "higher_cost_pairs": higher_cost,
        },
    )


def _iou_matrix(preds, gts) -> np.ndarray:
    out = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            out[i, j] = geometry.iou(p.box, g.box)
    return out


def _fuse_from_matches(
    student_match: MatchResult,
    teacher_match: MatchResult,
    student_preds,
    gts,
    **kwargs,
) -> DistillTargets:
    if student_match.num_gts != teacher_match.num_gts or student_match.num_gts != len(gts):
        raise ValueError("student and teacher matches cover inconsistent GT sets")
    if student_match.num_queries != teacher_match.num_queries:
        raise ValueError("student and teacher matches cover different query sets")
    cost = student_match.cost.total if student_match.cost is not None else None
    return fuse_assignments(
        student_match.assignment(),
        teacher_match.assignment(),
        _iou_matrix(student_preds, gts),
        np.array([g.class_index for g in gts], dtype=np.int64),
        cost,
        num_queries=student_match.num_queries,
        **kwargs,
    )


def matching_distillation(
    student_match: MatchResult,
    teacher_match: MatchResult,
    student_preds,
    gts,
    *,
    w_d: float = DEFAULT_DOWNWEIGHT,
    fill_regression: bool = True,
    cls_downweight: bool = False,
) -> DistillTargets:
    """Fused per-query supervision from the two Hungarian matches."""
    return _fuse_from_matches(
        student_match,
        teacher_match,
        student_preds,
        gts,
        w_d=w_d,
        fill_regression=fill_regression,
        cls_downweight=cls_downweight,
    )


def conditional_md(
    student_match: MatchResult,
    teacher_match: MatchResult,
    student_preds,
    gts,
    iou_threshold: float = 0.5,
    *,
    w_d: float = DEFAULT_DOWNWEIGHT,
    fill_regression: bool = True,
    secondary_hard: bool = False,
) -> DistillTargets:
    """Ablation variant: secondary class targets survive only when their IoU
    reaches ``iou_threshold``; threshold 0 reproduces plain matching
    distillation."""
    return _fuse_from_matches(
        student_match,
        teacher_match,
        student_preds,
        gts,
        w_d=w_d,
        fill_regression=fill_regression,
        secondary_iou_threshold=iou_threshold,
        secondary_hard=secondary_hard,
    )


def targets_to_arrays(
    targets: DistillTargets, num_classes: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Materialize fused targets as dense arrays for vectorized losses.

    Returns (cls_targets [N, C], cls_weights [N, C], reg_query [K],
    reg_gt [K], reg_weight [K]).  Background rows stay all-zero targets, so
    one elementwise QFL pass covers positives and background alike.
    """
    n = len(targets.queries)
    t = np.zeros((n, num_classes))
    w = np.ones((n, num_classes))
    reg_q, reg_gt, reg_w = [], [], []
    for i, entry in enumerate(targets.queries):
        if entry.cls is not None:
            t[i, entry.cls.primary.class_index] = entry.cls.primary.iou_target
            if entry.cls.secondary is not None:
                t[i, entry.cls.secondary.class_index] = entry.cls.secondary.iou_target
                w[i, entry.cls.secondary.class_index] = entry.secondary_weight
        if entry.reg is not None:
            reg_q.append(i)
            reg_gt.append(entry.reg.gt_index)
            reg_w.append(1.0)
    reg_w = np.asarray(reg_w)
    for k, i in enumerate(reg_q):
        if targets.queries[i].reg.role is RegressionRole.HIGHER_COST:
            reg_w[k] = np.nan  # filled by caller with its w_d
    return (
        t,
        w,
        np.asarray(reg_q, dtype=np.int64),
        np.asarray(reg_gt, dtype=np.int64),
        reg_w,
    )


def fuse_arrays(
    student: Mapping[int, int],
    teacher: Mapping[int, int],
    iou: np.ndarray,
    gt_classes: np.ndarray,
    cost: np.ndarray | None,
    *,
    num_queries: int,
    num_classes: int,
    w_d: float = DEFAULT_DOWNWEIGHT,
    fill_regression: bool = True,
    secondary_iou_threshold: float | None = None,
    secondary_hard: bool = False,
    cls_downweight: bool = False,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, dict]:
    """Array-level twin of :func:`fuse_assignments` for the training hot
    path: identical fusion rules, but emitting the dense class-target /
    class-weight matrices and regression index arrays directly.  Pinned to
    the object-level implementation by an equality test."""
    t = np.zeros((num_queries, num_classes))
    w = np.ones((num_queries, num_classes))
    reg_q: list[int] = []
    reg_gt: list[int] = []
    regressors: dict[int, list[int]] = {}
    two_class = 0
    teacher_primary = 0
    for i in range(num_queries):
        s = student.get(i)
        te = teacher.get(i)
        if s is not None:
            cls_s = int(gt_classes[s])
            t[i, cls_s] = min(max(iou[i, s], 0.0), 1.0)
            if te is not None and te != s and int(gt_classes[te]) != cls_s:
                t_iou = min(max(iou[i, te], 0.0), 1.0)
                if secondary_iou_threshold is None or t_iou >= secondary_iou_threshold:
                    cls_t = int(gt_classes[te])
                    t[i, cls_t] = 1.0 if secondary_hard else t_iou
                    if cls_downweight:
                        w[i, cls_t] = w_d
                    two_class += 1
            reg_q.append(i)
            reg_gt.append(s)
            regressors.setdefault(s, []).append(i)
        elif te is not None:
            t[i, int(gt_classes[te])] = min(max(iou[i, te], 0.0), 1.0)
            teacher_primary += 1
            if fill_regression:
                reg_q.append(i)
                reg_gt.append(te)
                regressors.setdefault(te, []).append(i)
    reg_w = np.ones(len(reg_q))
    higher_cost = 0
    for gt, members in regressors.items():
        if len(members) < 2:
            continue
        if cost is None:
            raise ValueError("student-side costs required to rank multiple regressors")
        ranked = sorted(members, key=lambda q: (cost[q, gt], q))
        losers = set(ranked[1:])
        for k, q in enumerate(reg_q):
            if q in losers and reg_gt[k] == gt:
                reg_w[k] = w_d
                higher_cost += 1
    diagnostics = {
        "two_class_queries": two_class,
        "teacher_primary_queries": teacher_primary,
        "higher_cost_pairs": higher_cost,
    }
    return (
        t,
        w,
        np.asarray(reg_q, dtype=np.int64),
        np.asarray(reg_gt, dtype=np.int64),
        reg_w,
        diagnostics,
    )


def teacher_score_update(
    scores,
    class_index: int,
    iou: float,
    alpha: float = DEFAULT_SCORE_ALPHA,
    beta: float = DEFAULT_SCORE_BETA,
):
    """Quality-adjust the teacher's score at the matched class:
    ``c[c_g] <- c[c_g]^alpha * iou^beta``; every other entry is untouched.
    Returns a copy."""
    if not (0.0 <= iou <= 1.0):
        raise ValueError(f"iou outside [0, 1]: {iou}")
    if isinstance(scores, torch.Tensor):
        out = scores.clone()
        out[class_index] = scores[class_index] ** alpha * iou**beta
        return out
    out = np.array(scores, dtype=np.float64, copy=True)
    out[class_index] = out[class_index] ** alpha * iou**beta
    return out


# --- prediction distillation ----------------------------------------------


@dataclass
class PdPair:
    """One index-aligned teacher/student prediction pair; both sides decode
    from the same teacher query, so pairing is positional and never
    re-matched."""

    teacher_box: torch.Tensor  # [4]
    teacher_scores: torch.Tensor  # [C]
    student_box: torch.Tensor  # [4]
    student_scores: torch.Tensor  # [C]


def _to_tensor64(value) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value.to(torch.float64)
    if hasattr(value, "as_tuple"):
        return torch.tensor(value.as_tuple(), dtype=torch.float64)
    return torch.as_tensor(value, dtype=torch.float64)


def prediction_distillation(
    pairs: Sequence[PdPair],
    teacher_match: MatchResult | None,
    gts,
    *,
    variant: str = "gated",
    alpha: float = DEFAULT_SCORE_ALPHA,
    beta: float = DEFAULT_SCORE_BETA,
    cls_mode: str = "full_vector",
    gamma: float = DEFAULT_GAMMA,
    lambda_l1: float = DEFAULT_LAMBDA_L1,
    lambda_giou: float = DEFAULT_LAMBDA_GIOU,
    force_gate_open: bool = False,
    force_weight_one: bool = False,
) -> torch.Tensor:
    """Per-pair distillation loss, summed over pairs and normalized by the
    number of GTs.

    Classification constrains the student's scores against the teacher's
    quality-updated score vector (full-vector soft labels by default,
    ``cls_mode='single_entry'`` keeps only the matched entry).  The
    regression term pulls the student box toward the teacher box, weighted
    by the updated matched-class score, and only where the teacher's IoU
    with the matched GT beats the student's.  Teacher-unmatched pairs
    contribute the classification term with unmodified teacher scores.
    """
    if variant not in PD_VARIANTS:
        raise ValueError(f"unknown pd variant: {variant}")
    if len(pairs) == 0:
        return torch.zeros((), dtype=torch.float64)
    if variant == "naive":
        alpha, beta = 1.0, 0.0
        force_gate_open = True
        force_weight_one = True

    assignment = teacher_match.assignment() if teacher_match is not None else {}
    gt_boxes = [g.box for g in gts if g is not None]
    num_gts = max(len(gts), 1)

    cls_loss = torch.zeros((), dtype=torch.float64)
    reg_loss = torch.zeros((), dtype=torch.float64)
    for i, pair in enumerate(pairs):
        t_scores = _to_tensor64(pair.teacher_scores).detach()
        s_scores = pair.student_scores
        if not isinstance(s_scores, torch.Tensor):
            s_scores = torch.as_tensor(np.asarray(s_scores), dtype=torch.float64)
        t_box = _to_tensor64(pair.teacher_box).detach()
        s_box = _to_tensor64(pair.student_box)

        g = assignment.get(i)
        if g is not None:
            gt_box = torch.tensor(gt_boxes[g].as_tuple(), dtype=torch.float64)
            iou_teacher = float(geometry.paired_iou(t_box, gt_box))
            c_g = gts[g].class_index
            updated = teacher_score_update(t_scores, c_g, iou_teacher, alpha, beta)
        else:
            updated = t_scores

        if cls_mode == "single_entry":
            target = torch.zeros_like(updated)
            if g is not None:
                target[c_g] = updated[c_g]
        else:
            target = updated
        cls_loss = cls_loss + qfl(s_scores, target, gamma).sum()

        if g is not None:
            if variant == "weighted" or force_gate_open:
                gate = True
            else:
                # the gate decision is made on detached values
                with torch.no_grad():
                    iou_student = float(geometry.paired_iou(s_box.detach(), gt_box))
                gate = iou_teacher > iou_student
            weight = 1.0 if force_weight_one else float(updated[c_g])
        else:
            # unmatched pairs regress only in the degenerate naive mode
            gate = force_gate_open and force_weight_one
            weight = 1.0
        if gate:
            reg_loss = reg_loss + weight * (
                lambda_l1 * geometry.paired_l1(s_box, t_box)
                + lambda_giou * (1.0 - geometry.paired_giou(s_box, t_box))
            )

    return (cls_loss + reg_loss) / num_gts


def naive_distillation(
    pairs: Sequence[PdPair],
    *,
    gamma: float = DEFAULT_GAMMA,
    lambda_l1: float = DEFAULT_LAMBDA_L1,
    lambda_giou: float = DEFAULT_LAMBDA_GIOU,
    num_gts: int | None = None,
) -> torch.Tensor:
    """Ablation variant: QFL against the teacher's raw scores plus uniform
    unweighted regression toward every teacher box, no quality update, no
    gate."""
    return prediction_distillation(
        pairs,
        None,
        [] if num_gts is None else [None] * num_gts,
        variant="naive",
        gamma=gamma,
        lambda_l1=lambda_l1,
        lambda_giou=lambda_giou,
    )


# --- auxiliary groups ------------------------------------------------------


@dataclass
class AuxGroup:
    """Queries selected from one teacher decoder stage: for every GT the two
    queries with the lowest matching cost, duplicates allowed when a query
    is top-2 for two GTs.  One group per stage; groups never interact."""

    stage_index: int
    query_indices: np.ndarray  # [S]
    source_gts: np.ndarray  # [S]
    queries: torch.Tensor  # [S, D], detached
    anchors: torch.Tensor  # [S, 4], detached


def top2_per_gt(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Slot arrays (query_indices, source_gts) picking the two smallest cost
    rows per column, ties broken by query index."""
    slots_q, slots_g = [], []
    num_queries, num_gts = cost.shape
    take = min(2, num_queries)
    for j in range(num_gts):
        order = np.argsort(cost[:, j], kind="stable")[:take]
        for q in order:
            slots_q.append(int(q))
            slots_g.append(j)
    return np.asarray(slots_q, dtype=np.int64), np.asarray(slots_g, dtype=np.int64)


def build_auxiliary_groups(
    teacher_stage_outputs: Sequence[StageOutput],
    teacher_matches_per_stage: Sequence[MatchResult],
    gts,
    scene: int = 0,
) -> list[AuxGroup]:
    """One group per teacher stage from its top-2-per-GT selection.

    Requires each teacher match to retain its cost matrix.  Zero GTs yield
    zero groups.
    """
    if len(gts) == 0:
        return []
    groups = []
    for t, (out, match_t) in enumerate(zip(teacher_stage_outputs, teacher_matches_per_stage)):
        if match_t.cost is None:
            raise ValueError(f"teacher match for stage {t} lacks its cost matrix")
        slots_q, slots_g = top2_per_gt(match_t.cost.total)
        groups.append(
            AuxGroup(
                stage_index=t,
                query_indices=slots_q,
                source_gts=slots_g,
                queries=out.queries[scene, slots_q].detach(),
                anchors=out.boxes[scene, slots_q].detach(),
            )
        )
    return groups


def aux_group_loss(
    groups: Sequence[AuxGroup],
    student_model,
    feats: torch.Tensor,
    gts,
    variant: str = "md",
    *,
    cost_weights: CostWeights | None = None,
    w_d: float = DEFAULT_DOWNWEIGHT,
    gamma: float = DEFAULT_GAMMA,
    lambda_l1: float = DEFAULT_LAMBDA_L1,
    lambda_giou: float = DEFAULT_LAMBDA_GIOU,
) -> torch.Tensor:
    """Decode every group through the student in its own forward pass,
    re-match against the GTs per stage, and supervise per variant: ``md``
    fuses the fresh match with the group's inherited teacher relation,
    ``re_matching`` uses only the fresh match, ``original_matching`` only
    the inherited one."""
    if variant not in AUX_VARIANTS:
        raise ValueError(f"unknown aux variant: {variant}")
    if len(groups) == 0:
        return torch.zeros((), dtype=torch.float64)
    if cost_weights is None:
        cost_weights = CostWeights()
    if feats.ndim == 2:
        feats = feats[None]
    num_gts = len(gts)
    gt_classes = np.array([g.class_index for g in gts], dtype=np.int64)
    gt_boxes_t = geometry.boxes_to_tensor([g.box for g in gts])
    gt_counts = np.array([num_gts])

    total = torch.zeros((), dtype=torch.float64)
    for group in groups:
        size = len(group.query_indices)
        if size == 0:
            continue
        if size > student_model.cfg.num_queries:
            raise ValueError(
                f"auxiliary group of {size} queries exceeds num_queries="
                f"{student_model.cfg.num_queries}"
            )
        inherited = {s: int(g) for s, g in enumerate(group.source_gts)}
        outputs = student_model(feats, group.queries[None], group.anchors[None])
        for out in outputs:
            cost = batched_cost_matrices(
                out.boxes.detach(),
                out.scores.detach(),
                gt_boxes_t[None],
                torch.from_numpy(gt_classes)[None],
                gt_counts,
                cost_weights,
            )[0]
            with torch.no_grad():
                iou = geometry.pairwise_iou(out.boxes[0], gt_boxes_t).cpu().numpy()
            if variant == "original_matching":
                fresh: dict[int, int] = {}
            else:
                assign = solve_batch(cost[None], gt_counts)[0]
                fresh = {q: int(g) for q, g in enumerate(assign) if g >= 0}
            teacher_side = {} if variant == "re_matching" else inherited
            fused = fuse_assignments(
                fresh,
                teacher_side,
                iou,
                gt_classes,
                cost,
                num_queries=size,
                w_d=w_d,
            )
            total = total + _stage_loss_from_targets(
                out.scores[0],
                out.boxes[0],
                fused,
                gt_boxes_t,
                w_d=w_d,
                gamma=gamma,
                lambda_l1=lambda_l1,
                lambda_giou=lambda_giou,
            )
    return total / max(num_gts, 1)


def _stage_loss_from_targets(
    scores: torch.Tensor,
    boxes: torch.Tensor,
    targets: DistillTargets,
    gt_boxes: torch.Tensor,
    *,
    w_d: float,
    gamma: float,
    lambda_l1: float,
    lambda_giou: float,
) -> torch.Tensor:
    t, w, reg_q, reg_gt, reg_w = targets_to_arrays(targets, scores.shape[-1])
    reg_w = np.where(np.isnan(reg_w), w_d, reg_w)
    t_t = torch.from_numpy(t)
    w_t = torch.from_numpy(w)
    loss = (qfl(scores, t_t, gamma) * w_t).sum()
    if len(reg_q) > 0:
        pred = boxes[torch.from_numpy(reg_q)]
        tgt = gt_boxes[torch.from_numpy(reg_gt)]
        weights = torch.from_numpy(reg_w)
        loss = loss + (
            weights
            * (
                lambda_l1 * geometry.paired_l1(pred, tgt)
                + lambda_giou * (1.0 - geometry.paired_giou(pred, tgt))
            )
        ).sum()
    return loss


def query_prior_assignment(
    teacher_queries: tuple[torch.Tensor, torch.Tensor],
    gts,
    student_model,
    feats: torch.Tensor,
    *,
    cost_weights: CostWeights | None = None,
    gamma: float = DEFAULT_GAMMA,
    lambda_l1: float = DEFAULT_LAMBDA_L1,
    lambda_giou: float = DEFAULT_LAMBDA_GIOU,
) -> torch.Tensor:
    """Ablation variant: the teacher's initial queries form an extra group
    decoded by the student and supervised against the GTs via fresh
    Hungarian matching; teacher outputs are never targets.  Excluded at
    inference by construction."""
    q0, a0 = teacher_queries
    if q0.shape[0] == 0:
        return torch.zeros((), dtype=torch.float64)
    if cost_weights is None:
        cost_weights = CostWeights()
    if feats.ndim == 2:
        feats = feats[None]
    num_gts = len(gts)
    gt_classes = np.array([g.class_index for g in gts], dtype=np.int64)
    gt_boxes_t = geometry.boxes_to_tensor([g.box for g in gts])
    gt_counts = np.array([num_gts])

    outputs = student_model(feats, q0.detach()[None], a0.detach()[None])
    total = torch.zeros((), dtype=torch.float64)
    for out in outputs:
        cost = batched_cost_matrices(
            out.boxes.detach(),
            out.scores.detach(),
            gt_boxes_t[None],
            torch.from_numpy(gt_classes)[None],
            gt_counts,
            cost_weights,
        )[0]
        with torch.no_grad():
            iou = geometry.pairwise_iou(out.boxes[0], gt_boxes_t).cpu().numpy()
        assign = solve_batch(cost[None], gt_counts)[0]
        fresh = {q: int(g) for q, g in enumerate(assign) if g >= 0}
        fused = fuse_assignments(
            fresh, {}, iou, gt_classes, cost, num_queries=q0.shape[0]
        )
        total = total + _stage_loss_from_targets(
            out.scores[0],
            out.boxes[0],
            fused,
            gt_boxes_t,
            w_d=1.0,
            gamma=gamma,
            lambda_l1=lambda_l1,
            lambda_giou=lambda_giou,
        )
    return total / max(num_gts, 1)
