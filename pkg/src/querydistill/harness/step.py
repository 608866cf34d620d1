"""One training step, split into decisions and differentiable execution.

Every discrete decision of a step is made on detached values: Hungarian
matches for the student and (per stage) the teacher, match fusion into
class/regression targets, prediction-distillation score updates and gates,
and auxiliary-group selection.  The decisions form a :class:`StepPlan` of
plain arrays; the loss is then a smooth function of the student parameters.

Two entry points share all plan-assembly code:

* ``run_training_step`` is the hot path: each forward pass runs once, with
  detached views feeding the decisions and the same tensors feeding the
  loss.  The auxiliary groups of all teacher stages are decoded in one
  batched forward (rows ``g * B + b``), which is still one isolated forward
  per group since queries only attend within their own row.
* ``build_step_plan`` + ``execute_step_plan`` separate the two phases so a
  frozen plan can be re-evaluated under perturbed parameters (gradient
  checking); they produce bit-identical losses to the hot path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .. import distill, geometry
from ..losses import qfl
from ..matching import CostWeights, batched_cost_matrices, solve_batch
from ..network import Detector, StageOutput
from ..synthdata import Scene
from .config import TrainConfig


@dataclass
class StagePlan:
    """Dense supervision for one stage of one forward pass.  ``reg_row``
    indexes rows of the tensor the plan applies to; ``reg_scene`` indexes
    the original scene (for GT lookup)."""

    cls_targets: np.ndarray  # [rows, N, C]
    cls_weights: np.ndarray  # [rows, N, C]
    reg_row: np.ndarray  # [K]
    reg_query: np.ndarray  # [K]
    reg_scene: np.ndarray  # [K]
    reg_gt: np.ndarray  # [K]
    reg_weight: np.ndarray  # [K]


@dataclass
class PdStagePlan:
    targets: np.ndarray  # [B, N, C]
    reg_row: np.ndarray
    reg_query: np.ndarray
    reg_weight: np.ndarray
    teacher_boxes: torch.Tensor  # [B, N, 4], detached regression targets
    gated_off: int = 0


@dataclass
class AuxPlan:
    """All auxiliary groups, batched row-wise: row ``g * B + b`` holds the
    group seeded from teacher stage ``g`` for scene ``b``."""

    num_groups: int
    init_queries: torch.Tensor  # [G*B, S, D]
    init_anchors: torch.Tensor  # [G*B, S, 4]
    slot_mask: torch.Tensor  # [G*B, S] bool
    slot_sizes: np.ndarray  # [G*B]
    inherited: list[dict[int, int]]  # per row: slot -> source gt
    stages: list[StagePlan] = field(default_factory=list)


@dataclass
class QueryPriorPlan:
    init_queries: torch.Tensor  # [N, D]
    init_anchors: torch.Tensor  # [N, 4]
    stages: list[StagePlan] = field(default_factory=list)


@dataclass
class StepPlan:
    num_gts: int
    gt_boxes: torch.Tensor  # [B, M, 4] padded
    main: list[StagePlan]
    pd: list[PdStagePlan] | None = None
    pd_init: tuple[torch.Tensor, torch.Tensor] | None = None  # [N, D], [N, 4]
    query_prior: QueryPriorPlan | None = None
    aux: AuxPlan | None = None
    diagnostics: dict = field(default_factory=dict)
    # inter-stage anchors recorded at plan time; they are constants of the
    # differentiated function (refinement detaches them), so a frozen
    # re-evaluation must pin them
    main_anchors: list[torch.Tensor] | None = None
    pd_anchors: list[torch.Tensor] | None = None
    qp_anchors: list[torch.Tensor] | None = None
    aux_anchors: list[torch.Tensor] | None = None


def _anchor_plan(outputs) -> list:
    return [None] + [o.boxes.detach() for o in outputs[:-1]]


@dataclass
class StepResult:
    total: torch.Tensor
    components: dict[str, float]
    diagnostics: dict


def total_loss(components: dict[str, torch.Tensor | None]) -> torch.Tensor:
    """Sum of the enabled loss terms; disabled terms contribute exactly 0."""
    present = [v for v in components.values() if v is not None]
    dtype = present[0].dtype if present else torch.float64
    total = torch.zeros((), dtype=dtype)
    for value in present:
        total = total + value
    return total


def cost_weights_from(cfg: TrainConfig) -> CostWeights:
    return CostWeights(
        cls=cfg.loss.cost_cls,
        l1=cfg.loss.cost_l1,
        giou=cfg.loss.cost_giou,
        focal_alpha=cfg.loss.focal_alpha,
        focal_gamma=cfg.loss.focal_gamma,
    )


def gts_to_tensors(
    scenes: list[Scene], dtype: torch.dtype = torch.float64
) -> tuple[torch.Tensor, torch.Tensor, np.ndarray]:
    """Padded GT tensors: boxes [B, M, 4], classes [B, M] (-1 pad), counts."""
    counts = np.array([len(s.objects) for s in scenes], dtype=np.int64)
    m = max(int(counts.max()), 1) if len(scenes) else 1
    boxes = torch.zeros((len(scenes), m, 4), dtype=dtype)
    boxes[..., 2:] = 1e-3  # padded cells stay valid boxes; they are never read
    classes = torch.full((len(scenes), m), -1, dtype=torch.int64)
    for b, s in enumerate(scenes):
        for j, g in enumerate(s.objects):
            boxes[b, j] = torch.tensor(g.box.as_tuple(), dtype=dtype)
            classes[b, j] = g.class_index
    return boxes, classes, counts


def _plain_target_arrays(
    assign: np.ndarray, iou: np.ndarray, gt_classes: np.ndarray, num_classes: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """One-to-one supervision arrays for one scene (baseline path: QFL target
    at the matched class, background zeros elsewhere, unit regression
    weights).  Deliberately independent of the distill module."""
    n = assign.shape[0]
    t = np.zeros((n, num_classes))
    w = np.ones((n, num_classes))
    matched = np.nonzero(assign >= 0)[0]
    gt_idx = assign[matched]
    if len(matched):
        t[matched, gt_classes[gt_idx]] = np.clip(iou[matched, gt_idx], 0.0, 1.0)
    return t, w, matched.astype(np.int64), gt_idx.astype(np.int64), np.ones(len(matched))


def _fused_target_arrays(
    fused: distill.DistillTargets, num_classes: int, w_d: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    t, w, reg_q, reg_gt, reg_w = distill.targets_to_arrays(fused, num_classes)
    return t, w, reg_q, reg_gt, np.where(np.isnan(reg_w), w_d, reg_w)


def _assign_map(assign: np.ndarray) -> dict[int, int]:
    return {int(q): int(g) for q, g in enumerate(assign) if g >= 0}


def _stack_stage_plan(per_row, rows: int, n: int, c: int, scene_of_row) -> StagePlan:
    """Combine per-row (t, w, reg_q, reg_gt, reg_w) arrays into one padded
    plan; slots beyond a row's own count keep zero class weight."""
    cls_t = np.zeros((rows, n, c))
    cls_w = np.zeros((rows, n, c))
    reg_row, reg_q, reg_scene, reg_gt, reg_w = [], [], [], [], []
    for row, (t, w, rq, rgt, rw) in enumerate(per_row):
        size = t.shape[0]
        cls_t[row, :size] = t
        cls_w[row, :size] = w
        reg_row.extend([row] * len(rq))
        reg_scene.extend([scene_of_row(row)] * len(rq))
        reg_q.extend(rq.tolist())
        reg_gt.extend(rgt.tolist())
        reg_w.extend(rw.tolist())
    return StagePlan(
        cls_targets=cls_t,
        cls_weights=cls_w,
        reg_row=np.asarray(reg_row, dtype=np.int64),
        reg_query=np.asarray(reg_q, dtype=np.int64),
        reg_scene=np.asarray(reg_scene, dtype=np.int64),
        reg_gt=np.asarray(reg_gt, dtype=np.int64),
        reg_weight=np.asarray(reg_w),
    )


class _StepBuilder:
    """Shared plan assembly over (optionally pre-computed) forward passes."""

    def __init__(
        self,
        student: Detector,
        teacher: Detector | None,
        feats: torch.Tensor,
        scenes: list[Scene],
        cfg: TrainConfig,
    ):
        self.student = student
        self.teacher = teacher
        self.feats = feats
        self.scenes = scenes
        self.cfg = cfg
        self.batch = len(scenes)
        self.n = cfg.model.num_queries
        self.c = cfg.model.num_classes
        self.weights = cost_weights_from(cfg)
        self.dtype = feats.dtype
        self.gt_boxes, self.gt_classes, self.gt_counts = gts_to_tensors(scenes, feats.dtype)
        self.gt_classes_np = self.gt_classes.cpu().numpy()
        d = cfg.distill
        self.use_teacher = d.md or d.pd or d.aux
        if self.use_teacher and teacher is None:
            raise ValueError("distillation components enabled but no teacher provided")
        self.diagnostics = {
            "two_class_queries": 0,
            "teacher_primary_queries": 0,
            "higher_cost_pairs": 0,
            "pd_gated_off": 0,
            "aux_group_sizes": [],
        }
        self.teacher_out: list[StageOutput] | None = None
        self.teacher_costs: list[np.ndarray] = []
        self.teacher_assigns: list[list[np.ndarray]] = []
        self.teacher_ious: list[np.ndarray] = []

    # -- shared pieces ----------------------------------------------------

    def run_teacher(self) -> None:
        if not self.use_teacher:
            return
        with torch.no_grad():
            self.teacher_out = self.teacher(self.feats)
            for out in self.teacher_out:
                cost = batched_cost_matrices(
                    out.boxes, out.scores, self.gt_boxes, self.gt_classes,
                    self.gt_counts, self.weights,
                )
                self.teacher_costs.append(cost)
                self.teacher_assigns.append(solve_batch(cost, self.gt_counts))
                self.teacher_ious.append(
                    geometry.pairwise_iou(out.boxes, self.gt_boxes).cpu().numpy()
                )

    def main_plans(self, student_out: list[StageOutput]) -> list[StagePlan]:
        d = self.cfg.distill
        plans = []
        for t, out in enumerate(student_out):
            with torch.no_grad():
                cost = batched_cost_matrices(
                    out.boxes, out.scores, self.gt_boxes, self.gt_classes,
                    self.gt_counts, self.weights,
                )
                assigns = solve_batch(cost, self.gt_counts)
                iou = geometry.pairwise_iou(out.boxes, self.gt_boxes).cpu().numpy()
            per_scene = []
            for b in range(self.batch):
                m = int(self.gt_counts[b])
                if d.md:
                    *arrays, diag = distill.fuse_arrays(
                        _assign_map(assigns[b]),
                        _assign_map(self.teacher_assigns[t][b]),
                        iou[b, :, :m],
                        self.gt_classes_np[b, :m],
                        cost[b, :, :m],
                        num_queries=self.n,
                        num_classes=self.c,
                        w_d=d.md_downweight,
                        fill_regression=d.md_reg,
                        secondary_iou_threshold=(
                            d.md_iou_threshold
                            if d.md_variant in ("conditional", "conditional_hard")
                            else None
                        ),
                        secondary_hard=d.md_variant == "conditional_hard",
                        cls_downweight=d.md_cls_downweight,
                    )
                    for key in (
                        "two_class_queries",
                        "teacher_primary_queries",
                        "higher_cost_pairs",
                    ):
                        self.diagnostics[key] += diag[key]
                    per_scene.append(tuple(arrays))
                else:
                    per_scene.append(
                        _plain_target_arrays(
                            assigns[b], iou[b, :, :m], self.gt_classes_np[b, :m], self.c
                        )
                    )
            plans.append(
                _stack_stage_plan(per_scene, self.batch, self.n, self.c, lambda r: r)
            )
        return plans

    def pd_init(self) -> tuple[torch.Tensor, torch.Tensor]:
        with torch.no_grad():
            q0 = self.teacher.query_embed.detach().clone()
            a0 = torch.sigmoid(self.teacher.anchor_logits.detach()).clone()
        return q0, a0

    def pd_plans(self, pd_out: list[StageOutput]) -> list[PdStagePlan]:
        d = self.cfg.distill
        plans = []
        for t, tout in enumerate(self.teacher_out):
            raw = tout.scores.cpu().numpy()
            matched = []  # (scene, query, gt, class, teacher iou)
            for b in range(self.batch):
                for i, g in _assign_map(self.teacher_assigns[t][b]).items():
                    matched.append(
                        (
                            b,
                            i,
                            g,
                            int(self.gt_classes_np[b, g]),
                            float(np.clip(self.teacher_ious[t][b, i, g], 0.0, 1.0)),
                        )
                    )
            c2 = raw.copy()
            if d.pd_variant != "naive":
                for b, i, g, cg, iou_t in matched:
                    c2[b, i, cg] = raw[b, i, cg] ** d.pd_alpha * iou_t**d.pd_beta
            if d.pd_cls_mode == "single_entry":
                targets = np.zeros_like(c2)
                for b, i, g, cg, iou_t in matched:
                    targets[b, i, cg] = c2[b, i, cg]
            else:
                targets = c2

            reg_b: list[int] = []
            reg_q: list[int] = []
            reg_w: list[float] = []
            gated_off = 0
            if d.pd_variant == "naive":
                bs, qs = np.meshgrid(
                    np.arange(self.batch), np.arange(raw.shape[1]), indexing="ij"
                )
                reg_b = bs.ravel().tolist()
                reg_q = qs.ravel().tolist()
                reg_w = [1.0] * len(reg_b)
            else:
                pd_iou = None
                if d.pd_variant == "gated":
                    with torch.no_grad():
                        pd_iou = (
                            geometry.pairwise_iou(pd_out[t].boxes, self.gt_boxes)
                            .cpu()
                            .numpy()
                        )
                for b, i, g, cg, iou_t in matched:
                    if d.pd_variant == "gated" and not (iou_t > float(pd_iou[b, i, g])):
                        gated_off += 1
                        continue
                    reg_b.append(b)
                    reg_q.append(i)
                    reg_w.append(float(c2[b, i, cg]))
            self.diagnostics["pd_gated_off"] += gated_off
            plans.append(
                PdStagePlan(
                    targets=targets,
                    reg_row=np.asarray(reg_b, dtype=np.int64),
                    reg_query=np.asarray(reg_q, dtype=np.int64),
                    reg_weight=np.asarray(reg_w),
                    teacher_boxes=tout.boxes.detach(),
                    gated_off=gated_off,
                )
            )
        return plans

    def query_prior_stages(self, qp_out: list[StageOutput]) -> list[StagePlan]:
        plans = []
        for out in qp_out:
            with torch.no_grad():
                cost = batched_cost_matrices(
                    out.boxes, out.scores, self.gt_boxes, self.gt_classes,
                    self.gt_counts, self.weights,
                )
                assigns = solve_batch(cost, self.gt_counts)
                iou = geometry.pairwise_iou(out.boxes, self.gt_boxes).cpu().numpy()
            per_scene = [
                _plain_target_arrays(
                    assigns[b],
                    iou[b, :, : int(self.gt_counts[b])],
                    self.gt_classes_np[b, : int(self.gt_counts[b])],
                    self.c,
                )
                for b in range(self.batch)
            ]
            plans.append(
                _stack_stage_plan(per_scene, self.batch, self.n, self.c, lambda r: r)
            )
        return plans

    def aux_inits(self) -> AuxPlan | None:
        """Top-2-per-GT slot selection for every teacher stage, batched into
        rows ``g * B + b``."""
        num_groups = len(self.teacher_out)
        slots = []
        for t in range(num_groups):
            group_sizes = []
            for b in range(self.batch):
                sq, sg = distill.top2_per_gt(
                    self.teacher_costs[t][b, :, : int(self.gt_counts[b])]
                )
                slots.append((t, b, sq, sg))
                group_sizes.append(len(sq))
            self.diagnostics["aux_group_sizes"].append(group_sizes)
        s_max = max(len(sq) for _, _, sq, _ in slots)
        if s_max == 0:
            return None
        rows = num_groups * self.batch
        dmodel = self.cfg.model.d_model
        init_q = torch.zeros((rows, s_max, dmodel), dtype=self.dtype)
        init_a = torch.full((rows, s_max, 4), 0.5, dtype=self.dtype)
        mask = torch.zeros((rows, s_max), dtype=torch.bool)
        sizes = np.zeros(rows, dtype=np.int64)
        inherited: list[dict[int, int]] = [{} for _ in range(rows)]
        for t, b, sq, sg in slots:
            row = t * self.batch + b
            sizes[row] = len(sq)
            if len(sq) == 0:
                continue
            idx = torch.from_numpy(sq)
            init_q[row, : len(sq)] = self.teacher_out[t].queries[b, idx].detach()
            init_a[row, : len(sq)] = self.teacher_out[t].boxes[b, idx].detach()
            mask[row, : len(sq)] = True
            inherited[row] = {s: int(g) for s, g in enumerate(sg)}
        return AuxPlan(
            num_groups=num_groups,
            init_queries=init_q,
            init_anchors=init_a,
            slot_mask=mask,
            slot_sizes=sizes,
            inherited=inherited,
        )

    def aux_feats(self, aux: AuxPlan) -> torch.Tensor:
        return self.feats.repeat(aux.num_groups, 1, 1)

    def aux_stage_plans(self, aux: AuxPlan, aux_out: list[StageOutput]) -> None:
        d = self.cfg.distill
        rows = aux.num_groups * self.batch
        counts_tiled = np.tile(self.gt_counts, aux.num_groups)
        gt_boxes_tiled = self.gt_boxes.repeat(aux.num_groups, 1, 1)
        gt_classes_tiled = self.gt_classes.repeat(aux.num_groups, 1)
        s_max = aux.init_queries.shape[1]
        for out in aux_out:
            with torch.no_grad():
                cost = batched_cost_matrices(
                    out.boxes, out.scores, gt_boxes_tiled, gt_classes_tiled,
                    counts_tiled, self.weights,
                )
                iou = geometry.pairwise_iou(out.boxes, gt_boxes_tiled).cpu().numpy()
            per_row = []
            for row in range(rows):
                size = int(aux.slot_sizes[row])
                m = int(counts_tiled[row])
                if size == 0:
                    per_row.append(
                        (
                            np.zeros((0, self.c)),
                            np.zeros((0, self.c)),
                            np.zeros(0, dtype=np.int64),
                            np.zeros(0, dtype=np.int64),
                            np.zeros(0),
                        )
                    )
                    continue
                sub_cost = cost[row, :size, :m]
                if d.aux_variant == "original_matching":
                    fresh: dict[int, int] = {}
                else:
                    fresh = _assign_map(
                        solve_batch(sub_cost[None], np.array([m]))[0]
                    )
                teacher_side = {} if d.aux_variant == "re_matching" else aux.inherited[row]
                *arrays, diag = distill.fuse_arrays(
                    fresh,
                    teacher_side,
                    iou[row, :size, :m],
                    self.gt_classes_np[row % self.batch, :m],
                    sub_cost,
                    num_queries=size,
                    num_classes=self.c,
                    w_d=d.md_downweight,
                )
                per_row.append(tuple(arrays))
            aux.stages.append(
                _stack_stage_plan(per_row, rows, s_max, self.c, lambda r: r % self.batch)
            )


def build_step_plan(
    student: Detector,
    teacher: Detector | None,
    feats: torch.Tensor,
    scenes: list[Scene],
    cfg: TrainConfig,
) -> StepPlan:
    """All decisions of one step from no-grad forward passes (for gradient
    checking and tests; the training loop uses :func:`run_training_step`)."""
    builder = _StepBuilder(student, teacher, feats, scenes, cfg)
    builder.run_teacher()
    d = cfg.distill
    with torch.no_grad():
        student_out = student(feats)
    plan = StepPlan(
        num_gts=int(builder.gt_counts.sum()),
        gt_boxes=builder.gt_boxes,
        main=builder.main_plans(student_out),
        diagnostics=builder.diagnostics,
    )
    plan.main_anchors = _anchor_plan(student_out)
    if d.pd and d.pd_variant == "query_prior":
        q0, a0 = builder.pd_init()
        with torch.no_grad():
            qp_out = student(
                feats,
                q0[None].expand(builder.batch, -1, -1),
                a0[None].expand(builder.batch, -1, -1),
            )
        plan.query_prior = QueryPriorPlan(
            init_queries=q0, init_anchors=a0, stages=builder.query_prior_stages(qp_out)
        )
        plan.qp_anchors = _anchor_plan(qp_out)
    elif d.pd:
        q0, a0 = builder.pd_init()
        with torch.no_grad():
            pd_out = student(
                feats,
                q0[None].expand(builder.batch, -1, -1),
                a0[None].expand(builder.batch, -1, -1),
            )
        plan.pd = builder.pd_plans(pd_out)
        plan.pd_init = (q0, a0)
        plan.pd_anchors = _anchor_plan(pd_out)
    if d.aux:
        aux = builder.aux_inits()
        if aux is not None:
            with torch.no_grad():
                aux_out = student(
                    builder.aux_feats(aux), aux.init_queries, aux.init_anchors,
                    aux.slot_mask,
                )
            builder.aux_stage_plans(aux, aux_out)
            plan.aux_anchors = _anchor_plan(aux_out)
        plan.aux = aux
    return plan


def _cls_term(scores: torch.Tensor, sp: StagePlan, gamma: float) -> torch.Tensor:
    targets = torch.from_numpy(sp.cls_targets).to(scores.dtype)
    weights = torch.from_numpy(sp.cls_weights).to(scores.dtype)
    return (qfl(scores, targets, gamma) * weights).sum()


def _reg_term(
    boxes: torch.Tensor,
    target_boxes: torch.Tensor,
    sp: StagePlan,
    lambda_l1: float,
    lambda_giou: float,
) -> torch.Tensor:
    """Weighted L1 + GIoU over the plan's (row, query) -> (scene, gt) pairs;
    ``target_boxes`` is indexed by ``reg_scene``."""
    if len(sp.reg_query) == 0:
        return torch.zeros((), dtype=torch.float64)
    pred = boxes[torch.from_numpy(sp.reg_row), torch.from_numpy(sp.reg_query)]
    tgt = target_boxes[torch.from_numpy(sp.reg_scene), torch.from_numpy(sp.reg_gt)]
    w = torch.from_numpy(sp.reg_weight).to(boxes.dtype)
    return (
        w
        * (
            lambda_l1 * geometry.paired_l1(pred, tgt)
            + lambda_giou * (1.0 - geometry.paired_giou(pred, tgt))
        )
    ).sum()


def _assemble(
    plan: StepPlan,
    cfg: TrainConfig,
    student_out: list[StageOutput],
    pd_out: list[StageOutput] | None,
    qp_out: list[StageOutput] | None,
    aux_out: list[StageOutput] | None,
) -> StepResult:
    lam1, lamg = cfg.loss.lambda_l1, cfg.loss.lambda_giou
    gamma = cfg.loss.qfl_gamma
    norm = max(plan.num_gts, 1)
    dtype = student_out[0].scores.dtype

    cls_sum = torch.zeros((), dtype=dtype)
    reg_sum = torch.zeros((), dtype=dtype)
    for out, sp in zip(student_out, plan.main):
        cls_sum = cls_sum + _cls_term(out.scores, sp, gamma)
        reg_sum = reg_sum + _reg_term(out.boxes, plan.gt_boxes, sp, lam1, lamg)
    l_mqf = cls_sum / norm
    l_r = reg_sum / norm

    l_pd = None
    if plan.pd is not None:
        acc = torch.zeros((), dtype=dtype)
        for out, pp in zip(pd_out, plan.pd):
            acc = acc + qfl(out.scores, torch.from_numpy(pp.targets).to(dtype), gamma).sum()
            if len(pp.reg_query):
                rows = torch.from_numpy(pp.reg_row)
                queries = torch.from_numpy(pp.reg_query)
                sb = out.boxes[rows, queries]
                tb = pp.teacher_boxes[rows, queries]
                w = torch.from_numpy(pp.reg_weight).to(dtype)
                acc = acc + (
                    w
                    * (
                        lam1 * geometry.paired_l1(sb, tb)
                        + lamg * (1.0 - geometry.paired_giou(sb, tb))
                    )
                ).sum()
        l_pd = acc / norm
    elif plan.query_prior is not None:
        acc = torch.zeros((), dtype=dtype)
        for out, sp in zip(qp_out, plan.query_prior.stages):
            acc = acc + _cls_term(out.scores, sp, gamma)
            acc = acc + _reg_term(out.boxes, plan.gt_boxes, sp, lam1, lamg)
        l_pd = acc / norm

    l_aux = None
    if plan.aux is not None:
        acc = torch.zeros((), dtype=dtype)
        for out, sp in zip(aux_out, plan.aux.stages):
            acc = acc + _cls_term(out.scores, sp, gamma)
            acc = acc + _reg_term(out.boxes, plan.gt_boxes, sp, lam1, lamg)
        l_aux = acc / norm
    elif cfg.distill.aux:
        l_aux = torch.zeros((), dtype=dtype)

    components = {"loss_mqf": l_mqf, "loss_r": l_r, "loss_pd": l_pd, "loss_aux": l_aux}
    total = total_loss(components)
    floats = {
        key: (float(value.detach()) if value is not None else 0.0)
        for key, value in components.items()
    }
    return StepResult(total=total, components=floats, diagnostics=plan.diagnostics)


def execute_step_plan(
    student: Detector, feats: torch.Tensor, plan: StepPlan, cfg: TrainConfig
) -> StepResult:
    """Evaluate a frozen plan's loss under the student's current parameters
    (fresh differentiable forward passes)."""
    batch = feats.shape[0]
    student_out = student(feats, anchor_plan=plan.main_anchors)
    pd_out = qp_out = aux_out = None
    if plan.pd is not None:
        q0, a0 = plan.pd_init
        pd_out = student(
            feats,
            q0[None].expand(batch, -1, -1),
            a0[None].expand(batch, -1, -1),
            anchor_plan=plan.pd_anchors,
        )
    if plan.query_prior is not None:
        qp = plan.query_prior
        qp_out = student(
            feats,
            qp.init_queries[None].expand(batch, -1, -1),
            qp.init_anchors[None].expand(batch, -1, -1),
            anchor_plan=plan.qp_anchors,
        )
    if plan.aux is not None:
        aux_out = student(
            feats.repeat(plan.aux.num_groups, 1, 1),
            plan.aux.init_queries,
            plan.aux.init_anchors,
            plan.aux.slot_mask,
            anchor_plan=plan.aux_anchors,
        )
    return _assemble(plan, cfg, student_out, pd_out, qp_out, aux_out)


def run_training_step(
    student: Detector,
    teacher: Detector | None,
    feats: torch.Tensor,
    scenes: list[Scene],
    cfg: TrainConfig,
) -> StepResult:
    """Hot path: each forward pass runs once; detached views of the same
    tensors feed the decisions that the loss then uses."""
    builder = _StepBuilder(student, teacher, feats, scenes, cfg)
    builder.run_teacher()
    d = cfg.distill

    student_out = student(feats)
    plan = StepPlan(
        num_gts=int(builder.gt_counts.sum()),
        gt_boxes=builder.gt_boxes,
        main=builder.main_plans(student_out),
        diagnostics=builder.diagnostics,
    )

    pd_out = qp_out = aux_out = None
    if d.pd and d.pd_variant == "query_prior":
        q0, a0 = builder.pd_init()
        qp_out = student(
            feats,
            q0[None].expand(builder.batch, -1, -1),
            a0[None].expand(builder.batch, -1, -1),
        )
        plan.query_prior = QueryPriorPlan(
            init_queries=q0, init_anchors=a0, stages=builder.query_prior_stages(qp_out)
        )
    elif d.pd:
        q0, a0 = builder.pd_init()
        pd_out = student(
            feats,
            q0[None].expand(builder.batch, -1, -1),
            a0[None].expand(builder.batch, -1, -1),
        )
        plan.pd = builder.pd_plans(pd_out)
        plan.pd_init = (q0, a0)
    if d.aux:
        aux = builder.aux_inits()
        if aux is not None:
            aux_out = student(
                builder.aux_feats(aux), aux.init_queries, aux.init_anchors, aux.slot_mask
            )
            builder.aux_stage_plans(aux, aux_out)
        plan.aux = aux
    return _assemble(plan, cfg, student_out, pd_out, qp_out, aux_out)
