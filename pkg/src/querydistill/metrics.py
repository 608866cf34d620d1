"""Training-stability metrics and desk-scale detection quality.

Match snapshots record, for a fixed validation split, which query each GT
object is assigned to at an epoch boundary.  Instability is the fraction of
GT objects whose matched query changed between two snapshots; consistency
is the fraction matched to the same query by the online and EMA models at
the same checkpoint.  Average precision follows the COCO recipe at desk
scale: per class, score-sorted greedy matching at each IoU threshold with
each GT claimable once, 101-point interpolated precision-recall area,
averaged over classes and thresholds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

COCO_IOU_THRESHOLDS = tuple(np.arange(0.5, 0.951, 0.05).round(2).tolist())
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class MatchSnapshot:
    """Per-GT matched query indices over a fixed scene enumeration."""

    gt_counts: np.ndarray  # [num_scenes]
    matched_query: np.ndarray  # [total_gts], -1 for unmatched GTs

    @staticmethod
    def from_assignments(per_scene_gt_to_query: list[np.ndarray]) -> "MatchSnapshot":
        counts = np.array([len(a) for a in per_scene_gt_to_query], dtype=np.int64)
        if len(per_scene_gt_to_query) == 0:
            return MatchSnapshot(counts, np.zeros(0, dtype=np.int64))
        return MatchSnapshot(
            counts, np.concatenate(per_scene_gt_to_query).astype(np.int64)
        )


def _check_enumeration(a: MatchSnapshot, b: MatchSnapshot) -> None:
    if a.gt_counts.shape != b.gt_counts.shape or not np.array_equal(
        a.gt_counts, b.gt_counts
    ):
        raise ValueError("snapshots cover different scene/GT enumerations")


def instability(prev: MatchSnapshot, curr: MatchSnapshot) -> float:
    """Fraction of GT objects whose matched query index changed."""
    _check_enumeration(prev, curr)
    if prev.matched_query.size == 0:
        return 0.0
    return float(np.mean(prev.matched_query != curr.matched_query))


def consistency(student_snap: MatchSnapshot, teacher_snap: MatchSnapshot) -> float:
    """Fraction of GT objects matched to the same query by both models."""
    _check_enumeration(student_snap, teacher_snap)
    if student_snap.matched_query.size == 0:
        return 1.0
    return float(np.mean(student_snap.matched_query == teacher_snap.matched_query))


def _corners(boxes: np.ndarray) -> np.ndarray:
    out = np.empty_like(boxes)
    out[:, 0] = boxes[:, 0] - boxes[:, 2] / 2
    out[:, 1] = boxes[:, 1] - boxes[:, 3] / 2
    out[:, 2] = boxes[:, 0] + boxes[:, 2] / 2
    out[:, 3] = boxes[:, 1] + boxes[:, 3] / 2
    return out


def _iou_matrix_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ca, cb = _corners(a), _corners(b)
    lt = np.maximum(ca[:, None, :2], cb[None, :, :2])
    rb = np.minimum(ca[:, None, 2:], cb[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (ca[:, 2] - ca[:, 0]) * (ca[:, 3] - ca[:, 1])
    area_b = (cb[:, 2] - cb[:, 0]) * (cb[:, 3] - cb[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def _class_ap(
    dets: list[tuple[float, int, np.ndarray]],
    gt_by_scene: dict[int, np.ndarray],
    iou_by_det: list[np.ndarray],
    threshold: float,
) -> float:
    """AP for one class at one IoU threshold; ``dets`` are score-sorted."""
    num_gt = sum(len(v) for v in gt_by_scene.values())
    if num_gt == 0:
        return float("nan")
    if len(dets) == 0:
        return 0.0
    claimed = {scene: np.zeros(len(v), dtype=bool) for scene, v in gt_by_scene.items()}
    tp = np.zeros(len(dets))
    for k, (_, scene, _) in enumerate(dets):
        ious = iou_by_det[k]
        if ious.size == 0:
            continue
        free = ~claimed[scene]
        masked = np.where(free, ious, -1.0)
        j = int(np.argmax(masked))
        if masked[j] >= threshold:
            claimed[scene][j] = True
            tp[k] = 1.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / num_gt
    precision = cum_tp / np.arange(1, len(dets) + 1)
    # right-to-left precision envelope, sampled at 101 recall points
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(dets), envelope[np.minimum(idx, len(dets) - 1)], 0.0)
    return float(sampled.mean())


def average_precision(
    preds_per_scene: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
    gts_per_scene: list[tuple[np.ndarray, np.ndarray]],
    iou_thresholds=COCO_IOU_THRESHOLDS,
) -> float:
    """Mean AP over classes (those with at least one GT) and thresholds.

    ``preds_per_scene``: per scene ``(boxes [K,4], scores [K], classes [K])``;
    ``gts_per_scene``: per scene ``(boxes [M,4], classes [M])``.  Detection
    order is deterministic: stable sort by descending score.
    """
    if len(preds_per_scene) != len(gts_per_scene):
        raise ValueError("prediction and GT scene lists differ in length")
    classes = sorted(
        {int(c) for _, gcls in gts_per_scene for c in np.asarray(gcls).tolist()}
    )
    if not classes:
        return 0.0
    aps = []
    for cls in classes:
        gt_by_scene: dict[int, np.ndarray] = {}
        for scene, (gb, gc) in enumerate(gts_per_scene):
            gb = np.asarray(gb, dtype=np.float64).reshape(-1, 4)
            mask = np.asarray(gc) == cls
            gt_by_scene[scene] = gb[mask]
        dets: list[tuple[float, int, np.ndarray]] = []
        for scene, (pb, ps, pc) in enumerate(preds_per_scene):
            pb = np.asarray(pb, dtype=np.float64).reshape(-1, 4)
            ps = np.asarray(ps, dtype=np.float64).reshape(-1)
            mask = np.asarray(pc) == cls
            for box, score in zip(pb[mask], ps[mask]):
                dets.append((float(score), scene, box))
        order = np.argsort([-d[0] for d in dets], kind="stable")
        dets = [dets[i] for i in order]
        iou_by_det = [
            _iou_matrix_np(d[2][None], gt_by_scene[d[1]]).ravel()
            if len(gt_by_scene[d[1]]) > 0
            else np.zeros(0)
            for d in dets
        ]
        for threshold in iou_thresholds:
            ap = _class_ap(dets, gt_by_scene, iou_by_det, float(threshold))
            if not np.isnan(ap):
                aps.append(ap)
    return float(np.mean(aps)) if aps else 0.0
