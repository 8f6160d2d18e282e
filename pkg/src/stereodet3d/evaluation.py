"""Difficulty bucketing and interpolated average precision.

The three buckets are nested: every annotation eligible for "easy" is also
eligible for "moderate" and "hard". Matching is greedy per frame in
descending score order with one match per ground-truth box; detections
matched to out-of-bucket objects or to DontCare regions are removed from
the false-positive pool rather than penalized.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .geometry import iou_2d, iou_3d, iou_bev

IOU_KINDS = ("2d", "bev", "3d")


@dataclass(frozen=True)
class DifficultyBucket:
    name: str
    min_box_height: float
    max_occlusion: int
    max_truncation: float


EASY = DifficultyBucket("easy", 40.0, 0, 0.15)
MODERATE = DifficultyBucket("moderate", 25.0, 1, 0.30)
HARD = DifficultyBucket("hard", 25.0, 2, 0.50)
BUCKETS = (EASY, MODERATE, HARD)


def bucket_of(ann) -> set[DifficultyBucket]:
    """All difficulty buckets whose thresholds the annotation satisfies."""
    out = set()
    for b in BUCKETS:
        if (
            ann.box_height >= b.min_box_height
            and ann.occlusion <= b.max_occlusion
            and ann.truncation <= b.max_truncation
        ):
            out.add(b)
    return out


def _object_iou(det, gt, kind: str) -> float:
    if kind == "2d":
        return iou_2d(det.box2d, gt.box2d)
    if min(det.w3d, det.h3d, det.l3d, gt.w3d, gt.h3d, gt.l3d) <= 0:
        return 0.0  # degenerate geometry cannot overlap anything
    if kind == "bev":
        return iou_bev(
            (det.location[0], det.location[2], det.w3d, det.l3d, det.rotation_y),
            (gt.location[0], gt.location[2], gt.w3d, gt.l3d, gt.rotation_y),
        )
    return iou_3d(
        (*det.location, det.w3d, det.h3d, det.l3d, det.rotation_y),
        (*gt.location, gt.w3d, gt.h3d, gt.l3d, gt.rotation_y),
    )


def _dontcare_overlap(det, dc) -> float:
    """Intersection over detection area against a DontCare region."""
    ax1, ay1, ax2, ay2 = det.box2d
    bx1, by1, bx2, by2 = dc.box2d
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    area = (ax2 - ax1) * (ay2 - ay1)
    return iw * ih / area if area > 0 else 0.0


def _match_frame(gts, dets, kind, threshold, bucket, class_name):
    """Classify one frame's detections into scored TP/FP/ignored outcomes."""
    relevant, ignored, dontcare = [], [], []
    for g in gts:
        if g.dontcare:
            dontcare.append(g)
        elif g.class_name == class_name:
            (relevant if bucket in bucket_of(g) else ignored).append(g)
    outcomes = []  # (score, is_tp) for countable detections
    taken_rel = [False] * len(relevant)
    taken_ign = [False] * len(ignored)
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    for i in order:
        det = dets[i]
        if det.class_name != class_name:
            continue
        best_j, best_iou = -1, -1.0
        for j, g in enumerate(relevant):
            if taken_rel[j]:
                continue
            iou = _object_iou(det, g, kind)
            if iou >= threshold and iou > best_iou:
                best_j, best_iou = j, iou
        if best_j >= 0:
            taken_rel[best_j] = True
            outcomes.append((det.score, True))
            continue
        matched_ignored = False
        for j, g in enumerate(ignored):
            if not taken_ign[j] and _object_iou(det, g, kind) >= threshold:
                taken_ign[j] = True
                matched_ignored = True
                break
        if matched_ignored:
            continue
        if any(_dontcare_overlap(det, dc) >= threshold for dc in dontcare):
            continue
        outcomes.append((det.score, False))
    return len(relevant), outcomes


def average_precision(
    gts,
    dets,
    *,
    iou_kind: str,
    iou_threshold: float,
    bucket: DifficultyBucket,
    n_recall_points: int = 40,
    class_name: str = "Car",
) -> float:
    """Interpolated AP over per-frame annotation / detection lists.

    Precision is swept over score thresholds (ties handled jointly, so the
    result is independent of frame ordering) and sampled at the standard
    recall grids: 40 points over (0, 1] or 11 points over [0, 1].
    """
    if iou_kind not in IOU_KINDS:
        raise InputError(f"iou_kind must be one of {IOU_KINDS}, got {iou_kind!r}")
    if n_recall_points not in (11, 40):
        raise InputError(f"n_recall_points must be 11 or 40, got {n_recall_points}")
    if not 0.0 <= iou_threshold <= 1.0:
        raise InputError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    if len(gts) != len(dets):
        raise InputError(
            f"frame count mismatch: {len(gts)} ground-truth vs {len(dets)} detection frames"
        )
    n_pos = 0
    outcomes = []
    for frame_gts, frame_dets in zip(gts, dets):
        n, frame_outcomes = _match_frame(
            frame_gts, frame_dets, iou_kind, iou_threshold, bucket, class_name
        )
        n_pos += n
        outcomes.extend(frame_outcomes)
    if n_pos == 0:
        raise InputError(
            f"no eligible ground truth for class {class_name!r} in bucket "
            f"{bucket.name!r}; AP is undefined"
        )
    if not outcomes:
        return 0.0
    scores = np.array([o[0] for o in outcomes], dtype=np.float64)
    is_tp = np.array([o[1] for o in outcomes], dtype=bool)
    thresholds = np.unique(scores)[::-1]
    at_least = scores[None, :] >= thresholds[:, None]
    tp = (at_least & is_tp[None, :]).sum(axis=1).astype(np.float64)
    fp = (at_least & ~is_tp[None, :]).sum(axis=1).astype(np.float64)
    recall = tp / n_pos
    precision = tp / np.maximum(tp + fp, 1.0)
    if n_recall_points == 40:
        grid = np.arange(1, 41, dtype=np.float64) / 40.0
    else:
        grid = np.arange(11, dtype=np.float64) / 10.0
    ap = 0.0
    for r in grid:
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / len(grid)


def evaluation_report(
    gts, dets, *, iou_kind: str, iou_threshold: float, n_recall_points: int = 40
) -> str:
    """Plain-text AP report over every class present in the ground truth."""
    classes = sorted(
        {g.class_name for frame in gts for g in frame if not g.dontcare}
    )
    lines = []
    for cls in classes:
        for bucket in BUCKETS:
            try:
                ap = average_precision(
                    gts,
                    dets,
                    iou_kind=iou_kind,
                    iou_threshold=iou_threshold,
                    bucket=bucket,
                    n_recall_points=n_recall_points,
                    class_name=cls,
                )
                value = f"{ap:.4f}"
            except InputError:
                value = "undefined (no eligible ground truth)"
            lines.append(
                f"class={cls} bucket={bucket.name} kind={iou_kind} "
                f"iou>={iou_threshold:.2f} AP={value}"
            )
    return "\n".join(lines) + ("\n" if lines else "")
