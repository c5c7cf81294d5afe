"""Axis-aligned IoU and VOC-style all-point average precision."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .geometry import Box2D, Box3D, DegenerateBoxError
from .losses import iou_2d


@dataclass(frozen=True)
class Detection:
    box: Box3D | Box2D
    class_id: int
    score: float
    scene_id: str

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError("detection score must be finite")


@dataclass(frozen=True)
class GroundTruth:
    box: Box3D | Box2D
    class_id: int
    scene_id: str


def iou_3d(a: Box3D, b: Box3D) -> float:
    # volumes from the same corner arithmetic as the overlap, so IoU(a, a) rounds to 1
    va, vb = float(np.prod(a.max - a.min)), float(np.prod(b.max - b.min))
    if va <= 0 or vb <= 0:
        raise DegenerateBoxError("zero-volume box")
    overlap = np.clip(np.minimum(a.max, b.max) - np.maximum(a.min, b.min), 0.0, None)
    inter = float(np.prod(overlap))
    return min(1.0, inter / (va + vb - inter))


def _iou_fn(box) -> Callable:
    return iou_3d if isinstance(box, Box3D) else iou_2d


def average_precision(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thresh: float) -> float:
    """AP for a single class (callers filter by class).

    Detections are visited by descending score; each one is a true positive
    iff its best-overlapping unconsumed ground truth in the same scene reaches
    ``iou_thresh``. Area under the precision envelope over all recall points.
    """
    if not gts:
        raise ValueError("average precision undefined without ground truth")
    by_scene: dict[str, list[GroundTruth]] = defaultdict(list)
    for g in gts:
        by_scene[g.scene_id].append(g)
    consumed = {sid: np.zeros(len(v), dtype=bool) for sid, v in by_scene.items()}
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        d = dets[i]
        cands = by_scene.get(d.scene_id, [])
        best, best_j = -1.0, -1
        for j, g in enumerate(cands):
            if consumed[d.scene_id][j]:
                continue
            iou = _iou_fn(g.box)(d.box, g.box)
            if iou > best:
                best, best_j = iou, j
        if best_j >= 0 and best >= iou_thresh:
            consumed[d.scene_id][best_j] = True
            tp[rank] = 1
    if len(dets) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / len(gts)
    precision = ctp / np.arange(1, len(dets) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def per_class_ap(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thresh: float) -> dict[int, float]:
    """AP for every class that has at least one ground truth."""
    classes = sorted({g.class_id for g in gts})
    return {
        c: average_precision([d for d in dets if d.class_id == c], [g for g in gts if g.class_id == c], iou_thresh)
        for c in classes
    }


def mean_average_precision(dets, gts, iou_thresh: float) -> float:
    aps = per_class_ap(dets, gts, iou_thresh)
    return float(np.mean(list(aps.values()))) if aps else 0.0


def metrics_report(dets, gts, class_names: Sequence[str], num_scenes: int, thresholds=(0.25, 0.5)) -> dict:
    """The metrics JSON document: map_025, map_05, per_class, num_scenes."""
    def key(t):
        return "0" + str(t).split(".")[1] if t < 1 else str(t)

    out: dict = {"num_scenes": int(num_scenes), "per_class": {}}
    for t in thresholds:
        aps = per_class_ap(dets, gts, t)
        out[f"map_{key(t)}"] = float(np.mean(list(aps.values()))) if aps else 0.0
        for c, ap in aps.items():
            out["per_class"].setdefault(class_names[c], {})[f"ap_{key(t)}"] = ap
    return out
