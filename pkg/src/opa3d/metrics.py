"""Oriented-box IoU and mAP evaluation."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import OrientedBox

IOU_THRESHOLDS = (0.25, 0.5)


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a simple polygon given as (k, 2) vertices."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_convex(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of ``subject`` by the CCW convex ``clipper``."""
    out = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    out.append(_cross_point(prev, cur, s_prev, s_cur))
                out.append(cur)
            elif s_prev >= 0:
                out.append(_cross_point(prev, cur, s_prev, s_cur))
            prev, s_prev = cur, s_cur
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _cross_point(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def iou_3d(a: OrientedBox, b: OrientedBox) -> float:
    """3D IoU of two z-rotated boxes."""
    za0, za1 = a.center[2] - a.half[2], a.center[2] + a.half[2]
    zb0, zb1 = b.center[2] - b.half[2], b.center[2] + b.half[2]
    dz = min(za1, zb1) - max(za0, zb0)
    if dz <= 0:
        return 0.0
    reach = (np.hypot(a.size[0], a.size[1]) + np.hypot(b.size[0], b.size[1])) / 2
    if np.hypot(*(a.center[:2] - b.center[:2])) > reach:
        return 0.0
    area = polygon_area(clip_convex(a.corners_xy(), b.corners_xy()))
    inter = area * dz
    union = a.volume + b.volume - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


@dataclass
class Detection:
    """One scored box prediction for evaluation."""

    scene_id: str
    box: OrientedBox
    score: float
    index: int = 0


def average_precision(detections, gts: dict, iou_threshold: float, class_id: int):
    """All-point interpolated AP for one class.

    ``detections`` is a list of :class:`Detection` (any class; filtered here).
    ``gts`` maps scene id to that scene's GT boxes. Returns ``(ap, tp, fp,
    n_gt)`` with ``ap`` None when the class has no GT.
    """
    gt_by_scene = {sid: [b for b in boxes if b.class_id == class_id] for sid, boxes in gts.items()}
    n_gt = sum(len(v) for v in gt_by_scene.values())
    dets = [d for d in detections if d.box.class_id == class_id]
    dets.sort(key=lambda d: (-d.score, d.scene_id, d.index))
    used = {sid: np.zeros(len(v), dtype=bool) for sid, v in gt_by_scene.items()}
    tp = np.zeros(len(dets))
    for k, det in enumerate(dets):
        cands = gt_by_scene.get(det.scene_id, [])
        best, best_iou = -1, iou_threshold
        for j, gt in enumerate(cands):
            if used[det.scene_id][j]:
                continue
            iou = iou_3d(det.box, gt)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = j, iou
        if best >= 0:
            used[det.scene_id][best] = True
            tp[k] = 1.0
    n_tp = int(tp.sum())
    n_fp = len(dets) - n_tp
    if n_gt == 0:
        return None, n_tp, n_fp, 0
    if not dets:
        return 0.0, 0, 0, n_gt
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(dets) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    ap = float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))
    return ap, n_tp, n_fp, n_gt


@dataclass
class EvalResult:
    ap: dict = field(default_factory=dict)          # {threshold: {class_id: ap}}
    counts: dict = field(default_factory=dict)      # {threshold: {class_id: (tp, fp, gt)}}

    def map_at(self, threshold: float) -> float:
        aps = [v for v in self.ap.get(threshold, {}).values() if v is not None]
        return float(np.mean(aps)) if aps else 0.0

    @property
    def map25(self) -> float:
        return self.map_at(0.25)

    @property
    def map50(self) -> float:
        return self.map_at(0.5)

    def to_dict(self) -> dict:
        return {
            "mAP@0.25": self.map25,
            "mAP@0.5": self.map50,
            "per_class": {
                str(t): {str(c): ap for c, ap in aps.items()} for t, aps in self.ap.items()
            },
            "counts": {
                str(t): {str(c): {"tp": v[0], "fp": v[1], "gt": v[2]} for c, v in cs.items()}
                for t, cs in self.counts.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_csv_row(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["mAP@0.25", "mAP@0.5"])
        writer.writerow([repr(self.map25), repr(self.map50)])
        return buf.getvalue()


def evaluate_detections(detections, gts: dict, n_classes: int, thresholds=IOU_THRESHOLDS) -> EvalResult:
    result = EvalResult()
    for t in thresholds:
        result.ap[t], result.counts[t] = {}, {}
        for c in range(n_classes):
            ap, n_tp, n_fp, n_gt = average_precision(detections, gts, t, c)
            if n_gt > 0:
                result.ap[t][c] = ap
            result.counts[t][c] = (n_tp, n_fp, n_gt)
    return result


def evaluate(detector, scenes, thresholds=IOU_THRESHOLDS, **nms_kwargs) -> EvalResult:
    """Run ``detector`` with NMS over annotated scenes and score mAP."""
    from .detector import nms

    if not scenes:
        raise ValueError("evaluation needs at least one scene")
    detections = []
    for scene in scenes:
        kept = nms(detector.detect(scene.points), **nms_kwargs)
        for i, p in enumerate(kept):
            detections.append(Detection(scene.id, p.to_box(), p.score, i))
    gts = {s.id: list(s.boxes or []) for s in scenes}
    return evaluate_detections(detections, gts, detector.n_classes, thresholds)
