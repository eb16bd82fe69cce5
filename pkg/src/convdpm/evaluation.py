"""PASCAL-style average precision with all-points interpolation."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .nms import iou


@dataclass
class PRCurve:
    precision: np.ndarray
    recall: np.ndarray
    ap: float
    n_positives: int
    tp: np.ndarray = field(default=None, repr=False)


@dataclass
class EvalReport:
    per_class: dict                 # name -> PRCurve
    mean_ap: float
    notes: list

    def lines(self):
        out = []
        for name in sorted(self.per_class):
            c = self.per_class[name]
            out.append(f"AP {name} {c.ap:.6f} positives={c.n_positives}")
        out.append(f"mAP {self.mean_ap:.6f}")
        out += [f"note {n}" for n in self.notes]
        return out


def average_precision(recall, precision):
    """Area under the monotone precision envelope, summed at recall steps."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def evaluate_class(detections, gt_by_image, iou_threshold=0.5) -> PRCurve:
    """``detections``: list of (image_id, score, box); ``gt_by_image``: image -> [n, 4]."""
    npos = sum(len(b) for b in gt_by_image.values())
    order = sorted(range(len(detections)), key=lambda k: -detections[k][1])
    used = {img: np.zeros(len(b), dtype=bool) for img, b in gt_by_image.items()}
    tp = np.zeros(len(order))
    for rank, k in enumerate(order):
        image_id, _, box = detections[k]
        gts = gt_by_image.get(image_id)
        if gts is None or len(gts) == 0:
            continue
        ov = iou(np.asarray(box, dtype=np.float64), gts)
        j = int(np.argmax(ov))
        if ov[j] >= iou_threshold and not used[image_id][j]:
            tp[rank] = 1.0
            used[image_id][j] = True
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / npos if npos else np.zeros_like(ctp)
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).tiny)
    ap = average_precision(recall, precision) if npos else float("nan")
    return PRCurve(precision, recall, ap, npos, tp)


def evaluate(detections, annotations, iou_threshold=0.5, class_names=None) -> EvalReport:
    """``detections``: (image_id, class_name, score, box); ``annotations``: list of Annotation."""
    gt = defaultdict(dict)
    for ann in annotations:
        for name, box in zip(ann.labels, ann.boxes):
            gt[name].setdefault(ann.image_id, []).append(box)
    names = list(class_names) if class_names is not None else sorted(
        set(gt) | {d[1] for d in detections})
    per_det = defaultdict(list)
    for image_id, name, score, box in detections:
        per_det[name].append((image_id, float(score), box))
    per_class, notes = {}, []
    for name in names:
        if name not in gt:
            notes.append(f"class {name} has no ground truth; AP undefined, excluded from mAP")
            continue
        gt_by_image = {img: np.asarray(b, dtype=np.float64).reshape(-1, 4) for img, b in gt[name].items()}
        for ann in annotations:
            gt_by_image.setdefault(ann.image_id, np.zeros((0, 4)))
        per_class[name] = evaluate_class(per_det[name], gt_by_image, iou_threshold)
    mean_ap = float(np.mean([c.ap for c in per_class.values()])) if per_class else float("nan")
    return EvalReport(per_class, mean_ap, notes)
