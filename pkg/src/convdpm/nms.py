"""Class-aware overlap, neighbourhoods and greedy non-maximum suppression.

Same-class boxes compare by max-containment ``max(I/area(b), I/area(b'))``
against ``same_class``; boxes of different classes compare by IoU against
``diff_class``.  Both measures are symmetric, so "b' is in neigh(b)" and
"b is in neigh(b')" coincide.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TAGS = ("A0", "A", "A'", "Agt")


@dataclass(frozen=True)
class OverlapPolicy:
    same_class: float = 0.5
    diff_class: float = 0.75
    gt: float = 0.7

    def __post_init__(self):
        for name in ("same_class", "diff_class", "gt"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} threshold must be in (0, 1], got {v}")


@dataclass
class AssignmentSet:
    """Boxes with class labels and responses, stored column-wise.

    ``keys`` rows are (scale, class_index, row, col) and locate each entry's
    response in the per-scale class maps; they also fix the tie-break order.
    """

    boxes: np.ndarray
    labels: np.ndarray
    scores: np.ndarray
    keys: np.ndarray = None
    tag: str = "A0"
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        n = len(self.boxes)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(n)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(n)
        if self.keys is None:
            self.keys = np.zeros((n, 4), dtype=np.int64)
            self.keys[:, 3] = np.arange(n)
        self.keys = np.asarray(self.keys, dtype=np.int64).reshape(n, 4)
        if self.tag not in TAGS:
            raise ValueError(f"unknown assignment tag {self.tag!r}")

    def __len__(self):
        return len(self.boxes)

    def subset(self, index, tag=None):
        index = np.asarray(index, dtype=np.int64)
        return AssignmentSet(self.boxes[index], self.labels[index], self.scores[index],
                             self.keys[index], tag or self.tag)

    @classmethod
    def empty(cls, tag="A0"):
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros(0), np.zeros((0, 4)), tag)

    @classmethod
    def concat(cls, sets, tag="A0"):
        sets = list(sets)
        if not sets:
            return cls.empty(tag)
        return cls(np.concatenate([s.boxes for s in sets]),
                   np.concatenate([s.labels for s in sets]),
                   np.concatenate([s.scores for s in sets]),
                   np.concatenate([s.keys for s in sets]), tag)


def box_area(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def intersection(box, boxes):
    box = np.asarray(box, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    w = np.minimum(box[2], boxes[..., 2]) - np.maximum(box[0], boxes[..., 0])
    h = np.minimum(box[3], boxes[..., 3]) - np.maximum(box[1], boxes[..., 1])
    return np.maximum(w, 0.0) * np.maximum(h, 0.0)


def iou(box, boxes):
    inter = intersection(box, boxes)
    union = box_area(box) + box_area(boxes) - inter
    return inter / union


def containment(box, boxes):
    inter = intersection(box, boxes)
    return np.maximum(inter / box_area(box), inter / box_area(boxes))


def overlap(b, b2, same_class: bool) -> float:
    """IoU for different classes, max-containment for the same class."""
    if same_class:
        return float(containment(b, np.asarray(b2)[None])[0])
    return float(iou(b, np.asarray(b2)[None])[0])


def overlaps(box, label, boxes, labels):
    """Class-aware overlap of one box against many."""
    same = np.asarray(labels) == label
    return np.where(same, containment(box, boxes), iou(box, boxes))


def in_neighbourhood(box, label, boxes, labels, policy: OverlapPolicy):
    labels = np.asarray(labels)
    same = labels == label
    ov = np.where(same, containment(box, boxes), iou(box, boxes))
    thr = np.where(same, policy.same_class, policy.diff_class)
    return ov >= thr


def neighborhood(index, candidates: AssignmentSet, policy: OverlapPolicy):
    """Indices of candidates in the neighbourhood of ``candidates[index]``."""
    mask = in_neighbourhood(candidates.boxes[index], candidates.labels[index],
                            candidates.boxes, candidates.labels, policy)
    return np.flatnonzero(mask)


def neighborhood_of_box(box, label, candidates: AssignmentSet, policy: OverlapPolicy):
    mask = in_neighbourhood(box, label, candidates.boxes, candidates.labels, policy)
    return np.flatnonzero(mask)


def neighbourhood_mask(selected: AssignmentSet, pool: AssignmentSet, policy: OverlapPolicy):
    """Union of neighbourhoods of all ``selected`` boxes, as a mask over ``pool``."""
    mask = np.zeros(len(pool), dtype=bool)
    for b, y in zip(selected.boxes, selected.labels):
        mask |= in_neighbourhood(b, y, pool.boxes, pool.labels, policy)
    return mask


def greedy_order(a: AssignmentSet):
    """Descending score; ties by (class, scale, row, col) ascending."""
    k = a.keys
    return np.lexsort((k[:, 3], k[:, 2], k[:, 0], k[:, 1], -a.scores))


def suppress(a0: AssignmentSet, policy: OverlapPolicy = OverlapPolicy(), return_index=False):
    """Greedy NMS: keep a box unless it lies in the neighbourhood of a kept one."""
    order = greedy_order(a0)
    alive = np.ones(len(a0), dtype=bool)
    keep = []
    for i in order:
        if not alive[i]:
            continue
        keep.append(i)
        alive &= ~in_neighbourhood(a0.boxes[i], a0.labels[i], a0.boxes, a0.labels, policy)
    keep = np.asarray(keep, dtype=np.int64)
    out = a0.subset(keep, tag="A")
    return (out, keep) if return_index else out


def suppression_violations(a: AssignmentSet, policy: OverlapPolicy = OverlapPolicy()):
    """Pairs (i, j), i < j, that sit in each other's neighbourhood."""
    bad = []
    for i in range(len(a)):
        m = in_neighbourhood(a.boxes[i], a.labels[i], a.boxes, a.labels, policy)
        bad += [(i, int(j)) for j in np.flatnonzero(m) if j > i]
    return bad


# ---------------------------------------------------------------------------
# detection file: "image_id class score x1 y1 x2 y2", one survivor per line


def format_detection(image_id, class_name, score, box):
    x1, y1, x2, y2 = (float(v) for v in box)
    return f"{image_id} {class_name} {float(score)!r} {x1!r} {y1!r} {x2!r} {y2!r}"


def write_detections(path, records):
    """``records`` are (image_id, class_name, score, (x1, y1, x2, y2))."""
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, name, score, box in records:
            fh.write(format_detection(image_id, name, score, box) + "\n")


def read_detections(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 7:
                raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            image_id, name = parts[0], parts[1]
            score, x1, y1, x2, y2 = (float(p) for p in parts[2:])
            records.append((image_id, name, score, (x1, y1, x2, y2)))
    return records
