"""Final-prediction structured loss over a candidate pool.

All sets are index arrays into one pool of candidates (an
:class:`~convdpm.nms.AssignmentSet`).  ``A`` comes from NMS on the pool,
``A'`` picks, for every ground-truth box, the highest-response candidate of
the same class with IoU >= ``policy.gt``.  Background sets are
``S(X) = pool minus neigh(X)``.

The loss is ``L = C(A') - C(A)``; it is differentiated with respect to the
pool responses only, with every discrete choice held fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nms import (AssignmentSet, OverlapPolicy, box_area, intersection, iou, neighbourhood_mask,
                  suppress)


def hinge(r, y):
    """Squared hinge for positives, linear hinge for background (``y == 0``)."""
    r = np.asarray(r, dtype=np.float64)
    y = np.asarray(y)
    return np.where(y > 0, np.maximum(0.0, 1.0 - r) ** 2, np.maximum(0.0, r + 1.0))


def hinge_grad(r, y):
    r = np.asarray(r, dtype=np.float64)
    y = np.asarray(y)
    return np.where(y > 0, -2.0 * np.maximum(0.0, 1.0 - r), (r > -1.0).astype(np.float64))


# ---------------------------------------------------------------------------
# assignment construction


def predict(pool: AssignmentSet, policy: OverlapPolicy = OverlapPolicy(), threshold=0.0):
    """``A`` as pool indices: greedy NMS over candidates with ``r > threshold``.

    A lone box lowers the cost by being labelled positive exactly when
    ``H(r, 1) < H(r, 0)``, i.e. ``r > 0``, so zero is the default decision
    threshold.  ``threshold=None`` runs NMS over the whole pool.
    """
    if threshold is None:
        _, index = suppress(pool, policy, return_index=True)
        return index
    cand = np.flatnonzero(pool.scores > threshold)
    _, index = suppress(pool.subset(cand), policy, return_index=True)
    return cand[index]


@dataclass
class Constrained:
    """``A'`` as pool indices, one per ground-truth box (duplicates removed)."""

    index: np.ndarray
    labels: np.ndarray
    per_gt: np.ndarray            # pool index chosen for each ground-truth box, -1 if none
    degenerate: np.ndarray        # per ground-truth box: no candidate met the threshold
    flags: dict = field(default_factory=dict)


def constrain(pool: AssignmentSet, gt_boxes, gt_labels, policy: OverlapPolicy = OverlapPolicy()):
    """Pick, per ground-truth box, the best-scoring same-class candidate with IoU >= ``policy.gt``.

    If none qualifies the entry falls back to the same-class candidate with
    the largest IoU and the box is flagged degenerate.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    per_gt = np.full(len(gt_boxes), -1, dtype=np.int64)
    degenerate = np.zeros(len(gt_boxes), dtype=bool)
    for g, (box, label) in enumerate(zip(gt_boxes, gt_labels)):
        same = np.flatnonzero(pool.labels == label)
        if same.size == 0:
            degenerate[g] = True
            continue
        ov = iou(box, pool.boxes[same])
        ok = ov >= policy.gt
        if ok.any():
            cand = same[ok]
            # first max in pool order
            per_gt[g] = cand[np.argmax(pool.scores[cand])]
        else:
            degenerate[g] = True
            per_gt[g] = same[np.argmax(ov)]
    chosen = per_gt[per_gt >= 0]
    _, first = np.unique(chosen, return_index=True)
    index = chosen[np.sort(first)]
    flags = {"degenerate": int(degenerate.sum()), "empty_pool": len(pool) == 0}
    return Constrained(index, pool.labels[index], per_gt, degenerate, flags)


def soft_weights(box, boxes):
    """alpha_ij = 2 * area(b_i & b_j) / area(b_i) - 1."""
    return 2.0 * intersection(box, boxes) / box_area(box) - 1.0


@dataclass
class PositiveTerm:
    """Positive cost of one selected box: weighted hinge over its neighbours."""

    index: np.ndarray     # pool indices contributing
    weight: np.ndarray    # normalised weights (sum to 1)
    label: int


def positive_terms(selected, pool: AssignmentSet, policy: OverlapPolicy, soft: bool):
    """One :class:`PositiveTerm` per selected pool index.

    Hard assignment uses only the box itself.  Soft assignment averages over
    same-class neighbours with positive alpha; a box with no such neighbour
    but itself falls back to the hard term.
    """
    terms = []
    for i in np.asarray(selected, dtype=np.int64):
        label = int(pool.labels[i])
        if soft:
            box = pool.boxes[i]
            same = np.flatnonzero(pool.labels == label)
            inter = intersection(box, pool.boxes[same])
            cont = np.maximum(inter / box_area(box), inter / box_area(pool.boxes[same]))
            nb = same[cont >= policy.same_class]
            alpha = soft_weights(box, pool.boxes[nb])
            keep = alpha > 0
            if keep.any():
                nb, alpha = nb[keep], alpha[keep]
                terms.append(PositiveTerm(nb, alpha / alpha.sum(), label))
                continue
        terms.append(PositiveTerm(np.array([i]), np.array([1.0]), label))
    return terms


def positive_cost(terms, scores):
    total = 0.0
    grad = np.zeros(len(scores))
    for t in terms:
        r = scores[t.index]
        total += float(np.dot(t.weight, hinge(r, t.label)))
        np.add.at(grad, t.index, t.weight * hinge_grad(r, t.label))
    return total, grad


def background_cost(mask, scores):
    """Sum of background hinge over pool entries in ``mask``."""
    r = scores[mask]
    grad = np.zeros(len(scores))
    grad[mask] = hinge_grad(r, 0)
    return float(hinge(r, 0).sum()), grad


def cost(selected, pool: AssignmentSet, policy: OverlapPolicy = OverlapPolicy(), soft=False):
    """C(X) = positive term over X + background hinge over pool minus neigh(X)."""
    selected = np.asarray(selected, dtype=np.int64)
    neigh = neighbourhood_mask(pool.subset(selected), pool, policy)
    cp, _ = positive_cost(positive_terms(selected, pool, policy, soft), pool.scores)
    cn, _ = background_cost(~neigh, pool.scores)
    return cp + cn


def soft_positive_cost(selected, pool: AssignmentSet, policy: OverlapPolicy = OverlapPolicy()):
    return positive_cost(positive_terms(selected, pool, policy, True), pool.scores)[0]


# ---------------------------------------------------------------------------
# loss


@dataclass
class LossReport:
    c_a: float
    c_aprime: float
    loss: float
    loss_p: float
    loss_n: float
    grad: np.ndarray              # dL/dr per pool entry
    a_index: np.ndarray
    aprime_index: np.ndarray
    flags: dict = field(default_factory=dict)

    @property
    def decomposition_gap(self):
        return abs(self.loss - (self.loss_p + self.loss_n))


@dataclass
class LossStructure:
    """Every discrete choice of the loss, so it can be re-evaluated at new scores."""

    pos_a: list
    pos_aprime: list
    neigh_a: np.ndarray
    neigh_aprime: np.ndarray
    a_index: np.ndarray
    aprime_index: np.ndarray

    @classmethod
    def build(cls, pool, a_index, aprime_index, policy, soft):
        a_index = np.asarray(a_index, dtype=np.int64)
        aprime_index = np.asarray(aprime_index, dtype=np.int64)
        return cls(positive_terms(a_index, pool, policy, soft),
                   positive_terms(aprime_index, pool, policy, soft),
                   neighbourhood_mask(pool.subset(a_index), pool, policy),
                   neighbourhood_mask(pool.subset(aprime_index), pool, policy),
                   a_index, aprime_index)

    def evaluate(self, scores):
        scores = np.asarray(scores, dtype=np.float64)
        cp_a, g_cp_a = positive_cost(self.pos_a, scores)
        cp_ap, g_cp_ap = positive_cost(self.pos_aprime, scores)
        cn_a, g_cn_a = background_cost(~self.neigh_a, scores)
        cn_ap, g_cn_ap = background_cost(~self.neigh_aprime, scores)
        c_a, c_ap = cp_a + cn_a, cp_ap + cn_ap
        # decomposition: background terms shared by S(A) and S(A') cancel
        only_a = self.neigh_a & ~self.neigh_aprime
        only_ap = self.neigh_aprime & ~self.neigh_a
        h0 = hinge(scores, 0)
        loss_n = float(h0[only_a].sum() - h0[only_ap].sum())
        loss_p = cp_ap - cp_a
        grad = (g_cp_ap + g_cn_ap) - (g_cp_a + g_cn_a)
        return LossReport(c_a, c_ap, c_ap - c_a, loss_p, loss_n, grad,
                          self.a_index, self.aprime_index)


def final_loss(pool: AssignmentSet, a_index, aprime_index,
               policy: OverlapPolicy = OverlapPolicy(), soft=False) -> LossReport:
    """L(A, A') with its P/N decomposition and dL/dr over the pool."""
    structure = LossStructure.build(pool, a_index, aprime_index, policy, soft)
    return structure.evaluate(pool.scores)


def window_hinge_loss(pool: AssignmentSet, positive_index, negative_mask):
    """Per-window hinge used by the bootstrap-style ablation.

    Positives take the squared hinge, negatives the background hinge; the
    loss is a plain sum with no NMS interaction.
    """
    positive_index = np.asarray(positive_index, dtype=np.int64)
    r = pool.scores
    grad = np.zeros(len(pool))
    lp = float(hinge(r[positive_index], 1).sum())
    np.add.at(grad, positive_index, hinge_grad(r[positive_index], 1))
    ln, gn = background_cost(np.asarray(negative_mask, dtype=bool), r)
    grad += gn
    return lp + ln, grad
