"""Two-phase training: deformation-free pretraining, then online joint SGD.

The joint phase follows the per-image procedure: forward every pyramid
level, pool the candidates, run NMS to get ``A``, build ``A'`` from the
pool and the ground truth, differentiate the final-prediction loss into the
response maps, back-propagate, and take one SGD step for the whole image.
The step descends on the loss.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import model as modelio
from .evaluation import evaluate
from .featnet import extract, output_size, set_trainable
from .loss import LossReport, constrain, predict, final_loss, hinge, hinge_grad, window_hinge_loss
from .model import DetectorModel
from .nms import OverlapPolicy, containment, iou, suppress
from .pipeline import apply_update, detect, forward_image, parameter_gradients
from .pyramid import build_pyramid, project_boxes

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    negatives: int = 2000
    iterations: int = 300
    lr: float = 0.01
    reg: float = 1e-3
    neg_iou: float = 0.3


@dataclass
class JointConfig:
    epochs_phase1: int = 15
    lr_phase1: float = 1e-3
    epochs_phase2: int = 15
    lr_phase2: float = 1e-4
    featnet_lr_scale: float = 0.01


@dataclass
class TrainConfig:
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    joint: JointConfig = field(default_factory=JointConfig)
    seed: int = 0
    floor: float = -1.0
    decision_threshold: float = 0.0
    soft_positives: bool = True
    train_featnet: bool = True
    skip_pretrain: bool = False
    loss: str = "nms"                  # "nms" or "window"
    policy: OverlapPolicy = field(default_factory=OverlapPolicy)

    def __post_init__(self):
        if self.loss not in ("nms", "window"):
            raise ValueError(f"loss must be 'nms' or 'window', got {self.loss!r}")
        j = self.joint
        if j.lr_phase1 < 0 or j.lr_phase2 < 0 or self.pretrain.lr < 0:
            raise ValueError("learning rates must be non-negative")
        if j.epochs_phase1 < 0 or j.epochs_phase2 < 0:
            raise ValueError("epoch counts must be non-negative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        pre = PretrainConfig(**d.pop("pretrain", {}))
        joint = JointConfig(**d.pop("joint", {}))
        policy = OverlapPolicy(**d.pop("policy", {}))
        return cls(pretrain=pre, joint=joint, policy=policy, **d)

    def with_overrides(self, overrides):
        """Apply ``{"joint.lr_phase1": 0.01, ...}``; unknown keys raise KeyError."""
        d = self.to_dict()
        for key, value in overrides.items():
            node, parts = d, key.split(".")
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise KeyError(key)
                node = node[p]
            if parts[-1] not in node or isinstance(node[parts[-1]], dict):
                raise KeyError(key)
            node[parts[-1]] = _coerce(value, node[parts[-1]])
        return TrainConfig.from_dict(d)

    @property
    def total_epochs(self):
        return self.joint.epochs_phase1 + self.joint.epochs_phase2

    def lr_for_epoch(self, epoch):
        """Learning rate of 0-based joint epoch ``epoch``."""
        return self.joint.lr_phase1 if epoch < self.joint.epochs_phase1 else self.joint.lr_phase2


def _coerce(value, current):
    if not isinstance(value, str):
        return value
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


@dataclass
class StepResult:
    report: LossReport
    applied: bool
    n_pool: int
    flags: dict = field(default_factory=dict)


@dataclass
class TrainState:
    model: DetectorModel
    epoch: int = 0
    step: int = 0
    pretrained: bool = False
    history: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# pretraining


def _window_features(phi, view, row, col):
    rh, rw = view.root_size
    ph, pw = view.part_size
    chunks = [phi[:, row:row + rh, col:col + rw].ravel()]
    for pi, pj in view.anchors:
        chunks.append(phi[:, row + pi:row + pi + ph, col + pj:col + pj + pw].ravel())
    return np.concatenate(chunks)


def _set_view_weights(view, w):
    n_root = view.root.size
    view.root[...] = w[:n_root].reshape(view.root.shape)
    view.parts[...] = w[n_root:-1].reshape(view.parts.shape)
    view.bias[0] = w[-1]


def _view_weights(view):
    return np.concatenate([view.root.ravel(), view.parts.ravel(), view.bias])


def _level_features(model, image):
    pyr = build_pyramid(np.asarray(image, dtype=np.float64) - model.input_mean, model.pyramid)
    geom0 = model.featnet_spec.geometry()
    frozen = _frozen(model.featnet)
    out = []
    for level in pyr:
        if output_size(model.featnet_spec, *level.image.shape[1:]) == (0, 0):
            continue
        fm = extract(level.image, model.featnet_spec, frozen, geom0.at_level(level))
        out.append((fm.features.value, fm.geometry))
    return out


def _frozen(params):
    p = params.copy()
    p.trainable = False
    return p


def _fit_linear(pos, neg, cfg: PretrainConfig, w0):
    """Adam from ``w0`` on balanced hinge means plus an L2 penalty (bias excluded)."""
    dim = pos.shape[1] + 1
    xp = np.hstack([pos, np.ones((len(pos), 1))])
    xn = np.hstack([neg, np.ones((len(neg), 1))])
    w = np.array(w0, dtype=np.float64)
    m = np.zeros(dim)
    v = np.zeros(dim)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(1, cfg.iterations + 1):
        rp, rn = xp @ w, xn @ w
        g = xp.T @ hinge_grad(rp, 1) / len(xp) + xn.T @ hinge_grad(rn, 0) / len(xn)
        g[:-1] += cfg.reg * w[:-1]
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - cfg.lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    obj = (hinge(xp @ w, 1).mean() + hinge(xn @ w, 0).mean()
           + 0.5 * cfg.reg * float(w[:-1] @ w[:-1]))
    return w, float(obj)


def _root_boxes(view, geom, shape):
    rh, rw = view.root_size
    h, w = shape[1] - rh + 1, shape[2] - rw + 1
    ph, pw = view.part_size
    if h <= 0 or w <= 0 or ph > shape[1] or pw > shape[2]:
        return None, None, None
    rows, cols = np.mgrid[0:h, 0:w]
    rows, cols = rows.ravel(), cols.ravel()
    return rows, cols, project_boxes(rows, cols, rh, rw, geom)


def pretrain(dataset, model: DetectorModel, config: TrainConfig, rng=None):
    """Train root/part filters and biases with deformation disabled.

    Positives: for each ground-truth box the (level, view, location) whose
    root box has the highest IoU.  Negatives: random windows with IoU at most
    ``neg_iou`` against every ground-truth box.  The feature net is frozen.
    Returns a dict of per-view objective values.
    """
    cfg = config.pretrain
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    feats = [_level_features(model, dataset.image_float(i)) for i in range(len(dataset))]
    name_to_index = {c.name: k for k, c in enumerate(model.classes)}
    pos = {(c, v): [] for c, cls in enumerate(model.classes) for v in range(len(cls.views))}
    for i, ann in enumerate(dataset.annotations):
        for name, gt in zip(ann.labels, ann.boxes):
            c = name_to_index.get(name)
            if c is None:
                continue
            best = (-1.0, None)
            for v, view in enumerate(model.classes[c].views):
                for lv, (phi, geom) in enumerate(feats[i]):
                    rows, cols, boxes = _root_boxes(view, geom, phi.shape)
                    if boxes is None:
                        continue
                    ov = iou(gt, boxes)
                    k = int(np.argmax(ov))
                    if ov[k] > best[0]:
                        best = (ov[k], (v, lv, rows[k], cols[k]))
            if best[1] is None:
                continue
            v, lv, r, col = best[1]
            view = model.classes[c].views[v]
            pos[(c, v)].append(_window_features(feats[i][lv][0], view, r, col))

    objectives = {}
    for c, cls in enumerate(model.classes):
        if not any(pos[(c, v)] for v in range(len(cls.views))):
            log.warning("class %s has no positives; skipped in pretraining", cls.name)
            continue
        neg = {v: [] for v in range(len(cls.views))}
        attempts = 0
        count = 0
        while count < cfg.negatives and attempts < 50 * cfg.negatives:
            attempts += 1
            i = int(rng.integers(len(dataset)))
            if not feats[i]:
                continue
            lv = int(rng.integers(len(feats[i])))
            v = int(rng.integers(len(cls.views)))
            phi, geom = feats[i][lv]
            view = cls.views[v]
            rows, cols, boxes = _root_boxes(view, geom, phi.shape)
            if boxes is None:
                continue
            k = int(rng.integers(len(rows)))
            gts = dataset.annotations[i].boxes
            if len(gts) and iou(boxes[k], gts).max() > cfg.neg_iou:
                continue
            neg[v].append(_window_features(phi, view, rows[k], cols[k]))
            count += 1
        for v, view in enumerate(cls.views):
            if not pos[(c, v)] or not neg[v]:
                log.warning("class %s view %d lacks examples; left at initialisation", cls.name, v)
                continue
            w, obj = _fit_linear(np.array(pos[(c, v)]), np.array(neg[v]), cfg, _view_weights(view))
            _set_view_weights(view, w)
            objectives[(cls.name, v)] = obj
    return objectives


# ---------------------------------------------------------------------------
# joint training


def _gt_arrays(model, annotation):
    idx = {c.name: c.label for c in model.classes}
    keep = [k for k, n in enumerate(annotation.labels) if n in idx]
    labels = np.array([idx[annotation.labels[k]] for k in keep], dtype=np.int64)
    boxes = annotation.boxes[keep] if keep else np.zeros((0, 4))
    return boxes, labels


def image_loss(model, image, annotation, config: TrainConfig, train_featnet=None):
    """Forward one image and evaluate the configured loss.

    Returns ``(forward, pool, report)``; ``report.grad`` holds dL/dr over
    ``pool``.
    """
    if train_featnet is None:
        train_featnet = config.train_featnet and model.featnet.trainable
    fwd = forward_image(model, image, train_featnet=train_featnet, train_dpm=True)
    a0 = fwd.a0
    gt_boxes, gt_labels = _gt_arrays(model, annotation)
    cons = constrain(a0, gt_boxes, gt_labels, config.policy)
    keep = a0.scores > config.floor
    keep[cons.index] = True
    pool_index = np.flatnonzero(keep)
    pool = a0.subset(pool_index)
    remap = -np.ones(len(a0), dtype=np.int64)
    remap[pool_index] = np.arange(len(pool_index))
    aprime = remap[cons.index]
    if config.loss == "nms":
        a_index = predict(pool, config.policy, config.decision_threshold)
        report = final_loss(pool, a_index, aprime, config.policy, config.soft_positives)
    else:
        negatives = np.ones(len(pool), dtype=bool)
        for box, label in zip(gt_boxes, gt_labels):
            same = pool.labels == label
            negatives &= ~(same & (containment(box, pool.boxes) >= config.policy.same_class))
        negatives[aprime] = False
        value, grad = window_hinge_loss(pool, aprime, negatives)
        report = LossReport(float("nan"), float("nan"), value, float("nan"), float("nan"),
                            grad, np.zeros(0, dtype=np.int64), aprime)
    report.flags.update(cons.flags)
    return fwd, pool, report


def train_image(model, image, annotation, lr, config: TrainConfig) -> StepResult:
    """One online SGD step for one image; parameters change in place."""
    fwd, pool, report = image_loss(model, image, annotation, config)
    # NaN responses never reach the pool, so look for them in the maps
    nan_maps = any(np.isnan(r.score.value).any() for r in fwd.responses)
    if nan_maps or not math.isfinite(report.loss) or not np.all(np.isfinite(report.grad)):
        log.error("non-finite loss; step rejected")
        return StepResult(report, False, len(pool), {"nonfinite": True})
    grads = parameter_gradients(fwd, model, pool, report.grad)
    if any(not np.all(np.isfinite(g)) for g in grads.values()):
        log.error("non-finite gradient; step rejected")
        return StepResult(report, False, len(pool), {"nonfinite": True})
    apply_update(model, grads, lr, config.joint.featnet_lr_scale)
    return StepResult(report, True, len(pool))


def detections_for(model, dataset, policy=OverlapPolicy(), floor=-1.0):
    records = []
    names = {c.label: c.name for c in model.classes}
    for i, ann in enumerate(dataset.annotations):
        a = detect(model, dataset.image_float(i), policy, floor)
        for box, label, score in zip(a.boxes, a.labels, a.scores):
            records.append((ann.image_id, names[int(label)], float(score), tuple(box)))
    return records


def validation_ap(model, dataset, config: TrainConfig):
    recs = detections_for(model, dataset, config.policy, config.floor)
    return evaluate(recs, dataset.annotations, 0.5, model.class_names).mean_ap


def _epoch_order(seed, epoch, n):
    return np.random.default_rng([seed, epoch]).permutation(n)


def fit(dataset, model: DetectorModel, config: TrainConfig, validation=None,
        checkpoint_path=None, state: TrainState = None, metrics_cb=None):
    """Pretrain (unless skipped or resumed past it), then run the joint epochs.

    Returns ``(state, metrics)`` where each metrics row is
    ``(epoch, mean L, mean C(A), mean C(A'), validation AP)``.
    """
    if state is None:
        state = TrainState(model)
    model = state.model
    set_trainable(model.featnet, config.train_featnet)
    if not state.pretrained:
        if not config.skip_pretrain:
            set_trainable(model.featnet, False)
            pretrain(dataset, model, config)
            set_trainable(model.featnet, config.train_featnet)
        state.pretrained = True
        if checkpoint_path:
            save_checkpoint(checkpoint_path, state, config)
    metrics = []
    while state.epoch < config.total_epochs:
        e = state.epoch
        lr = config.lr_for_epoch(e)
        losses, cas, caps = [], [], []
        for i in _epoch_order(config.seed, e, len(dataset)):
            res = train_image(model, dataset.image_float(int(i)), dataset.annotations[int(i)],
                              lr, config)
            state.step += 1
            losses.append(res.report.loss)
            cas.append(res.report.c_a)
            caps.append(res.report.c_aprime)
        ap = validation_ap(model, validation, config) if validation is not None else float("nan")
        row = (e + 1, _mean(losses), _mean(cas), _mean(caps), ap)
        metrics.append(row)
        state.history.append(row)
        state.epoch += 1
        if metrics_cb is not None:
            metrics_cb(row)
        if checkpoint_path:
            save_checkpoint(checkpoint_path, state, config)
    return state, metrics


def _mean(xs):
    xs = [x for x in xs if math.isfinite(x)]
    return float(np.mean(xs)) if xs else float("nan")


def save_checkpoint(path, state: TrainState, config: TrainConfig):
    ck = {"epoch": state.epoch, "step": state.step, "pretrained": state.pretrained,
          "history": [list(r) for r in state.history], "config": config.to_dict()}
    modelio.save(path, state.model, ck)


def load_checkpoint(path):
    model, ck = modelio.load(path)
    if ck is None:
        return TrainState(model), None
    state = TrainState(model, int(ck["epoch"]), int(ck["step"]), bool(ck["pretrained"]),
                       [tuple(r) for r in ck.get("history", [])])
    return state, TrainConfig.from_dict(ck["config"])


def write_metrics(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch\tmean_L\tmean_C_A\tmean_C_Aprime\tval_AP\n")
        for r in rows:
            fh.write("%d\t%r\t%r\t%r\t%r\n" % (int(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4])))
