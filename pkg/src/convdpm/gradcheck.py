"""Finite-difference gradient harness.

Every check builds a small random instance from a seed, reduces the op's
output to a scalar with a fixed random weighting, and compares the analytic
gradient of each input against central differences.  The reported error of
one comparison is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``
so components that are exactly zero do not blow it up.  The scale never
drops below ``SCALE_FLOOR``: a gradient that is zero analytically would
otherwise be compared against pure rounding noise.

``fault`` names an op whose backward is wrapped with a sign flip; the harness
must then report that op as failing.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .dpm import and_accumulate, deform, init_class, or_max, score_filters
from .featnet import FeatNetSpec, init_params
from .loss import LossStructure, constrain, predict
from .model import DetectorModel
from .nms import OverlapPolicy
from .pipeline import forward_image, parameter_gradients
from .pyramid import PyramidSpec

EPS = 1e-6
TOLERANCE = 1e-4
SCALE_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    errors: list = field(default_factory=list)     # one per seed
    tolerance: float = TOLERANCE

    @property
    def max_error(self):
        return max(self.errors) if self.errors else 0.0

    @property
    def worst_seed(self):
        return int(np.argmax(self.errors)) if self.errors else -1

    @property
    def passed(self):
        return bool(self.errors) and self.max_error < self.tolerance


@dataclass
class Report:
    results: list
    seconds: float

    @property
    def passed(self):
        return all(r.passed for r in self.results)

    def failing(self):
        return [r.name for r in self.results if not r.passed]

    def lines(self):
        out = []
        for r in self.results:
            status = "PASS" if r.passed else "FAIL"
            out.append(f"{status} {r.name:<14} seeds={len(r.errors)} max_rel_err={r.max_error:.3e}")
        out.append(f"{'PASS' if self.passed else 'FAIL'} total {self.seconds:.1f}s")
        return out


def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), SCALE_FLOOR)
    return float(np.abs(a - n).max() / scale)


def numeric_gradient(f, x, eps=EPS, index=None):
    """Central differences of scalar ``f`` w.r.t. array ``x`` (perturbed in place).

    ``index`` restricts the computation to those flat positions; other
    entries are returned as NaN.
    """
    flat = x.reshape(-1)
    grad = np.full(flat.shape, np.nan)
    positions = range(flat.size) if index is None else index
    for i in positions:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad.reshape(x.shape)


def _flip(node):
    inner = node.backward_fn

    def flipped(g):
        return tuple(None if v is None else -v for v in inner(g))

    node.backward_fn = flipped
    return node


def check_graph(build, inputs, rng, fault=False):
    """Compare analytic and numeric gradients of ``build(*nodes)``.

    ``build`` maps parameter nodes to the output node of the op under test.
    Returns the worst relative error over all inputs.
    """
    out0 = build(*[tc.constant(x) for x in inputs])
    # -inf cells (nothing to read) carry no gradient and get zero weight
    weights = np.where(np.isfinite(out0.value), rng.standard_normal(out0.value.shape), 0.0)

    def scalar_of(nodes):
        out = build(*nodes)
        if fault:
            _flip(out)
        return out, tc.dot_const(out, weights)

    params = [tc.parameter(x) for x in inputs]
    _, root = scalar_of(params)
    tc.backward(root)
    worst = 0.0
    for k, x in enumerate(inputs):
        def f():
            return float(tc.dot_const(build(*[tc.constant(v) for v in inputs]), weights).value)
        num = numeric_gradient(f, x)
        ana = params[k].grad if params[k].grad is not None else np.zeros_like(x)
        worst = max(worst, relative_error(ana, num))
    return worst


# ---------------------------------------------------------------------------
# instances; each returns (build, inputs)


def _inst_correlate(rng):
    stride = int(rng.integers(1, 3))
    c, o, k = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    h, w = int(rng.integers(k + 2, k + 7)), int(rng.integers(k + 2, k + 7))
    return (lambda x, wt: tc.correlate2d(x, wt, stride),
            [rng.standard_normal((c, h, w)), rng.standard_normal((o, c, k, k))])


def _inst_add_bias(rng):
    c = int(rng.integers(1, 5))
    return tc.add_bias, [rng.standard_normal((c, 4, 5)), rng.standard_normal(c)]


def _inst_relu(rng):
    x = rng.standard_normal((3, 5, 5))
    x[np.abs(x) < 1e-3] = 0.5                       # keep away from the kink
    return tc.relu, [x]


def _inst_maxpool(rng):
    k = int(rng.integers(1, 4))
    s = int(rng.integers(1, 3))
    return (lambda x: tc.maxpool2d(x, k, s)[0], [rng.standard_normal((2, 7, 8))])


def _inst_reshape(rng):
    return (lambda x: tc.reshape(x, (6, 4)), [rng.standard_normal((2, 3, 4))])


def _inst_mul(rng):
    return tc.mul, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]


def _inst_score_filters(rng):
    c = int(rng.integers(1, 4))
    wr, wp = rng.standard_normal((6, 6)), rng.standard_normal((9, 8, 8))

    def build(phi, root, parts):
        f_root, f_parts = score_filters(phi, root, parts)
        return tc.sum_scalars([tc.dot_const(f_root, wr), tc.dot_const(f_parts, wp)])

    return build, [rng.standard_normal((c, 8, 9)), rng.standard_normal((c, 3, 4)),
                   rng.standard_normal((9, c, 1, 2))]


def _inst_deform(rng):
    p = int(rng.integers(1, 5))
    radius = int(rng.integers(0, 3))
    hp, wp = int(rng.integers(3, 8)), int(rng.integers(3, 8))
    anchors = np.stack([rng.integers(0, 3, p), rng.integers(0, 3, p)], axis=-1)
    ho, wo = int(rng.integers(1, hp + 1)), int(rng.integers(1, wp + 1))
    w_def = rng.uniform(0.05, 1.0, size=(p, 4))
    return (lambda f, wd: deform(f, anchors, wd, radius, (ho, wo)),
            [rng.standard_normal((p, hp, wp)), w_def])


def _inst_and(rng):
    p = int(rng.integers(1, 10))
    return (lambda r, d, b: and_accumulate(r, d, b),
            [rng.standard_normal((4, 5)), rng.standard_normal((p, 4, 5)), rng.standard_normal(1)])


def _inst_or(rng):
    n = int(rng.integers(1, 4))
    shapes = [(int(rng.integers(2, 6)), int(rng.integers(2, 6))) for _ in range(n)]
    return (lambda *maps: or_max(maps)[0]), [rng.standard_normal(s) for s in shapes]


def _small_spec():
    return FeatNetSpec(layers=(("conv", 3, 3, 1), ("relu",), ("pool", 2, 2),
                               ("conv", 4, 2, 1), ("relu",)))


def _inst_featnet(rng):
    spec = _small_spec()
    p = init_params(spec, int(rng.integers(1 << 30)))
    for b in p.biases:
        b[...] = rng.uniform(0.05, 0.2, b.shape)

    def build(img, w0, b0, w1, b1):
        x = tc.add_bias(tc.correlate2d(img, w0, 1), b0)
        x, _ = tc.maxpool2d(tc.relu(x), 2, 2)
        return tc.relu(tc.add_bias(tc.correlate2d(x, w1, 1), b1))

    return build, [rng.standard_normal((1, 12, 11)), p.weights[0], p.biases[0],
                   p.weights[1], p.biases[1]]


# ---------------------------------------------------------------------------
# loss and composed pipeline


def _random_pool(rng, n=40):
    from .nms import AssignmentSet

    xy = rng.uniform(0, 40, size=(n, 2))
    wh = rng.uniform(6, 16, size=(n, 2))
    boxes = np.concatenate([xy, xy + wh], axis=1)
    labels = rng.integers(1, 3, n)
    scores = rng.uniform(-1.5, 2.0, n)
    keys = np.stack([np.zeros(n, int), labels - 1, np.arange(n), np.zeros(n, int)], axis=-1)
    return AssignmentSet(boxes, labels, scores, keys)


def check_loss(rng, fault=False):
    pool = _random_pool(rng)
    gt = pool.boxes[:3] + rng.uniform(-1, 1, (3, 4))
    cons = constrain(pool, gt, pool.labels[:3])
    a = predict(pool)
    soft = bool(rng.integers(2))
    structure = LossStructure.build(pool, a, cons.index, OverlapPolicy(), soft)
    scores = pool.scores.copy()
    # move scores off the hinge kinks at -1 and 1
    for kink in (-1.0, 1.0):
        near = np.abs(scores - kink) < 1e-3
        scores[near] += 0.01
    ana = structure.evaluate(scores).grad
    if fault:
        ana = -ana
    num = numeric_gradient(lambda: structure.evaluate(scores).loss, scores)
    return relative_error(ana, num)


def _pipeline_model(rng):
    spec = _small_spec()
    params = init_params(spec, int(rng.integers(1 << 30)))
    for b in params.biases:
        b[...] = rng.uniform(0.05, 0.2, b.shape)
    classes = [init_class(1, "a", spec.out_channels, [(3, 3), (2, 4)], seed=int(rng.integers(1 << 30)),
                          radius=1, w_def=(0.1, 0.1, 0.2, 0.2))]
    for cls in classes:
        for v in cls.views:
            v.root *= 30.0
            v.parts *= 30.0
    return DetectorModel(spec, params, classes, PyramidSpec(min_dim=16), "union", 0.5)


def _pool_scores(model, image, keys, train_featnet=True):
    fwd = forward_image(model, image, train_featnet=train_featnet, train_dpm=True)
    return np.array([fwd.response(int(s), int(c)).score.value[r, col] for s, c, r, col in keys])


def check_pipeline(rng, fault=False, coords_per_array=4):
    """Image -> pyramid -> featnet -> DPM -> loss, sets held fixed.

    Compares ``coords_per_array`` random entries of every parameter array,
    scaled by the largest gradient entry over all of them.
    """
    model = _pipeline_model(rng)
    image = rng.uniform(0, 1, size=(1, 22, 24))
    fwd = forward_image(model, image, train_featnet=True, train_dpm=True)
    pool = fwd.a0
    gt = np.array([[4.0, 4.0, 16.0, 15.0]])
    cons = constrain(pool, gt, np.array([1]))
    a = predict(pool)
    structure = LossStructure.build(pool, a, cons.index, OverlapPolicy(), True)
    report = structure.evaluate(pool.scores)
    grads = parameter_gradients(fwd, model, pool, report.grad)
    arrays = model.named_arrays()
    ana_all, num_all = [], []
    for name, arr in arrays.items():
        if name not in grads:
            continue
        ana = -grads[name] if fault else grads[name]
        idx = rng.choice(arr.size, size=min(coords_per_array, arr.size), replace=False)

        def f():
            return structure.evaluate(_pool_scores(model, image, pool.keys)).loss

        num = numeric_gradient(f, arr, index=idx)
        ana_all.append(ana.reshape(-1)[idx])
        num_all.append(num.reshape(-1)[idx])
    # one scale for the whole parameter vector: arrays whose true gradient is
    # zero (a view that never wins the OR) only carry rounding noise
    return relative_error(np.concatenate(ana_all), np.concatenate(num_all))


GRAPH_CHECKS = {
    "correlate2d": _inst_correlate,
    "add_bias": _inst_add_bias,
    "relu": _inst_relu,
    "maxpool2d": _inst_maxpool,
    "reshape": _inst_reshape,
    "mul": _inst_mul,
    "score_filters": _inst_score_filters,
    "deform": _inst_deform,
    "and": _inst_and,
    "or": _inst_or,
    "featnet": _inst_featnet,
}
OTHER_CHECKS = {"loss": check_loss, "pipeline": check_pipeline}
ALL_CHECKS = tuple(GRAPH_CHECKS) + tuple(OTHER_CHECKS)


def run(seed=0, n_seeds=20, ops=None, fault=None) -> Report:
    """Run the selected checks (all by default) over ``n_seeds`` seeds each."""
    ops = list(ops) if ops else list(ALL_CHECKS)
    unknown = [o for o in ops + ([fault] if fault else []) if o not in ALL_CHECKS]
    if unknown:
        raise KeyError(f"unknown op(s): {', '.join(unknown)}")
    start = time.perf_counter()
    results = []
    for name in ops:
        res = CheckResult(name)
        for s in range(n_seeds):
            rng = np.random.default_rng([seed, s, ALL_CHECKS.index(name)])
            if name in GRAPH_CHECKS:
                build, inputs = GRAPH_CHECKS[name](rng)
                res.errors.append(check_graph(build, inputs, rng, fault == name))
            else:
                res.errors.append(OTHER_CHECKS[name](rng, fault == name))
        results.append(res)
    return Report(results, time.perf_counter() - start)
