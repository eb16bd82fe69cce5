"""Dense tensor ops with a small reverse-mode gradient engine.

Tensors are plain float64 numpy arrays.  A :class:`Node` wraps one array
together with the closure that replays its producing op backward.

Convolution convention: every "convolution" in this package is a valid-mode
cross-correlation without kernel flip,
``out[o, i, j] = sum_{c,a,b} x[c, i*stride + a, j*stride + b] * w[o, c, a, b]``.

Max tie-break: the first maximum in row-major scan order wins.  Pooling,
deformation and the view OR all use ``np.argmax`` on a row-major flattening,
which gives exactly that rule.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Node:
    """One value in the computation graph.

    ``backward_fn`` maps the upstream gradient to a tuple with one entry per
    parent (``None`` for parents that need no gradient).
    """

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "op", "saved")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False, op="leaf"):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in self.parents)
        self.op = op
        self.saved = {}

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


def parameter(value) -> Node:
    return Node(np.array(value, dtype=DTYPE), requires_grad=True, op="param")


def constant(value) -> Node:
    return Node(value, requires_grad=False, op="const")


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value, parents, backward_fn, op):
    node = Node(value, parents, backward_fn, op=op)
    if not node.requires_grad:
        node.parents = ()
        node.backward_fn = None
    return node


def backward(root: Node) -> list[Node]:
    """Reverse accumulation from a scalar ``root``.

    Every reachable node that requires a gradient gets ``.grad`` populated.
    Returns the parameter leaves that were reached.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.value.shape}")
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))

    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    leaves = []
    for node in reversed(order):
        if node.backward_fn is None:
            if node.op == "param":
                leaves.append(node)
            continue
        grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=DTYPE)
            else:
                parent.grad = parent.grad + g
    for leaf in leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.value)
    return leaves


# ---------------------------------------------------------------------------
# raw array kernels


def _check_corr_shapes(x, w, stride):
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    if x.ndim != 3:
        raise ShapeError(f"input must be [C,H,W], got shape {x.shape}")
    if w.ndim != 4:
        raise ShapeError(f"filters must be [C_out,C_in,kh,kw], got shape {w.shape}")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(f"filter C_in={w.shape[1]} does not match input C={x.shape[0]}")
    kh, kw = w.shape[2:]
    if kh > x.shape[1] or kw > x.shape[2]:
        raise ShapeError(
            f"filter {kh}x{kw} larger than input {x.shape[1]}x{x.shape[2]}"
        )


def correlate2d_array(x, w, stride=1):
    x = np.asarray(x, dtype=DTYPE)
    w = np.asarray(w, dtype=DTYPE)
    _check_corr_shapes(x, w, stride)
    kh, kw = w.shape[2:]
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    return np.tensordot(w, win, axes=([1, 2, 3], [0, 3, 4]))


def _correlate_input_grad(g, w, in_hw, stride):
    o, hout, wout = g.shape
    kh, kw = w.shape[2:]
    h, wd = in_hw
    gpad = np.zeros((o, h + kh - 1, wd + kw - 1), dtype=DTYPE)
    gpad[:, kh - 1:kh - 1 + (hout - 1) * stride + 1:stride,
         kw - 1:kw - 1 + (wout - 1) * stride + 1:stride] = g
    wflip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    return correlate2d_array(gpad, wflip, 1)


def maxpool2d_array(x, k, stride):
    """Return pooled values and argmax positions as (row, col) input coords."""
    x = np.asarray(x, dtype=DTYPE)
    if k < 1 or stride < 1:
        raise ShapeError(f"pool kernel and stride must be positive, got k={k} stride={stride}")
    if x.ndim != 3 or k > x.shape[1] or k > x.shape[2]:
        raise ShapeError(f"pool kernel {k} does not fit input of shape {x.shape}")
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    c, ho, wo = win.shape[:3]
    flat = win.reshape(c, ho, wo, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[None, :, None] * stride + idx // k
    cols = np.arange(wo)[None, None, :] * stride + idx % k
    return out, np.stack([rows, cols], axis=-1)


# ---------------------------------------------------------------------------
# graph ops


def correlate2d(x, w, stride=1) -> Node:
    """Valid cross-correlation of ``x`` [C,H,W] with ``w`` [O,C,kh,kw]."""
    x, w = as_node(x), as_node(w)
    win_shape = w.value.shape[2:]
    out = correlate2d_array(x.value, w.value, stride)

    def _backward(g):
        gx = gw = None
        if x.requires_grad:
            gx = _correlate_input_grad(g, w.value, x.value.shape[1:], stride)
        if w.requires_grad:
            win = sliding_window_view(x.value, win_shape, axis=(1, 2))[:, ::stride, ::stride]
            gw = np.tensordot(g, win, axes=([1, 2], [1, 2]))
        return gx, gw

    return _make(out, (x, w), _backward, "correlate2d")


def add_bias(x, b) -> Node:
    """Add one scalar per channel of a [C,H,W] map."""
    x, b = as_node(x), as_node(b)
    if b.value.shape != (x.value.shape[0],):
        raise ShapeError(f"bias shape {b.value.shape} does not match {x.value.shape[0]} channels")

    def _backward(g):
        return g, g.sum(axis=(1, 2))

    return _make(x.value + b.value[:, None, None], (x, b), _backward, "add_bias")


def relu(x) -> Node:
    x = as_node(x)
    mask = x.value > 0

    def _backward(g):
        return (g * mask,)

    return _make(np.where(mask, x.value, 0.0), (x,), _backward, "relu")


def maxpool2d(x, k, stride):
    """Max pooling.  Returns ``(node, argmax)`` with argmax as (row, col)."""
    x = as_node(x)
    out, arg = maxpool2d_array(x.value, k, stride)
    c, h, w = x.value.shape
    flat = (np.arange(c)[:, None, None] * h + arg[..., 0]) * w + arg[..., 1]

    def _backward(g):
        gx = np.bincount(flat.ravel(), weights=g.ravel(), minlength=c * h * w)
        return (gx.reshape(c, h, w),)

    node = _make(out, (x,), _backward, "maxpool2d")
    node.saved["argmax"] = arg
    return node, arg


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add: shapes {a.value.shape} and {b.value.shape} differ")
    return _make(a.value + b.value, (a, b), lambda g: (g, g), "add")


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"mul: shapes {a.value.shape} and {b.value.shape} differ")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def total(x) -> Node:
    """Sum of all elements, as a scalar node."""
    x = as_node(x)
    shape = x.value.shape
    return _make(np.array(x.value.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def dot_const(x, weights) -> Node:
    """Scalar ``sum(x * weights)`` with ``weights`` held constant.

    Used to inject an externally computed upstream gradient map into the
    graph: backward of the result hands ``weights`` to ``x``.  Entries with
    zero weight are skipped, so -inf cells of a response map are harmless.
    """
    x = as_node(x)
    weights = np.asarray(weights, dtype=DTYPE)
    if weights.shape != x.value.shape:
        raise ShapeError(f"dot_const: weight shape {weights.shape} != value shape {x.value.shape}")
    active = weights != 0
    value = np.sum(x.value[active] * weights[active])
    return _make(np.array(value), (x,), lambda g: (weights * g,), "dot_const")


def sum_scalars(nodes) -> Node:
    nodes = [as_node(n) for n in nodes]
    value = np.array(sum(float(n.value) for n in nodes))
    return _make(value, nodes, lambda g: tuple(g for _ in nodes), "sum_scalars")


def reshape(x, shape) -> Node:
    x = as_node(x)
    old = x.value.shape
    return _make(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")
