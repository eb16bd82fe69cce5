"""Deformable parts model written as differentiable layers.

Per class and view: root and part filters are correlated with the
appearance map, each part response passes through the deformation layer,
the view score is root + bias + sum of deformed parts (AND), and the class
score is the max over views (OR).

Deformation scores use a subtracted cost,
``F_def = max_d F_part[anchor + d] - w_def . [|di|, |dj|, di^2, dj^2]``
with ``w_def >= 0``, so zero weights and a zero anchor reduce the layer to
plain max pooling.

Views are aligned by root top-left cell: location (i, j) in every view map
means the root window starts at feature cell (i, j).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensorcore as tc
from .pyramid import ScaleGeometry, project_boxes

N_PARTS = 9


@dataclass(frozen=True)
class PartSpec:
    anchor: tuple
    size: tuple
    w_def: tuple
    radius: int


@dataclass
class ViewModel:
    root: np.ndarray          # [C, rh, rw]
    parts: np.ndarray         # [9, C, ph, pw]
    anchors: np.ndarray       # [9, 2] int, offsets from root top-left
    w_def: np.ndarray         # [9, 4], kept >= 0
    radius: int
    bias: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.int64)
        self.w_def = np.asarray(self.w_def, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(1)
        if self.parts.shape[0] != N_PARTS:
            raise ValueError(f"a view needs exactly {N_PARTS} parts, got {self.parts.shape[0]}")
        if self.parts.shape[1] != self.root.shape[0]:
            raise ValueError("part and root filters disagree on channel count")
        if np.any(self.w_def < 0):
            raise ValueError("deformation weights must be non-negative")

    @property
    def root_size(self):
        return tuple(self.root.shape[1:])

    @property
    def part_size(self):
        return tuple(self.parts.shape[2:])

    @property
    def channels(self):
        return self.root.shape[0]

    @property
    def aspect(self):
        return self.root.shape[1] / self.root.shape[2]

    def part(self, p) -> PartSpec:
        return PartSpec(tuple(int(a) for a in self.anchors[p]), self.part_size,
                        tuple(float(w) for w in self.w_def[p]), self.radius)

    def arrays(self):
        return {"root": self.root, "parts": self.parts, "w_def": self.w_def, "bias": self.bias}

    def copy(self):
        return ViewModel(self.root.copy(), self.parts.copy(), self.anchors.copy(),
                         self.w_def.copy(), self.radius, self.bias.copy())


@dataclass
class ClassModel:
    label: int
    name: str
    views: list

    def __post_init__(self):
        if self.label < 1:
            raise ValueError("class labels start at 1; 0 is background")
        if not self.views:
            raise ValueError("a class needs at least one view")
        sizes = [v.root_size for v in self.views]
        if len(set(sizes)) != len(sizes):
            raise ValueError(f"view root sizes must be distinct, got {sizes}")

    def copy(self):
        return ClassModel(self.label, self.name, [v.copy() for v in self.views])


def grid_layout(root_size, radius=None):
    """Part size and 3x3 anchors tiling a root of ``root_size`` cells."""
    rh, rw = root_size
    ph, pw = max(1, -(-rh // 3)), max(1, -(-rw // 3))
    anchors = []
    for a in range(3):
        for b in range(3):
            anchors.append((int(round(a * (rh - ph) / 2.0)), int(round(b * (rw - pw) / 2.0))))
    if radius is None:
        radius = max(ph, pw)
    return (ph, pw), np.array(anchors, dtype=np.int64), int(radius)


def init_view(channels, root_size, rng, radius=None, w_def=(0.0, 0.0, 0.1, 0.1), scale=0.01):
    (ph, pw), anchors, radius = grid_layout(root_size, radius)
    root = rng.normal(0.0, scale, size=(channels,) + tuple(root_size))
    parts = rng.normal(0.0, scale, size=(N_PARTS, channels, ph, pw))
    wd = np.tile(np.asarray(w_def, dtype=np.float64), (N_PARTS, 1))
    return ViewModel(root, parts, anchors, wd, radius)


def init_class(label, name, channels, root_sizes, seed=0, radius=None, w_def=(0.0, 0.0, 0.1, 0.1)):
    rng = np.random.default_rng(seed)
    views = [init_view(channels, rs, rng, radius, w_def) for rs in root_sizes]
    return ClassModel(label, name, views)


# ---------------------------------------------------------------------------
# layers


def score_filters(phi, root, parts):
    """Appearance responses: one map for the root, one per part.

    Returns ``(F_root [Hr, Wr], F_parts [P, Hp, Wp])``.  Responses are summed
    over channels.
    """
    phi, root, parts = tc.as_node(phi), tc.as_node(root), tc.as_node(parts)
    c, rh, rw = root.value.shape
    f_root = tc.correlate2d(phi, tc.reshape(root, (1, c, rh, rw)), 1)
    f_root = tc.reshape(f_root, f_root.value.shape[1:])
    f_parts = tc.correlate2d(phi, parts, 1)
    return f_root, f_parts


def offsets_grid(radius):
    """All (di, dj) in [-r, r]^2 in row-major order."""
    r = max(int(radius), 0)
    d = np.arange(-r, r + 1)
    di, dj = np.meshgrid(d, d, indexing="ij")
    return np.stack([di.ravel(), dj.ravel()], axis=-1)


def deformation_features(offsets):
    offsets = np.asarray(offsets, dtype=np.float64)
    return np.concatenate([np.abs(offsets), offsets ** 2], axis=-1)


def deform(f_parts, anchors, w_def, radius, out_shape=None):
    """Deformation layer over a stack of part maps.

    ``f_parts`` is [P, Hp, Wp]; the output is [P, Ho, Wo] where output
    location (i, j) reads part positions ``(i, j) + anchor + d``.  Reads
    outside the part map score -inf.  The chosen offsets are saved on the
    returned node as ``saved["offsets"]`` with shape [P, Ho, Wo, 2].
    """
    f_parts, w_def = tc.as_node(f_parts), tc.as_node(w_def)
    fp = f_parts.value
    if fp.ndim != 3:
        raise tc.ShapeError(f"part maps must be [P,H,W], got {fp.shape}")
    n, hp, wp = fp.shape
    anchors = np.asarray(anchors, dtype=np.int64).reshape(n, 2)
    if w_def.value.shape != (n, 4):
        raise tc.ShapeError(f"deformation weights must be [{n},4], got {w_def.value.shape}")
    ho, wo = out_shape if out_shape is not None else (hp, wp)
    r = max(int(radius), 0)
    k = 2 * r + 1
    offs = offsets_grid(r)
    phi_d = deformation_features(offs)                     # [K2, 4]
    wd = w_def.value
    # fixed left-to-right sum (no BLAS) so results do not depend on threading
    cost = (wd[:, None, 0] * phi_d[None, :, 0] + wd[:, None, 1] * phi_d[None, :, 1]
            + wd[:, None, 2] * phi_d[None, :, 2] + wd[:, None, 3] * phi_d[None, :, 3])

    pad_after_h = max(0, ho - 1 + int(anchors[:, 0].max()) + r - (hp - 1))
    pad_after_w = max(0, wo - 1 + int(anchors[:, 1].max()) + r - (wp - 1))
    padded = np.full((n, hp + r + pad_after_h, wp + r + pad_after_w), -np.inf)
    padded[:, r:r + hp, r:r + wp] = fp
    win = sliding_window_view(padded, (k, k), axis=(1, 2))
    rows = anchors[:, 0, None] + np.arange(ho)[None, :]
    cols = anchors[:, 1, None] + np.arange(wo)[None, :]
    sel = win[np.arange(n)[:, None, None], rows[:, :, None], cols[:, None, :]]
    scores = sel.reshape(n, ho, wo, k * k) - cost[:, None, None, :]
    idx = scores.argmax(axis=-1)
    out = np.take_along_axis(scores, idx[..., None], axis=-1)[..., 0]
    chosen = offs[idx]                                     # [P, Ho, Wo, 2]
    src_r = rows[:, :, None] + chosen[..., 0]
    src_c = cols[:, None, :] + chosen[..., 1]
    feats = phi_d[idx]                                     # [P, Ho, Wo, 4]

    def _backward(g):
        gp = gw = None
        if f_parts.requires_grad:
            ok = np.isfinite(out)
            flat = (np.arange(n)[:, None, None] * hp + src_r) * wp + src_c
            gp = np.bincount(flat[ok], weights=g[ok], minlength=n * hp * wp).reshape(n, hp, wp)
        if w_def.requires_grad:
            gw = -np.einsum("pij,pijk->pk", np.where(np.isfinite(out), g, 0.0), feats)
        return gp, gw

    node = tc._make(out, (f_parts, w_def), _backward, "deform")
    node.saved["offsets"] = chosen
    return node


def deform_single(f_part, part: PartSpec, out_shape=None):
    """Deform one 2-D part map; returns ``(F_def, offsets)`` as arrays."""
    f = np.asarray(f_part, dtype=np.float64)[None]
    node = deform(f, [part.anchor], np.asarray(part.w_def, dtype=np.float64)[None],
                  part.radius, out_shape)
    return node.value[0], node.saved["offsets"][0]


def and_accumulate(f_root, f_def, bias=None):
    """View score: root map + bias + sum of deformed part maps."""
    f_root, f_def = tc.as_node(f_root), tc.as_node(f_def)
    if f_def.value.shape[1:] != f_root.value.shape:
        raise tc.ShapeError(
            f"deformed part extent {f_def.value.shape[1:]} != root extent {f_root.value.shape}"
        )
    parents = [f_root, f_def]
    value = f_root.value + f_def.value.sum(axis=0)
    if bias is not None:
        bias = tc.as_node(bias)
        parents.append(bias)
        value = value + bias.value[0]
    n = f_def.value.shape[0]

    def _backward(g):
        grads = [g, np.broadcast_to(g, (n,) + g.shape)]
        if bias is not None:
            grads.append(np.array([g.sum()]))
        return tuple(grads)

    return tc._make(value, parents, _backward, "and")


def or_max(view_maps):
    """Max over views, aligned by top-left location.

    Views may have different extents; a view only competes where its map
    exists.  Returns ``(F, argmax)`` where ``argmax`` is -1 at locations no
    view covers (F is -inf there).
    """
    view_maps = [tc.as_node(v) for v in view_maps]
    if not view_maps:
        raise ValueError("or_max needs at least one view")
    h = max(v.value.shape[0] for v in view_maps)
    w = max(v.value.shape[1] for v in view_maps)
    stack = np.full((len(view_maps), h, w), -np.inf)
    for k, v in enumerate(view_maps):
        vh, vw = v.value.shape
        stack[k, :vh, :vw] = v.value
    arg = stack.argmax(axis=0)
    out = np.take_along_axis(stack, arg[None], axis=0)[0]
    arg = np.where(np.isfinite(out), arg, -1)

    def _backward(g):
        grads = []
        for k, v in enumerate(view_maps):
            vh, vw = v.value.shape
            grads.append(np.where(arg[:vh, :vw] == k, g[:vh, :vw], 0.0))
        return tuple(grads)

    node = tc._make(out, view_maps, _backward, "or")
    node.saved["argmax"] = arg
    return node, arg


# ---------------------------------------------------------------------------
# class-level forward


@dataclass
class ViewResponse:
    view_index: int
    score: tc.Node          # F_v
    offsets: np.ndarray     # [9, Hv, Wv, 2]


@dataclass
class ClassResponse:
    """Responses of one class at one scale."""

    class_index: int
    label: int
    scale_index: int
    geometry: ScaleGeometry
    score: tc.Node                  # F(x_s, y), [H, W]
    argmax_view: np.ndarray         # [H, W], -1 where no view fits
    views: dict                     # view index -> ViewResponse
    skipped_views: list


def view_nodes(view: ViewModel, trainable: bool):
    make = tc.parameter if trainable else tc.constant
    return {name: make(arr) for name, arr in view.arrays().items()}


def class_response(phi, cls: ClassModel, nodes, class_index, geometry, deformable=True):
    """Forward one class over one appearance map.

    ``nodes`` is a list (one per view) of dicts from :func:`view_nodes`.
    Views whose root or part filter does not fit the map are skipped.
    Returns ``None`` if no view fits.
    """
    phi = tc.as_node(phi)
    _, h, w = phi.value.shape
    maps, responses, skipped, kept = [], {}, [], []
    for v, (view, vn) in enumerate(zip(cls.views, nodes)):
        rh, rw = view.root_size
        ph, pw = view.part_size
        if rh > h or rw > w or ph > h or pw > w:
            skipped.append(v)
            continue
        f_root, f_parts = score_filters(phi, vn["root"], vn["parts"])
        radius = view.radius if deformable else 0
        f_def = deform(f_parts, view.anchors, vn["w_def"], radius, f_root.value.shape)
        f_v = and_accumulate(f_root, f_def, vn["bias"])
        maps.append(f_v)
        kept.append(v)
        responses[v] = ViewResponse(v, f_v, f_def.saved["offsets"])
    if not maps:
        return None
    f, arg = or_max(maps)
    arg = np.where(arg >= 0, np.asarray(kept)[np.maximum(arg, 0)], -1)
    return ClassResponse(class_index, cls.label, geometry.scale_index, geometry, f, arg,
                         responses, skipped)


def location_extents(resp: ClassResponse, cls: ClassModel, rows, cols):
    """Cell rectangle (top, left, height, width) covering root and deformed parts."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    top = np.empty(rows.shape, dtype=np.int64)
    left = np.empty_like(top)
    bottom = np.empty_like(top)
    right = np.empty_like(top)
    views = resp.argmax_view[rows, cols]
    for v in np.unique(views):
        if v < 0:
            continue
        m = views == v
        view = cls.views[v]
        rh, rw = view.root_size
        ph, pw = view.part_size
        r, c = rows[m], cols[m]
        offs = resp.views[v].offsets[:, r, c]                 # [9, n, 2]
        pr = r[None] + view.anchors[:, 0, None] + offs[..., 0]
        pc = c[None] + view.anchors[:, 1, None] + offs[..., 1]
        top[m] = np.minimum(r, pr.min(axis=0))
        left[m] = np.minimum(c, pc.min(axis=0))
        bottom[m] = np.maximum(r + rh, (pr + ph).max(axis=0))
        right[m] = np.maximum(c + rw, (pc + pw).max(axis=0))
    return top, left, bottom - top, right - left


def response_boxes(resp: ClassResponse, cls: ClassModel, rows, cols, image_shape=None,
                   box_mode="union"):
    """Input-pixel boxes for the given response locations."""
    if box_mode == "root":
        views = resp.argmax_view[rows, cols]
        sizes = np.array([cls.views[v].root_size for v in views]).reshape(-1, 2)
        top, left, hh, ww = np.asarray(rows), np.asarray(cols), sizes[:, 0], sizes[:, 1]
    else:
        top, left, hh, ww = location_extents(resp, cls, rows, cols)
    boxes = project_boxes(top, left, hh, ww, resp.geometry)
    if image_shape is not None:
        height, width = image_shape
        boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0.0, width)
        boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0.0, height)
    return boxes


def emit_assignments(responses, classes, image_shape=None, floor=None, box_mode="union"):
    """One assignment per (scale, location, class) with a finite response.

    With ``floor`` set, only responses strictly above it are kept.
    """
    from .nms import AssignmentSet

    sets = []
    for resp in responses:
        f = resp.score.value
        ok = np.isfinite(f)
        if floor is not None:
            ok &= f > floor
        rows, cols = np.nonzero(ok)
        if rows.size == 0:
            continue
        cls = classes[resp.class_index]
        boxes = response_boxes(resp, cls, rows, cols, image_shape, box_mode)
        keys = np.stack([np.full(rows.size, resp.scale_index), np.full(rows.size, resp.class_index),
                         rows, cols], axis=-1)
        sets.append(AssignmentSet(boxes, np.full(rows.size, cls.label), f[rows, cols], keys))
    return AssignmentSet.concat(sets, tag="A0")
