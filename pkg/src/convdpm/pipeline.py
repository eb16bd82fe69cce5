"""Image -> pyramid -> features -> DPM responses -> candidate assignments.

Parameter nodes are created once per image and shared by every pyramid
level, so backward sums the per-scale gradients before any update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .dpm import class_response, emit_assignments, view_nodes
from .featnet import extract, output_size
from .model import DetectorModel
from .nms import AssignmentSet, OverlapPolicy, suppress
from .pyramid import build_pyramid


@dataclass
class ImageForward:
    image_shape: tuple
    responses: list          # ClassResponse, any (scale, class) order
    a0: AssignmentSet        # every finite location, no floor
    featnet_nodes: list
    dpm_nodes: list          # per class: per view: {name: node}
    undersized: bool = False

    def response(self, scale, class_index):
        for r in self.responses:
            if r.scale_index == scale and r.class_index == class_index:
                return r
        raise KeyError((scale, class_index))


def _featnet_nodes(model, trainable):
    make = tc.parameter if trainable else tc.constant
    return [make(a) for a in model.featnet.arrays()]


def forward_image(model: DetectorModel, image, train_featnet=False, train_dpm=False,
                  deformable=True) -> ImageForward:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    pyr = build_pyramid(image - model.input_mean, model.pyramid)
    fnodes = _featnet_nodes(model, train_featnet)
    dnodes = [[view_nodes(v, train_dpm) for v in cls.views] for cls in model.classes]
    base_geom = model.featnet_spec.geometry()
    responses = []
    for level in pyr:
        if output_size(model.featnet_spec, *level.image.shape[1:]) == (0, 0):
            continue
        phi = _extract_with_nodes(level.image, model, fnodes, base_geom.at_level(level))
        for ci, cls in enumerate(model.classes):
            resp = class_response(phi.features, cls, dnodes[ci], ci, phi.geometry, deformable)
            if resp is not None:
                responses.append(resp)
    a0 = emit_assignments(responses, model.classes, image.shape[1:], None, model.box_mode)
    return ImageForward(image.shape[1:], responses, a0, fnodes, dnodes, pyr.undersized)


def _extract_with_nodes(level_image, model, fnodes, geometry):
    from .featnet import ScaleMap

    node = tc.constant(level_image)
    k = 0
    for layer in model.featnet_spec.resolved_layers():
        if layer[0] == "conv":
            node = tc.add_bias(tc.correlate2d(node, fnodes[k], layer[3]), fnodes[k + 1])
            k += 2
        elif layer[0] == "relu":
            node = tc.relu(node)
        else:
            node, _ = tc.maxpool2d(node, layer[1], layer[2])
    return ScaleMap(node, geometry, [n for n in fnodes if n.requires_grad])


def extract_features(model, level_image):
    """Convenience wrapper matching :func:`convdpm.featnet.extract`."""
    return extract(level_image, model.featnet_spec, model.featnet, model.featnet_spec.geometry())


def detect(model: DetectorModel, image, policy=OverlapPolicy(), floor=-1.0) -> AssignmentSet:
    """Test-time inference: forward the pyramid, keep r > floor, apply NMS."""
    fwd = forward_image(model, image)
    pool = fwd.a0.subset(np.flatnonzero(fwd.a0.scores > floor)) if floor is not None else fwd.a0
    return suppress(pool, policy)


def response_gradient_root(fwd: ImageForward, pool: AssignmentSet, grad):
    """Scalar node whose backward delivers ``grad`` (dL/dr per pool entry)
    to the response maps it was read from."""
    grad = np.asarray(grad, dtype=np.float64)
    terms = []
    by_map = {}
    for (s, c, r, col), g in zip(pool.keys, grad):
        if g != 0.0:
            by_map.setdefault((int(s), int(c)), []).append((int(r), int(col), g))
    for (s, c), cells in by_map.items():
        resp = fwd.response(s, c)
        weights = np.zeros(resp.score.value.shape)
        for r, col, g in cells:
            weights[r, col] += g
        terms.append(tc.dot_const(resp.score, weights))
    if not terms:
        return None
    return tc.sum_scalars(terms)


def parameter_gradients(fwd: ImageForward, model: DetectorModel, pool, grad):
    """Back-propagate dL/dr to every trainable parameter.

    Returns ``{array name: gradient}`` using :meth:`DetectorModel.named_arrays`
    names; frozen parameters are absent.
    """
    root = response_gradient_root(fwd, pool, grad)
    out = {}
    if root is None or not root.requires_grad:
        return out
    tc.backward(root)
    names = list(model.named_arrays().keys())
    fnames = [n for n in names if n.startswith("featnet/")]
    for name, node in zip(fnames, fwd.featnet_nodes):
        if node.requires_grad:
            out[name] = node.grad if node.grad is not None else np.zeros_like(node.value)
    for ci, views in enumerate(fwd.dpm_nodes):
        for vi, nodes in enumerate(views):
            for key, node in nodes.items():
                if node.requires_grad:
                    out[f"class{ci}/view{vi}/{key}"] = (
                        node.grad if node.grad is not None else np.zeros_like(node.value))
    return out


def apply_update(model: DetectorModel, grads, lr, featnet_lr_scale=1.0):
    """Plain SGD step in place, then clamp deformation weights at zero.

    Feature-net arrays use ``lr * featnet_lr_scale``.
    """
    arrays = model.named_arrays()
    for name, g in grads.items():
        arr = arrays[name]
        step = lr * featnet_lr_scale if name.startswith("featnet/") else lr
        arr -= step * g
        if name.endswith("/w_def"):
            np.maximum(arr, 0.0, out=arr)
