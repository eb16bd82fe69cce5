"""Small fully-convolutional feature extractor producing the appearance map.

The default stack is a desk-scale stand-in for an ImageNet-pretrained
network.  Resolution is controlled through the stride of the first conv
layer, never by resizing filters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .pyramid import ScaleGeometry, compute_geometry


@dataclass(frozen=True)
class FeatNetSpec:
    """Ordered layer list.

    Each layer is a tuple: ``("conv", out_channels, kernel, stride)``,
    ``("pool", kernel, stride)`` or ``("relu",)``.
    """

    layers: tuple = (
        ("conv", 8, 5, 1),
        ("relu",),
        ("pool", 2, 2),
        ("conv", 16, 3, 1),
        ("relu",),
        ("pool", 2, 2),
    )
    in_channels: int = 1
    first_layer_stride: int = 1

    def __post_init__(self):
        layers = tuple(tuple(layer) for layer in self.layers)
        object.__setattr__(self, "layers", layers)
        if not any(layer[0] == "conv" for layer in layers):
            raise ValueError("feature net needs at least one conv layer")
        for layer in layers:
            if layer[0] not in ("conv", "pool", "relu"):
                raise ValueError(f"unknown layer {layer!r}")
        if self.first_layer_stride < 1:
            raise ValueError("first_layer_stride must be >= 1")

    def resolved_layers(self):
        """Layers with the first conv's stride replaced by ``first_layer_stride``."""
        out, first = [], True
        for layer in self.layers:
            if layer[0] == "conv" and first:
                layer = ("conv", layer[1], layer[2], self.first_layer_stride)
                first = False
            out.append(layer)
        return out

    def geometry_layers(self):
        geo = []
        for layer in self.resolved_layers():
            if layer[0] == "conv":
                geo.append(("conv", layer[2], layer[3]))
            elif layer[0] == "pool":
                geo.append(("pool", layer[1], layer[2]))
        return geo

    def geometry(self) -> ScaleGeometry:
        return compute_geometry(self.geometry_layers())

    @property
    def out_channels(self) -> int:
        convs = [layer for layer in self.layers if layer[0] == "conv"]
        return convs[-1][1]

    def conv_shapes(self):
        shapes, c = [], self.in_channels
        for layer in self.layers:
            if layer[0] == "conv":
                shapes.append((layer[1], c, layer[2], layer[2]))
                c = layer[1]
        return shapes

    def to_dict(self):
        return {"layers": [list(layer) for layer in self.layers],
                "in_channels": self.in_channels,
                "first_layer_stride": self.first_layer_stride}

    @classmethod
    def from_dict(cls, d):
        return cls(layers=tuple(tuple(layer) for layer in d["layers"]),
                   in_channels=int(d["in_channels"]),
                   first_layer_stride=int(d["first_layer_stride"]))


IDENTITY_SPEC = FeatNetSpec(layers=(("conv", 1, 1, 1),), in_channels=1)


@dataclass
class FeatNetParams:
    weights: list
    biases: list
    trainable: bool = True

    def arrays(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def copy(self):
        return FeatNetParams([w.copy() for w in self.weights],
                             [b.copy() for b in self.biases], self.trainable)


def init_params(spec: FeatNetSpec, seed=0) -> FeatNetParams:
    """Uniform in +-1/sqrt(fan_in) with zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for shape in spec.conv_shapes():
        fan_in = shape[1] * shape[2] * shape[3]
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=shape))
        biases.append(np.zeros(shape[0]))
    return FeatNetParams(weights, biases)


def set_trainable(params: FeatNetParams, flag: bool) -> None:
    params.trainable = bool(flag)


@dataclass
class ScaleMap:
    """Appearance features at one pyramid level plus their pixel geometry."""

    features: tc.Node
    geometry: ScaleGeometry
    param_nodes: list = field(default_factory=list)

    @property
    def value(self):
        return self.features.value


def output_size(spec: FeatNetSpec, height, width):
    h, w = height, width
    for layer in spec.resolved_layers():
        if layer[0] == "conv":
            k, s = layer[2], layer[3]
        elif layer[0] == "pool":
            k, s = layer[1], layer[2]
        else:
            continue
        if h < k or w < k:
            return 0, 0
        h, w = (h - k) // s + 1, (w - k) // s + 1
    return h, w


def extract(image_level, spec: FeatNetSpec, params: FeatNetParams, geometry=None) -> ScaleMap:
    """Run the stack over the whole level.

    When ``params.trainable`` is false the weights enter the graph as
    constants, so no parameter gradient is ever formed.
    """
    x = np.asarray(image_level, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[0] != spec.in_channels:
        raise ValueError(f"expected {spec.in_channels} input channels, got {x.shape[0]}")
    geom = geometry if geometry is not None else spec.geometry()
    need = geom.fov
    if x.shape[1] < need or x.shape[2] < need or output_size(spec, *x.shape[1:]) == (0, 0):
        raise ValueError(
            f"input {x.shape[1]}x{x.shape[2]} smaller than the required minimum {need}x{need}"
        )
    make = tc.parameter if params.trainable else tc.constant
    param_nodes = []
    node = tc.constant(x)
    conv_i = 0
    for layer in spec.resolved_layers():
        if layer[0] == "conv":
            w = make(params.weights[conv_i])
            b = make(params.biases[conv_i])
            param_nodes += [w, b]
            node = tc.add_bias(tc.correlate2d(node, w, layer[3]), b)
            conv_i += 1
        elif layer[0] == "relu":
            node = tc.relu(node)
        else:
            node, _ = tc.maxpool2d(node, layer[1], layer[2])
    return ScaleMap(node, geom, param_nodes if params.trainable else [])
