"""Detector model container and its versioned binary file format.

File layout (all integers little-endian)::

    b"CDPMODEL"  u32 version  u32 header_len  header (UTF-8 JSON)
    u32 n_arrays, then per array:
        u16 name_len  name (UTF-8)  u8 ndim  u32 * ndim shape  float64 '<f8' data

The JSON header carries the feature-net spec, pyramid spec, per-class view
layout (anchors, radius) and an optional ``checkpoint`` section.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .dpm import ClassModel, ViewModel, init_class
from .featnet import FeatNetParams, FeatNetSpec, init_params
from .pyramid import PyramidSpec

MAGIC = b"CDPMODEL"
FORMAT_VERSION = 1


class ModelVersionError(ValueError):
    pass


@dataclass
class DetectorModel:
    featnet_spec: FeatNetSpec
    featnet: FeatNetParams
    classes: list
    pyramid: PyramidSpec = field(default_factory=PyramidSpec)
    box_mode: str = "union"
    input_mean: float = 0.5                     # subtracted from [0, 1] pixels

    @property
    def class_names(self):
        return [c.name for c in self.classes]

    def class_by_name(self, name):
        for c in self.classes:
            if c.name == name:
                return c
        raise KeyError(name)

    def copy(self):
        return DetectorModel(self.featnet_spec, self.featnet.copy(),
                             [c.copy() for c in self.classes], self.pyramid, self.box_mode,
                             self.input_mean)

    def named_arrays(self):
        """Every parameter array keyed by a stable name (views, not copies)."""
        out = {}
        for i, (w, b) in enumerate(zip(self.featnet.weights, self.featnet.biases)):
            out[f"featnet/w{i}"] = w
            out[f"featnet/b{i}"] = b
        for ci, cls in enumerate(self.classes):
            for vi, view in enumerate(cls.views):
                for name, arr in view.arrays().items():
                    out[f"class{ci}/view{vi}/{name}"] = arr
        return out


def build_model(class_specs, featnet_spec=FeatNetSpec(), pyramid=PyramidSpec(), seed=0,
                radius=None, w_def=(0.0, 0.0, 0.1, 0.1), box_mode="union", input_mean=0.5):
    """``class_specs`` is a list of ``(name, [root sizes in cells])``."""
    params = init_params(featnet_spec, seed)
    classes = []
    for i, (name, root_sizes) in enumerate(class_specs):
        classes.append(init_class(i + 1, name, featnet_spec.out_channels, root_sizes,
                                  seed=seed * 1000 + i + 1, radius=radius, w_def=w_def))
    return DetectorModel(featnet_spec, params, classes, pyramid, box_mode, input_mean)


def _header(model: DetectorModel, checkpoint=None):
    classes = []
    for cls in model.classes:
        classes.append({
            "label": cls.label,
            "name": cls.name,
            "views": [{"radius": v.radius, "anchors": v.anchors.tolist(),
                       "root_size": list(v.root_size), "part_size": list(v.part_size)}
                      for v in cls.views],
        })
    head = {
        "featnet": model.featnet_spec.to_dict(),
        "featnet_trainable": model.featnet.trainable,
        "pyramid": {"intervals_per_octave": model.pyramid.intervals_per_octave,
                    "min_dim": model.pyramid.min_dim},
        "box_mode": model.box_mode,
        "input_mean": model.input_mean,
        "classes": classes,
    }
    if checkpoint is not None:
        head["checkpoint"] = checkpoint
    return head


def dumps(model: DetectorModel, checkpoint=None) -> bytes:
    buf = io.BytesIO()
    head = json.dumps(_header(model, checkpoint), sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(head)))
    buf.write(head)
    arrays = model.named_arrays()
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads(data: bytes):
    """Returns ``(model, checkpoint_or_None)``."""
    view = memoryview(data)
    if bytes(view[:8]) != MAGIC:
        raise ValueError("not a model file (bad magic)")
    version, hlen = struct.unpack_from("<II", view, 8)
    if version != FORMAT_VERSION:
        raise ModelVersionError(
            f"model file version {version} is not supported (expected {FORMAT_VERSION})"
        )
    pos = 16
    head = json.loads(bytes(view[pos:pos + hlen]).decode("utf-8"))
    pos += hlen
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos:pos + nlen]).decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", view, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", view, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size

    spec = FeatNetSpec.from_dict(head["featnet"])
    n_conv = len(spec.conv_shapes())
    params = FeatNetParams([arrays[f"featnet/w{i}"] for i in range(n_conv)],
                           [arrays[f"featnet/b{i}"] for i in range(n_conv)],
                           bool(head.get("featnet_trainable", True)))
    classes = []
    for ci, c in enumerate(head["classes"]):
        views = []
        for vi, v in enumerate(c["views"]):
            p = f"class{ci}/view{vi}/"
            views.append(ViewModel(arrays[p + "root"], arrays[p + "parts"],
                                   np.array(v["anchors"], dtype=np.int64),
                                   arrays[p + "w_def"], int(v["radius"]), arrays[p + "bias"]))
        classes.append(ClassModel(int(c["label"]), c["name"], views))
    pyr = PyramidSpec(**head["pyramid"])
    model = DetectorModel(spec, params, classes, pyr, head.get("box_mode", "union"),
                          float(head.get("input_mean", 0.0)))
    return model, head.get("checkpoint")


def save(path, model: DetectorModel, checkpoint=None):
    with open(path, "wb") as fh:
        fh.write(dumps(model, checkpoint))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
