"""Image pyramid and the coordinate geometry between feature cells and pixels.

Pixel coordinates are continuous: pixel ``k`` covers ``[k, k + 1)``.  A
feature cell's field of view therefore starts at ``start + i * stride`` and
its centre sits at ``start + fov / 2 + i * stride``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class PyramidSpec:
    intervals_per_octave: int = 5
    min_dim: int = 48

    def __post_init__(self):
        if self.intervals_per_octave < 1:
            raise ValueError("intervals_per_octave must be >= 1")
        if self.min_dim < 1:
            raise ValueError("min_dim must be >= 1")


@dataclass(frozen=True)
class ScaleGeometry:
    """Maps feature cells at one pyramid level to original-image pixels.

    ``scale_y``/``scale_x`` are original pixels per level pixel, taken from
    the rounded level size rather than the ideal factor.
    """

    feat_stride: int
    fov: int
    fov_start: float = 0.0
    scale_y: float = 1.0
    scale_x: float = 1.0
    scale_index: int = 0

    @property
    def fov_center_offset(self) -> float:
        return self.fov_start + self.fov / 2.0

    @property
    def scale_factor(self) -> float:
        return 0.5 * (self.scale_y + self.scale_x)

    def at_level(self, level) -> "ScaleGeometry":
        return replace(self, scale_y=level.scale_y, scale_x=level.scale_x,
                       scale_index=level.index)


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float
    scale: int = 0

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)

    def clip(self, width, height) -> "Box":
        return Box(max(self.x1, 0.0), max(self.y1, 0.0),
                   min(self.x2, float(width)), min(self.y2, float(height)), self.scale)


@dataclass
class PyramidLevel:
    index: int
    image: np.ndarray
    ideal_factor: float
    scale_y: float
    scale_x: float


@dataclass
class Pyramid:
    levels: list
    undersized: bool = False

    def __len__(self):
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)


def level_sizes(height, width, spec: PyramidSpec):
    """Rounded (h, w) per level, stopping before the min side drops below min_dim."""
    sizes = []
    i = 0
    while True:
        f = 2.0 ** (-i / spec.intervals_per_octave)
        h, w = int(round(height * f)), int(round(width * f))
        if min(h, w) < spec.min_dim:
            break
        sizes.append((h, w, f))
        i += 1
    return sizes


def resize_bilinear(image, out_h, out_w):
    image = np.asarray(image, dtype=np.float64)
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    return ndimage.zoom(image, (1, out_h / h, out_w / w), order=1,
                        grid_mode=True, mode="nearest")


def build_pyramid(image, spec: PyramidSpec = PyramidSpec()) -> Pyramid:
    """Downsample ``image`` [C,H,W] by 2^(-i/intervals) per level."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    _, height, width = image.shape
    sizes = level_sizes(height, width, spec)
    if not sizes:
        level = PyramidLevel(0, image.copy(), 1.0, 1.0, 1.0)
        return Pyramid([level], undersized=True)
    levels = []
    for i, (h, w, f) in enumerate(sizes):
        levels.append(PyramidLevel(i, resize_bilinear(image, h, w), f, height / h, width / w))
    return Pyramid(levels)


LAYER_KINDS = ("conv", "pool")


def compute_geometry(layers) -> ScaleGeometry:
    """Receptive field of a valid-mode conv/pool stack.

    ``layers`` is an ordered list of ``(kind, kernel, stride)``.
    """
    layers = list(layers)
    if not layers:
        raise ValueError("layer stack is empty")
    fov, stride = 1, 1
    for kind, kernel, step in layers:
        if kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {kind!r}")
        fov += (kernel - 1) * stride
        stride *= step
    return ScaleGeometry(feat_stride=stride, fov=fov)


def project_box(location, size, geom: ScaleGeometry) -> Box:
    """Box spanning the FOV centres of the boundary cells of a cell rectangle.

    ``location`` is the (row, col) of the top-left cell, ``size`` the (h, w)
    extent in cells.  Each boundary cell contributes half a stride beyond its
    FOV centre, so a single cell yields a ``stride``-wide box and the rest of
    its field of view is context.
    """
    row, col = location
    h, w = size
    s = geom.feat_stride
    c = geom.fov_center_offset
    y1 = (c + row * s - s / 2.0) * geom.scale_y
    y2 = (c + (row + h - 1) * s + s / 2.0) * geom.scale_y
    x1 = (c + col * s - s / 2.0) * geom.scale_x
    x2 = (c + (col + w - 1) * s + s / 2.0) * geom.scale_x
    return Box(x1, y1, x2, y2, geom.scale_index)


def unproject_box(box: Box, geom: ScaleGeometry):
    """Inverse of :func:`project_box`: returns ((row, col), (h, w)) in cells."""
    s = geom.feat_stride
    c = geom.fov_center_offset
    row = (box.y1 / geom.scale_y + s / 2.0 - c) / s
    col = (box.x1 / geom.scale_x + s / 2.0 - c) / s
    h = (box.y2 - box.y1) / geom.scale_y / s
    w = (box.x2 - box.x1) / geom.scale_x / s
    return (int(round(row)), int(round(col))), (int(round(h)), int(round(w)))


def project_boxes(rows, cols, heights, widths, geom: ScaleGeometry):
    """Vectorised :func:`project_box`; returns an (n, 4) array of x1 y1 x2 y2."""
    s = geom.feat_stride
    c = geom.fov_center_offset
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    y1 = (c + rows * s - s / 2.0) * geom.scale_y
    y2 = (c + (rows + np.asarray(heights) - 1) * s + s / 2.0) * geom.scale_y
    x1 = (c + cols * s - s / 2.0) * geom.scale_x
    x2 = (c + (cols + np.asarray(widths) - 1) * s + s / 2.0) * geom.scale_x
    return np.stack([x1, y1, x2, y2], axis=-1)


def min_input_size(geom: ScaleGeometry) -> int:
    return int(math.ceil(geom.fov))
