"""Synthetic part-composed scenes, raster files and the dataset manifest.

Every object is a faint root rectangle plus nine part patterns laid on a
3x3 grid over it, each part displaced by Gaussian jitter.  That is the
generative story a deformable parts model assumes, so deformation weights
have something to learn.

Manifest format: a header line ``convdpm-manifest <version> <width> <height>``
followed by one line per image: the raster path (relative to the manifest)
then zero or more ``class x1 y1 x2 y2`` groups, space separated.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

MANIFEST_VERSION = 1
MANIFEST_MAGIC = "convdpm-manifest"

PATTERNS = ("dot", "ring", "hbar", "vbar", "cross", "checker")


@dataclass(frozen=True)
class ClassSpec:
    name: str
    variants: tuple = ((16, 16), (12, 24))      # (height, width) in pixels at scale 1
    pattern: str = "dot"
    jitter: float = 1.0
    scale_range: tuple = (1.0, 1.3)
    occlusion: float = 0.0
    root_contrast: float = 0.12
    part_contrast: float = 0.45

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown part pattern {self.pattern!r}")


@dataclass(frozen=True)
class SceneSpec:
    image_size: tuple = (64, 64)               # (height, width)
    classes: tuple = (ClassSpec("A"), ClassSpec("B", variants=((16, 16), (24, 12)), pattern="ring"))
    objects_per_image: tuple = (1, 2)
    clutter: float = 0.0                       # mean distractor parts per image
    noise: float = 0.03
    margin: int = 4
    seed: int = 0
    max_retries: int = 50

    def class_names(self):
        return [c.name for c in self.classes]


@dataclass
class Annotation:
    image_id: str
    labels: list                                # class names
    boxes: np.ndarray                           # [n, 4] x1 y1 x2 y2

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)


@dataclass
class ObjectRecord:
    class_name: str
    variant: int
    box: tuple
    part_centers: np.ndarray                    # [9, 2] (y, x)
    occluded: bool = False


@dataclass
class Dataset:
    images: list                                # uint8 arrays [C, H, W]
    annotations: list
    class_names: list
    objects: list = field(default_factory=list) # per image: list of ObjectRecord

    def __len__(self):
        return len(self.images)

    def image_float(self, i):
        return self.images[i].astype(np.float64) / 255.0

    def subset(self, index):
        index = list(index)
        objs = [self.objects[i] for i in index] if self.objects else []
        return Dataset([self.images[i] for i in index], [self.annotations[i] for i in index],
                       list(self.class_names), objs)


# ---------------------------------------------------------------------------
# rendering


def part_pattern(kind, h, w):
    """Zero-mean-free pattern in [-1, 1] filling an h x w patch."""
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ry, rx = max(h / 2.0, 0.5), max(w / 2.0, 0.5)
    d = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    if kind == "dot":
        return (d <= 0.75).astype(float)
    if kind == "ring":
        return ((d > 0.45) & (d <= 1.0)).astype(float)
    if kind == "hbar":
        return (np.abs(yy - cy) <= max(h / 6.0, 0.5)).astype(float)
    if kind == "vbar":
        return (np.abs(xx - cx) <= max(w / 6.0, 0.5)).astype(float)
    if kind == "cross":
        return ((np.abs(yy - cy) <= max(h / 8.0, 0.5)) | (np.abs(xx - cx) <= max(w / 8.0, 0.5))).astype(float)
    if kind == "checker":
        return np.where(((yy * 2 // max(h, 1)) + (xx * 2 // max(w, 1))) % 2 == 0, 1.0, -1.0)
    raise ValueError(kind)


def _stamp(canvas, patch, top, left):
    h, w = patch.shape
    H, W = canvas.shape
    y0, x0 = max(top, 0), max(left, 0)
    y1, x1 = min(top + h, H), min(left + w, W)
    if y0 >= y1 or x0 >= x1:
        return
    canvas[y0:y1, x0:x1] += patch[y0 - top:y1 - top, x0 - left:x1 - left]


def object_layer(cls: ClassSpec, box, part_centers, shape):
    """Additive intensity layer for one object, zero outside its box."""
    layer = np.zeros(shape)
    x1, y1, x2, y2 = (int(v) for v in box)
    layer[y1:y2, x1:x2] += cls.root_contrast
    ph = max(2, int(round((y2 - y1) / 3.0 * 0.7)))
    pw = max(2, int(round((x2 - x1) / 3.0 * 0.7)))
    patch = part_pattern(cls.pattern, ph, pw) * cls.part_contrast
    for cy, cx in part_centers:
        _stamp(layer, patch, int(round(cy - ph / 2.0)), int(round(cx - pw / 2.0)))
    mask = np.zeros(shape, dtype=bool)
    mask[y1:y2, x1:x2] = True
    return np.where(mask, layer, 0.0)


def template_centers(box):
    x1, y1, x2, y2 = box
    ch, cw = (y2 - y1) / 3.0, (x2 - x1) / 3.0
    return np.array([(y1 + (a + 0.5) * ch, x1 + (b + 0.5) * cw) for a in range(3) for b in range(3)])


def _place_object(rng, cls, spec, existing):
    H, W = spec.image_size
    variant = int(rng.integers(len(cls.variants)))
    bh, bw = cls.variants[variant]
    s = rng.uniform(*cls.scale_range)
    h, w = int(round(bh * s)), int(round(bw * s))
    m = spec.margin
    if h + 2 * m > H or w + 2 * m > W:
        return None
    for _ in range(spec.max_retries):
        x1 = int(rng.integers(m, W - m - w + 1))
        y1 = int(rng.integers(m, H - m - h + 1))
        box = (x1, y1, x1 + w, y1 + h)
        if all(_disjoint(box, other.box) for other in existing):
            return variant, box
    return None


def _disjoint(a, b, gap=2):
    return (a[2] + gap <= b[0] or b[2] + gap <= a[0] or a[3] + gap <= b[1] or b[3] + gap <= a[1])


def render_scene(rng, spec: SceneSpec, class_list):
    """Render one image with one object per entry of ``class_list``.

    Returns ``(uint8 image [1, H, W], objects)`` or ``None`` if the objects
    cannot be placed without touching.
    """
    H, W = spec.image_size
    by_name = {c.name: c for c in spec.classes}
    canvas = np.full((H, W), 0.5)
    objects = []
    for name in class_list:
        cls = by_name[name]
        placed = _place_object(rng, cls, spec, objects)
        if placed is None:
            return None
        variant, box = placed
        centers = template_centers(box)
        if cls.jitter > 0:
            centers = centers + rng.normal(0.0, cls.jitter, size=centers.shape)
            x1, y1, x2, y2 = box
            centers[:, 0] = np.clip(centers[:, 0], y1, y2)
            centers[:, 1] = np.clip(centers[:, 1], x1, x2)
        objects.append(ObjectRecord(cls.name, variant, box, centers))
    for obj in objects:
        canvas += object_layer(by_name[obj.class_name], obj.box, obj.part_centers, (H, W))
    for obj in objects:
        cls = by_name[obj.class_name]
        if cls.occlusion > 0 and rng.random() < cls.occlusion:
            x1, y1, x2, y2 = obj.box
            oh, ow = (y2 - y1) // 2, (x2 - x1) // 2
            oy = y1 + int(rng.integers(0, y2 - y1 - oh + 1))
            ox = x1 + int(rng.integers(0, x2 - x1 - ow + 1))
            canvas[oy:oy + oh, ox:ox + ow] = 0.5
            obj.occluded = True
    n_clutter = int(rng.poisson(spec.clutter)) if spec.clutter > 0 else 0
    for _ in range(n_clutter):
        cls = spec.classes[int(rng.integers(len(spec.classes)))]
        ph, pw = int(rng.integers(3, 6)), int(rng.integers(3, 6))
        patch = part_pattern(cls.pattern, ph, pw) * cls.part_contrast
        top, left = int(rng.integers(0, H - ph)), int(rng.integers(0, W - pw))
        if any(not _disjoint((left, top, left + pw, top + ph), o.box, 0) for o in objects):
            continue
        _stamp(canvas, patch, top, left)
    if spec.noise > 0:
        canvas = canvas + rng.normal(0.0, spec.noise, size=canvas.shape)
    img = np.clip(np.round(canvas * 255.0), 0, 255).astype(np.uint8)
    return img[None], objects


def class_schedule(rng, spec: SceneSpec, total):
    """Class name per object: equal shares (largest remainder), shuffled."""
    k = len(spec.classes)
    base = [total // k + (1 if i < total % k else 0) for i in range(k)]
    names = [c.name for c, n in zip(spec.classes, base) for _ in range(n)]
    rng.shuffle(names)
    return names


def generate(spec: SceneSpec, n_images, id_prefix="img", scene_retries=20) -> Dataset:
    """Deterministic under ``spec.seed``.

    Per-image object counts are drawn from ``objects_per_image`` and classes
    are dealt from a balanced schedule, so class totals are exact.  A scene
    that cannot be placed is redrawn; after ``scene_retries`` failures its
    last object is dropped.
    """
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.objects_per_image
    counts = rng.integers(lo, hi + 1, size=n_images)
    schedule = class_schedule(rng, spec, int(counts.sum()))
    images, annotations, objects = [], [], []
    pos = 0
    for i, n in enumerate(counts):
        wanted = schedule[pos:pos + n]
        pos += n
        out, tries = None, 0
        while out is None:
            out = render_scene(rng, spec, wanted)
            tries += 1
            if out is None and tries >= scene_retries:
                wanted, tries = wanted[:-1], 0
        img, objs = out
        image_id = f"{id_prefix}{i:05d}"
        images.append(img)
        annotations.append(Annotation(image_id, [o.class_name for o in objs],
                                      np.array([o.box for o in objs], dtype=np.float64).reshape(-1, 4)))
        objects.append(objs)
    return Dataset(images, annotations, spec.class_names(), objects)


# ---------------------------------------------------------------------------
# raster files: binary PGM (1 channel) / PPM (3 channels)


def write_raster(path, image):
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ValueError("rasters are 8-bit")
    if image.ndim == 2:
        image = image[None]
    c, h, w = image.shape
    if c == 1:
        head, body = b"P5", image[0]
    elif c == 3:
        head, body = b"P6", image.transpose(1, 2, 0)
    else:
        raise ValueError(f"rasters need 1 or 3 channels, got {c}")
    with open(path, "wb") as fh:
        fh.write(head + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(body).tobytes())


def read_raster(path):
    """Returns uint8 [C, H, W]."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated raster header")
        tokens.append(data[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported raster ({magic!r}, maxval {maxval})")
    c = 1 if magic == b"P5" else 3
    body = np.frombuffer(data, dtype=np.uint8, count=w * h * c, offset=pos)
    if c == 1:
        return body.reshape(1, h, w).copy()
    return body.reshape(h, w, 3).transpose(2, 0, 1).copy()


# ---------------------------------------------------------------------------
# manifest


def _fmt(v):
    return repr(float(v))


def write_dataset(root, dataset: Dataset, image_dir="images", manifest="manifest.txt"):
    os.makedirs(os.path.join(root, image_dir), exist_ok=True)
    h, w = dataset.images[0].shape[1:] if dataset.images else (0, 0)
    lines = [f"{MANIFEST_MAGIC} {MANIFEST_VERSION} {w} {h}"]
    for img, ann in zip(dataset.images, dataset.annotations):
        ext = ".pgm" if img.shape[0] == 1 else ".ppm"
        rel = f"{image_dir}/{ann.image_id}{ext}"
        write_raster(os.path.join(root, rel), img)
        fields = [rel]
        for name, box in zip(ann.labels, ann.boxes):
            fields += [name] + [_fmt(v) for v in box]
        lines.append(" ".join(fields))
    path = os.path.join(root, manifest)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


@dataclass
class ManifestEntry:
    path: str
    annotation: Annotation


def image_id_from_path(path):
    return os.path.splitext(os.path.basename(path))[0]


def read_manifest(path):
    """Returns ``(entries, (width, height))``; raster paths are resolved."""
    base = os.path.dirname(os.path.abspath(path))
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty manifest")
    head = lines[0].split()
    if len(head) != 4 or head[0] != MANIFEST_MAGIC:
        raise ValueError(f"{path}: bad manifest header")
    if int(head[1]) != MANIFEST_VERSION:
        raise ValueError(f"{path}: manifest version {head[1]} not supported")
    size = (int(head[2]), int(head[3]))
    entries = []
    for lineno, line in enumerate(lines[1:], 2):
        parts = line.split()
        if not parts:
            continue
        rel, rest = parts[0], parts[1:]
        if len(rest) % 5:
            raise ValueError(f"{path}:{lineno}: annotation groups must have 5 fields")
        labels, boxes = [], []
        for k in range(0, len(rest), 5):
            labels.append(rest[k])
            boxes.append([float(v) for v in rest[k + 1:k + 5]])
        ann = Annotation(image_id_from_path(rel), labels, np.array(boxes).reshape(-1, 4))
        entries.append(ManifestEntry(os.path.join(base, rel), ann))
    return entries, size


def load_dataset(manifest_path) -> Dataset:
    entries, _ = read_manifest(manifest_path)
    images = [read_raster(e.path) for e in entries]
    names = []
    for e in entries:
        for n in e.annotation.labels:
            if n not in names:
                names.append(n)
    return Dataset(images, [e.annotation for e in entries], sorted(names))


# ---------------------------------------------------------------------------
# scene spec files (JSON)


def scene_spec_to_dict(spec: SceneSpec):
    d = asdict(spec)
    d["classes"] = [asdict(c) for c in spec.classes]
    return json.loads(json.dumps(d))


def scene_spec_from_dict(d) -> SceneSpec:
    """Inverse of :func:`scene_spec_to_dict`; unknown keys raise TypeError."""
    d = dict(d)
    classes = d.pop("classes", None)
    if classes is not None:
        cls = []
        for c in classes:
            c = dict(c)
            for key in ("variants",):
                if key in c:
                    c[key] = tuple(tuple(int(v) for v in pair) for pair in c[key])
            if "scale_range" in c:
                c["scale_range"] = tuple(float(v) for v in c["scale_range"])
            cls.append(ClassSpec(**c))
        d["classes"] = tuple(cls)
    for key in ("image_size", "objects_per_image"):
        if key in d:
            d[key] = tuple(int(v) for v in d[key])
    return SceneSpec(**d)
