"""Command-line entry point: gen, train, detect, eval, render, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Configuration precedence is defaults < ``--config`` JSON file < ``--set
key=value`` overrides < dedicated flags; the effective configuration is
printed as the first output line (``config {...}``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
WORKERS_ENV = "CONVDPM_WORKERS"

log = logging.getLogger("convdpm")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _common(p):
    p.add_argument("--seed", type=int, default=None, help="run seed")
    p.add_argument("--deterministic", action="store_true",
                   help="single worker, single BLAS thread")
    p.add_argument("--workers", type=int, default=None,
                   help=f"worker processes (default: ${WORKERS_ENV} or 1)")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="convdpm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--spec", default=None, help="scene spec JSON (defaults if omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("-n", "--n-images", type=int, default=None)
    p.add_argument("--prefix", default=None, help="image id prefix")

    p = sub.add_parser("train", help="pretrain and jointly train a detector")
    _common(p)
    p.add_argument("--data", required=True, help="training manifest")
    p.add_argument("--val", default=None, help="validation manifest for per-epoch AP")
    p.add_argument("--out", required=True, help="model / checkpoint file")
    p.add_argument("--metrics", default=None, help="per-epoch metrics file")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    p.add_argument("--skip-pretrain", action="store_true")
    p.add_argument("--freeze-featnet", action="store_true")
    p.add_argument("--window-loss", action="store_true",
                   help="per-window hinge instead of the NMS loss")
    p.add_argument("--lr", type=float, default=None,
                   help="set every learning rate (pretraining and both joint phases)")

    p = sub.add_parser("detect", help="run a model over images")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--images", nargs="*", default=[],
                   help="raster files and/or manifests")
    p.add_argument("--out", required=True, help="detection file")

    p = sub.add_parser("eval", help="average precision of a detection file")
    _common(p)
    p.add_argument("--detections", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--out", default=None, help="also write the report here")

    p = sub.add_parser("render", help="draw detections and ground truth on an image")
    _common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--detections", default=None)
    p.add_argument("--manifest", default=None, help="ground truth source")
    p.add_argument("--min-score", type=float, default=None)
    p.add_argument("--out", required=True, help="output PPM")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    _common(p)
    p.add_argument("--seeds", type=int, default=20, help="instances per op")
    p.add_argument("--ops", nargs="*", default=None)
    p.add_argument("--inject-fault", default=None, metavar="OP",
                   help="sign-flip the backward of OP (harness self-test)")
    return parser


# ---------------------------------------------------------------------------
# configuration


DEFAULTS = {
    "seed": 0,
    "workers": 1,
    "deterministic": False,
    "scene": {"n_images": 100, "prefix": "img"},
    "model": {"views": "auto", "init_seed": None, "box_mode": "union", "radius": None,
              "w_def": [0.0, 0.0, 0.1, 0.1], "input_mean": 0.5,
              "intervals_per_octave": 5, "min_dim": 48},
    "detect": {"floor": -1.0},
}


def _merge(base, extra, path=""):
    for key, value in extra.items():
        if key not in base:
            raise UsageError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and not (key == "scene_spec"):
            if not isinstance(value, dict):
                raise UsageError(f"config key {path + key!r} must be a table")
            _merge(base[key], value, path + key + ".")
        else:
            base[key] = value


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_dotted(cfg, key, value):
    node, parts = cfg, key.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise UsageError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node or isinstance(node[parts[-1]], dict):
        raise UsageError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def effective_config(args):
    """Defaults < config file < --set overrides < dedicated flags."""
    from .data import SceneSpec, scene_spec_to_dict
    from .trainer import TrainConfig

    cfg = json.loads(json.dumps(DEFAULTS))
    cfg["train"] = TrainConfig().to_dict()
    cfg["scene_spec"] = scene_spec_to_dict(SceneSpec())
    env_workers = os.environ.get(WORKERS_ENV)
    if env_workers:
        try:
            cfg["workers"] = int(env_workers)
        except ValueError:
            raise UsageError(f"${WORKERS_ENV} must be an integer, got {env_workers!r}")
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except OSError as exc:
            raise DataError(f"cannot read config file {args.config}: {exc.strerror}")
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config} is not valid JSON: {exc}")
        _merge(cfg, file_cfg)
    for item in args.overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not KEY=VALUE")
        key, value = item.split("=", 1)
        _set_dotted(cfg, key.strip(), _parse_value(value.strip()))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.workers is not None:
        cfg["workers"] = args.workers
    if args.deterministic:
        cfg["deterministic"] = True
        cfg["workers"] = 1
    if cfg["workers"] < 1:
        raise UsageError("workers must be >= 1")
    command = args.command
    if command == "gen":
        if args.n_images is not None:
            cfg["scene"]["n_images"] = args.n_images
        if args.prefix is not None:
            cfg["scene"]["prefix"] = args.prefix
    if command == "train":
        t = cfg["train"]
        t["seed"] = cfg["seed"]
        if args.skip_pretrain:
            t["skip_pretrain"] = True
        if args.freeze_featnet:
            t["train_featnet"] = False
        if args.window_loss:
            t["loss"] = "window"
        if args.lr is not None:
            t["pretrain"]["lr"] = args.lr
            t["joint"]["lr_phase1"] = args.lr
            t["joint"]["lr_phase2"] = args.lr
    return cfg


def _echo(cfg):
    print("config " + json.dumps(cfg, sort_keys=True), flush=True)


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args, cfg):
    from .data import generate, scene_spec_from_dict, scene_spec_to_dict, write_dataset

    spec_dict = cfg["scene_spec"]
    if args.spec:
        try:
            with open(args.spec, encoding="utf-8") as fh:
                spec_dict = json.load(fh)
        except OSError as exc:
            raise DataError(f"cannot read spec file {args.spec}: {exc.strerror}")
        except json.JSONDecodeError as exc:
            raise DataError(f"spec file {args.spec} is not valid JSON: {exc}")
    if args.seed is not None or "seed" not in spec_dict:
        spec_dict = dict(spec_dict, seed=cfg["seed"])
    try:
        spec = scene_spec_from_dict(spec_dict)
    except (TypeError, ValueError, KeyError) as exc:
        raise DataError(f"invalid scene spec: {exc}")
    cfg["scene_spec"] = scene_spec_to_dict(spec)
    _echo(cfg)
    dataset = generate(spec, int(cfg["scene"]["n_images"]), id_prefix=cfg["scene"]["prefix"])
    try:
        path = write_dataset(args.out, dataset)
    except OSError as exc:
        raise DataError(f"cannot write dataset to {args.out}: {exc.strerror}")
    print(f"wrote {len(dataset)} images to {path}")


def _load_manifest_dataset(path):
    from .data import load_dataset

    try:
        return load_dataset(path)
    except OSError as exc:
        raise DataError(f"cannot read {exc.filename or path}: {exc.strerror}")
    except ValueError as exc:
        raise DataError(str(exc))


def auto_views(dataset, class_names, cell=4):
    """One square view per class plus one for the dominant aspect, if any.

    Root sizes are in feature cells of ``cell`` pixels; the square view has
    the median box area.
    """
    import numpy as np

    spec = {}
    for name in class_names:
        boxes = [b for ann in dataset.annotations for n, b in zip(ann.labels, ann.boxes) if n == name]
        boxes = np.array(boxes).reshape(-1, 4)
        if len(boxes) == 0:
            spec[name] = [(4, 4)]
            continue
        w = boxes[:, 2] - boxes[:, 0]
        h = boxes[:, 3] - boxes[:, 1]
        side = max(2, int(round(np.median(np.sqrt(w * h)) / cell)))
        views = [(side, side)]
        aspect = w / h
        wide, tall = aspect > 1.4, aspect < 1 / 1.4
        if wide.sum() >= len(boxes) / 5:
            ww, hh = np.median(w[wide]) / cell, np.median(h[wide]) / cell
            views.append((max(1, int(round(hh))), max(2, int(round(ww)))))
        if tall.sum() >= len(boxes) / 5:
            ww, hh = np.median(w[tall]) / cell, np.median(h[tall]) / cell
            views.append((max(2, int(round(hh))), max(1, int(round(ww)))))
        unique = []
        for v in views:
            if v not in unique:
                unique.append(v)
        spec[name] = unique
    return spec


def parse_views(text):
    """``"A:4x4,3x6;B:4x4,6x3"`` -> ``{"A": [(4, 4), (3, 6)], ...}``."""
    out = {}
    for chunk in filter(None, (c.strip() for c in text.split(";"))):
        if ":" not in chunk:
            raise UsageError(f"bad view spec {chunk!r}; expected NAME:HxW,HxW")
        name, sizes = chunk.split(":", 1)
        try:
            out[name.strip()] = [tuple(int(v) for v in s.lower().split("x")) for s in sizes.split(",")]
        except ValueError:
            raise UsageError(f"bad view size in {chunk!r}")
    return out


def _build_model(cfg, dataset):
    from .model import build_model
    from .pyramid import PyramidSpec

    m = cfg["model"]
    names = list(dataset.class_names)
    if m["views"] == "auto":
        views = auto_views(dataset, names)
    else:
        views = parse_views(m["views"])
        names = list(views)
    seed = cfg["seed"] if m["init_seed"] is None else m["init_seed"]
    pyr = PyramidSpec(int(m["intervals_per_octave"]), int(m["min_dim"]))
    return build_model([(n, views[n]) for n in names], pyramid=pyr, seed=seed,
                       radius=m["radius"], w_def=tuple(m["w_def"]), box_mode=m["box_mode"],
                       input_mean=float(m["input_mean"]))


def cmd_train(args, cfg):
    import math

    import numpy as np

    from .model import ModelVersionError
    from .trainer import TrainConfig, TrainState, fit, load_checkpoint, save_checkpoint, write_metrics

    try:
        tcfg = TrainConfig.from_dict(cfg["train"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid train config: {exc}")
    dataset = _load_manifest_dataset(args.data)
    val = _load_manifest_dataset(args.val) if args.val else None
    if args.resume:
        try:
            state, saved_cfg = load_checkpoint(args.out)
        except OSError as exc:
            raise DataError(f"cannot read checkpoint {args.out}: {exc.strerror}")
        except ModelVersionError as exc:
            raise DataError(f"refusing checkpoint {args.out}: {exc}")
        except ValueError as exc:
            raise DataError(f"checkpoint {args.out}: {exc}")
        if saved_cfg is not None:
            tcfg = saved_cfg
            cfg["train"] = tcfg.to_dict()
    else:
        state = TrainState(_build_model(cfg, dataset))
    _echo(cfg)
    rows = list(state.history)

    def on_epoch(row):
        rows.append(row)
        print("epoch %d L=%.6f C(A)=%.6f C(A')=%.6f AP=%.6f" % row, flush=True)
        if args.metrics:
            write_metrics(args.metrics, rows)

    try:
        state, _ = fit(dataset, state.model, tcfg, validation=val, checkpoint_path=args.out,
                       state=state, metrics_cb=on_epoch)
    except OSError as exc:
        raise DataError(f"cannot write {args.out}: {exc.strerror}")
    if args.metrics:
        write_metrics(args.metrics, rows)
    params = state.model.named_arrays().values()
    if not all(np.all(np.isfinite(a)) for a in params):
        raise NumericError("training produced non-finite parameters")
    if rows and not all(math.isfinite(r[1]) for r in rows):
        log.warning("some epochs had no finite loss")
    save_checkpoint(args.out, state, tcfg)
    print(f"saved model to {args.out}")


def _detect_one(payload):
    from .nms import OverlapPolicy
    from .pipeline import detect

    model, image, image_id, floor, policy = payload
    a = detect(model, image.astype("float64") / 255.0, OverlapPolicy(**policy), floor)
    names = {c.label: c.name for c in model.classes}
    return [(image_id, names[int(l)], float(s), tuple(float(v) for v in b))
            for b, l, s in zip(a.boxes, a.labels, a.scores)]


def _image_sources(paths):
    """Expand manifests; yields (image_id, path)."""
    from .data import image_id_from_path, read_manifest

    for path in paths:
        if path.endswith(".txt"):
            try:
                entries, _ = read_manifest(path)
            except OSError as exc:
                raise DataError(f"cannot read manifest {path}: {exc.strerror}")
            except ValueError as exc:
                raise DataError(str(exc))
            for e in entries:
                yield e.annotation.image_id, e.path
        else:
            yield image_id_from_path(path), path


def cmd_detect(args, cfg):
    from .data import read_raster
    from .model import ModelVersionError, load
    from .nms import write_detections

    try:
        model, _ = load(args.model)
    except OSError as exc:
        raise DataError(f"cannot read model {args.model}: {exc.strerror}")
    except ModelVersionError as exc:
        raise DataError(f"refusing model {args.model}: {exc}")
    except ValueError as exc:
        raise DataError(f"model {args.model}: {exc}")
    _echo(cfg)
    policy = cfg["train"]["policy"]
    floor = cfg["detect"]["floor"]
    jobs, failed = [], []
    for image_id, path in _image_sources(args.images):
        try:
            img = read_raster(path)
        except (OSError, ValueError) as exc:
            log.error("skipping unreadable image %s: %s", path, exc)
            failed.append(path)
            continue
        if img.shape[0] != model.featnet_spec.in_channels:
            img = img.mean(axis=0, keepdims=True).round().astype("uint8")
        jobs.append((model, img, image_id, floor, policy))
    if cfg["workers"] > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(cfg["workers"]) as pool:
            results = list(pool.map(_detect_one, jobs))
    else:
        results = [_detect_one(j) for j in jobs]
    records = [r for rs in results for r in rs]
    try:
        write_detections(args.out, records)
    except OSError as exc:
        raise DataError(f"cannot write {args.out}: {exc.strerror}")
    print(f"wrote {len(records)} detections for {len(jobs)} images to {args.out}")
    if failed:
        raise DataError(f"{len(failed)} image(s) could not be read")


def cmd_eval(args, cfg):
    from .evaluation import evaluate
    from .nms import read_detections

    _echo(cfg)
    dataset_entries = _manifest_entries(args.manifest)
    try:
        dets = read_detections(args.detections)
    except OSError as exc:
        raise DataError(f"cannot read detections {args.detections}: {exc.strerror}")
    except ValueError as exc:
        raise DataError(str(exc))
    annotations = [e.annotation for e in dataset_entries]
    names = sorted({n for a in annotations for n in a.labels} | {d[1] for d in dets})
    report = evaluate(dets, annotations, args.iou, names)
    text = "\n".join(report.lines())
    print(text)
    if args.out:
        try:
            with open(args.out, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        except OSError as exc:
            raise DataError(f"cannot write {args.out}: {exc.strerror}")


def _manifest_entries(path):
    from .data import read_manifest

    try:
        entries, _ = read_manifest(path)
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc.strerror}")
    except ValueError as exc:
        raise DataError(str(exc))
    return entries


DET_COLOR = (255, 0, 0)
GT_COLOR = (0, 0, 255)


def box_pixels(box, width, height):
    """Inclusive pixel rectangle covered by a continuous box, clipped.

    Pixel k spans [k, k+1), so edge x1 lands on pixel floor(x1) and edge x2
    on pixel ceil(x2) - 1.  Returns None when nothing is visible.
    """
    import math

    x1, y1, x2, y2 = box
    c0, r0 = math.floor(x1), math.floor(y1)
    c1, r1 = math.ceil(x2) - 1, math.ceil(y2) - 1
    if c1 < c0:
        c1 = c0
    if r1 < r0:
        r1 = r0
    if c1 < 0 or r1 < 0 or c0 >= width or r0 >= height:
        return None
    return max(c0, 0), max(r0, 0), min(c1, width - 1), min(r1, height - 1), (c0, r0, c1, r1)


def draw_box(rgb, box, color):
    """Rectangle outline on an [H, W, 3] uint8 image; edges outside are dropped."""
    height, width = rgb.shape[:2]
    clip = box_pixels(box, width, height)
    if clip is None:
        return
    c0, r0, c1, r1, (uc0, ur0, uc1, ur1) = clip
    if ur0 >= 0:
        rgb[ur0, c0:c1 + 1] = color
    if ur1 < height:
        rgb[ur1, c0:c1 + 1] = color
    if uc0 >= 0:
        rgb[r0:r1 + 1, uc0] = color
    if uc1 < width:
        rgb[r0:r1 + 1, uc1] = color


def render(image, detections=(), gt_boxes=(), min_score=None):
    """Grey or RGB [C, H, W] uint8 -> RGB [3, H, W] with boxes drawn.

    Detections are drawn first and ground truth last, so ground truth stays
    visible where they coincide.
    """
    import numpy as np

    img = np.asarray(image, dtype=np.uint8)
    rgb = np.repeat(img, 3, axis=0) if img.shape[0] == 1 else img.copy()
    rgb = np.ascontiguousarray(rgb.transpose(1, 2, 0))
    for score, box in detections:
        if min_score is None or score >= min_score:
            draw_box(rgb, box, DET_COLOR)
    for box in gt_boxes:
        draw_box(rgb, box, GT_COLOR)
    return rgb.transpose(2, 0, 1)


def cmd_render(args, cfg):
    from .data import image_id_from_path, read_raster, write_raster
    from .nms import read_detections

    _echo(cfg)
    try:
        img = read_raster(args.image)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {args.image}: {exc}")
    image_id = image_id_from_path(args.image)
    dets = []
    if args.detections:
        try:
            dets = [(s, b) for i, _, s, b in read_detections(args.detections) if i == image_id]
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read detections {args.detections}: {exc}")
    gt = []
    if args.manifest:
        for e in _manifest_entries(args.manifest):
            if e.annotation.image_id == image_id:
                gt = [tuple(b) for b in e.annotation.boxes]
    out = render(img, dets, gt, args.min_score)
    try:
        write_raster(args.out, out)
    except OSError as exc:
        raise DataError(f"cannot write {args.out}: {exc.strerror}")
    print(f"drew {len(dets)} detections and {len(gt)} ground-truth boxes to {args.out}")


def cmd_gradcheck(args, cfg):
    from .gradcheck import ALL_CHECKS, run

    _echo(cfg)
    for op in (args.ops or []) + ([args.inject_fault] if args.inject_fault else []):
        if op not in ALL_CHECKS:
            raise UsageError(f"unknown op {op!r}; known: {', '.join(ALL_CHECKS)}")
    report = run(seed=cfg["seed"], n_seeds=args.seeds, ops=args.ops, fault=args.inject_fault)
    print("\n".join(report.lines()))
    if not report.passed:
        raise NumericError("gradient check failed for: " + ", ".join(report.failing()))


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "detect": cmd_detect, "eval": cmd_eval,
            "render": cmd_render, "gradcheck": cmd_gradcheck}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits on --help (0) and on usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.deterministic:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = "1"
    try:
        cfg = effective_config(args)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"convdpm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"convdpm: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"convdpm: error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
