import filecmp
import json
import os
import subprocess
import sys

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from convdpm import cli
from convdpm import model as modelio
from convdpm.data import load_dataset, read_manifest, read_raster, write_raster
from convdpm.evaluation import evaluate
from convdpm.nms import AssignmentSet, read_detections, suppression_violations

FAST = ["--set", "train.pretrain.negatives=100", "--set", "train.pretrain.iterations=20",
        "--set", "train.joint.epochs_phase1=1", "--set", "train.joint.epochs_phase2=1"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(
        same_tree(os.path.join(a, d), os.path.join(b, d)) for d in cmp.common_dirs)


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert run("gen", "--out", root / "train", "-n", 6, "--seed", 3) == 0
    assert run("gen", "--out", root / "test", "-n", 3, "--seed", 4, "--prefix", "t") == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset_dir):
    path = dataset_dir / "model.cdp"
    assert run("train", "--data", dataset_dir / "train" / "manifest.txt", "--out", path,
               "--deterministic", *FAST) == 0
    return path


class TestGen:
    def test_byte_identical(self, tmp_path):
        assert run("gen", "--out", tmp_path / "a", "-n", 4, "--seed", 1) == 0
        assert run("gen", "--out", tmp_path / "b", "-n", 4, "--seed", 1) == 0
        assert same_tree(tmp_path / "a", tmp_path / "b")

    def test_missing_spec_names_path(self, tmp_path, capsys):
        missing = tmp_path / "nope.json"
        assert run("gen", "--spec", missing, "--out", tmp_path / "x") == 2
        assert str(missing) in capsys.readouterr().err

    def test_spec_file_used(self, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"image_size": [48, 56], "seed": 4}))
        assert run("gen", "--spec", spec, "--out", tmp_path / "d", "-n", 2) == 0
        _, size = read_manifest(tmp_path / "d" / "manifest.txt")
        assert size == (56, 48)

    def test_manifest_round_trip(self, dataset_dir):
        ds = load_dataset(dataset_dir / "train" / "manifest.txt")
        assert len(ds) == 6
        from convdpm.data import SceneSpec, generate

        ref = generate(SceneSpec(seed=3), 6)
        for a, b in zip(ds.annotations, ref.annotations):
            assert a.labels == b.labels
            assert_array_equal(a.boxes, b.boxes)
        for a, b in zip(ds.images, ref.images):
            assert_array_equal(a, b)

    def test_unwritable(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert run("gen", "--out", blocker / "sub", "-n", 1) == 2
        assert "cannot write" in capsys.readouterr().err


class TestConfig:
    def test_unknown_override(self, tmp_path, capsys):
        assert run("gen", "--out", tmp_path, "--set", "train.joint.bogus=1") == 1
        assert "bogus" in capsys.readouterr().err

    def test_malformed_override(self, tmp_path):
        assert run("gen", "--out", tmp_path, "--set", "seed") == 1

    def test_bad_arguments(self):
        assert run("train") == 1
        assert run("frobnicate") == 1

    def test_precedence_and_echo(self, tmp_path, capsys):
        conf = tmp_path / "c.json"
        conf.write_text(json.dumps({"seed": 5, "scene": {"n_images": 2, "prefix": "f"}}))
        assert run("gen", "--out", tmp_path / "d", "--config", conf, "--set", "scene.n_images=3",
                   "-n", 1) == 0
        out = capsys.readouterr().out
        echoed = json.loads(out.splitlines()[0][len("config "):])
        assert echoed["seed"] == 5 and echoed["scene"] == {"n_images": 1, "prefix": "f"}
        assert len(read_manifest(tmp_path / "d" / "manifest.txt")[0]) == 1

    def test_unknown_file_key(self, tmp_path):
        conf = tmp_path / "c.json"
        conf.write_text(json.dumps({"model": {"colour": 1}}))
        assert run("gen", "--out", tmp_path / "d", "--config", conf) == 1

    def test_workers_env(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv(cli.WORKERS_ENV, "3")
        run("gen", "--out", tmp_path / "d", "-n", 1)
        assert json.loads(capsys.readouterr().out.splitlines()[0][7:])["workers"] == 3
        run("gen", "--out", tmp_path / "d", "-n", 1, "--deterministic")
        assert json.loads(capsys.readouterr().out.splitlines()[0][7:])["workers"] == 1

    def test_parse_views(self):
        assert cli.parse_views("A:4x4,3x6;B:2x2") == {"A": [(4, 4), (3, 6)], "B": [(2, 2)]}
        with pytest.raises(cli.UsageError):
            cli.parse_views("A4x4")


class TestTrain:
    def test_zero_lr_keeps_initialisation(self, dataset_dir, tmp_path):
        out = tmp_path / "m.cdp"
        manifest = dataset_dir / "train" / "manifest.txt"
        assert run("train", "--data", manifest, "--out", out, "--lr", 0, "--seed", 2, *FAST) == 0
        trained, _ = modelio.load(out)
        args = cli.build_parser().parse_args(["train", "--data", str(manifest), "--out", "x",
                                              "--seed", "2"])
        init = cli._build_model(cli.effective_config(args), load_dataset(manifest))
        a, b = trained.named_arrays(), init.named_arrays()
        assert list(a) == list(b)
        for k in a:
            assert a[k].tobytes() == b[k].tobytes(), k

    def test_metrics_rows_and_resume(self, dataset_dir, tmp_path):
        out, metrics = tmp_path / "m.cdp", tmp_path / "metrics.tsv"
        manifest = dataset_dir / "train" / "manifest.txt"
        val = dataset_dir / "test" / "manifest.txt"
        assert run("train", "--data", manifest, "--val", val, "--out", out, "--metrics", metrics,
                   "--set", "train.joint.epochs_phase2=0", *FAST[:-2]) == 0
        assert len(metrics.read_text().splitlines()) == 1 + 1
        assert run("train", "--data", manifest, "--out", out, "--metrics", metrics, "--resume") == 0
        # the stored config has one epoch in total, so resuming adds none
        assert len(metrics.read_text().splitlines()) == 2

    def test_flags_reach_config(self, dataset_dir, tmp_path, capsys):
        manifest = dataset_dir / "train" / "manifest.txt"
        assert run("train", "--data", manifest, "--out", tmp_path / "m.cdp", "--skip-pretrain",
                   "--freeze-featnet", "--window-loss", *FAST) == 0
        cfg = json.loads(capsys.readouterr().out.splitlines()[0][7:])
        t = cfg["train"]
        assert t["skip_pretrain"] and not t["train_featnet"] and t["loss"] == "window"

    def test_incompatible_checkpoint(self, dataset_dir, trained, tmp_path, capsys):
        bad = tmp_path / "old.cdp"
        data = bytearray(trained.read_bytes())
        data[8:12] = (7).to_bytes(4, "little")
        bad.write_bytes(bytes(data))
        assert run("train", "--data", dataset_dir / "train" / "manifest.txt", "--out", bad,
                   "--resume") == 2
        assert "version 7" in capsys.readouterr().err

    def test_missing_manifest(self, tmp_path, capsys):
        assert run("train", "--data", tmp_path / "none.txt", "--out", tmp_path / "m") == 2


class TestDetect:
    def test_repeatable_and_valid(self, dataset_dir, trained, tmp_path):
        manifest = dataset_dir / "test" / "manifest.txt"
        a, b = tmp_path / "a.txt", tmp_path / "b.txt"
        assert run("detect", "--model", trained, "--images", manifest, "--out", a) == 0
        assert run("detect", "--model", trained, "--images", manifest, "--out", b) == 0
        assert a.read_bytes() == b.read_bytes()
        recs = read_detections(a)
        assert recs
        model, _ = modelio.load(trained)
        label = {c.name: c.label for c in model.classes}
        for image_id in {r[0] for r in recs}:
            rs = [r for r in recs if r[0] == image_id]
            s = AssignmentSet([r[3] for r in rs], [label[r[1]] for r in rs], [r[2] for r in rs])
            assert suppression_violations(s) == []

    def test_workers_match_serial(self, dataset_dir, trained, tmp_path):
        manifest = dataset_dir / "test" / "manifest.txt"
        a, b = tmp_path / "a.txt", tmp_path / "b.txt"
        assert run("detect", "--model", trained, "--images", manifest, "--out", a) == 0
        assert run("detect", "--model", trained, "--images", manifest, "--out", b, "--workers", 2) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_empty_list(self, trained, tmp_path):
        out = tmp_path / "d.txt"
        assert run("detect", "--model", trained, "--out", out) == 0
        assert out.read_text() == ""

    def test_unreadable_image(self, dataset_dir, trained, tmp_path, capsys):
        bad = tmp_path / "bad.pgm"
        bad.write_bytes(b"garbage")
        good = dataset_dir / "test" / "images" / "t00000.pgm"
        out = tmp_path / "d.txt"
        assert run("detect", "--model", trained, "--images", bad, good, "--out", out) == 2
        assert "could not be read" in capsys.readouterr().err
        assert {r[0] for r in read_detections(out)} <= {"t00000"}

    def test_missing_model(self, tmp_path):
        assert run("detect", "--model", tmp_path / "none", "--out", tmp_path / "d") == 2


class TestEval:
    def _perfect(self, dataset_dir, path):
        entries, _ = read_manifest(dataset_dir / "test" / "manifest.txt")
        with open(path, "w") as fh:
            for e in entries:
                for n, b in zip(e.annotation.labels, e.annotation.boxes):
                    fh.write(f"{e.annotation.image_id} {n} 1.0 {b[0]} {b[1]} {b[2]} {b[3]}\n")

    def test_perfect(self, dataset_dir, tmp_path, capsys):
        det = tmp_path / "d.txt"
        self._perfect(dataset_dir, det)
        assert run("eval", "--detections", det, "--manifest", dataset_dir / "test" / "manifest.txt") == 0
        assert "mAP 1.000000" in capsys.readouterr().out

    def test_empty(self, dataset_dir, tmp_path, capsys):
        det = tmp_path / "d.txt"
        det.write_text("")
        assert run("eval", "--detections", det, "--manifest", dataset_dir / "test" / "manifest.txt") == 0
        assert "mAP 0.000000" in capsys.readouterr().out

    def test_matches_library(self, dataset_dir, trained, tmp_path, capsys):
        manifest = dataset_dir / "test" / "manifest.txt"
        det, rep = tmp_path / "d.txt", tmp_path / "r.txt"
        run("detect", "--model", trained, "--images", manifest, "--out", det)
        assert run("eval", "--detections", det, "--manifest", manifest, "--out", rep) == 0
        entries, _ = read_manifest(manifest)
        direct = evaluate(read_detections(det), [e.annotation for e in entries])
        assert rep.read_text().splitlines() == direct.lines()


class TestRender:
    def test_no_detections_draws_ground_truth(self, tmp_path):
        img = np.full((1, 12, 14), 100, dtype=np.uint8)
        out = cli.render(img, [], [(2.0, 3.0, 6.0, 8.0)])
        want = np.repeat(img, 3, axis=0)
        # edges at x 2..5, y 3..7 inclusive
        for c, v in enumerate(cli.GT_COLOR):
            want[c, 3, 2:6] = v
            want[c, 7, 2:6] = v
            want[c, 3:8, 2] = v
            want[c, 3:8, 5] = v
        assert_array_equal(out, want)

    def test_integer_coordinates(self):
        img = np.zeros((1, 10, 10), dtype=np.uint8)
        out = cli.render(img, [(1.0, (1.0, 2.0, 5.0, 7.0))], [])
        red = np.all(out.transpose(1, 2, 0) == cli.DET_COLOR, axis=-1)
        rows, cols = np.nonzero(red)
        assert (rows.min(), rows.max(), cols.min(), cols.max()) == (2, 6, 1, 4)

    def test_out_of_bounds_clipped_not_wrapped(self):
        img = np.zeros((1, 10, 10), dtype=np.uint8)
        out = cli.render(img, [(1.0, (-5.0, 6.0, 4.0, 20.0))], [])
        red = np.all(out.transpose(1, 2, 0) == cli.DET_COLOR, axis=-1)
        rows, cols = np.nonzero(red)
        # left and bottom edges fall outside and are dropped
        assert set(cols.tolist()) <= set(range(0, 4))
        assert rows.min() == 6 and not red[:6].any()
        assert red[6, 0:4].all() and red[6:, 3].all()
        assert not red[:, 9].any() and not red[0].any()

    def test_min_score(self):
        img = np.zeros((1, 10, 10), dtype=np.uint8)
        out = cli.render(img, [(0.1, (1.0, 1.0, 4.0, 4.0))], [], min_score=0.5)
        assert not np.any(out)

    def test_command(self, dataset_dir, tmp_path):
        image = dataset_dir / "test" / "images" / "t00000.pgm"
        out = tmp_path / "r.ppm"
        assert run("render", "--image", image, "--manifest", dataset_dir / "test" / "manifest.txt",
                   "--out", out) == 0
        rgb = read_raster(out)
        assert rgb.shape[0] == 3
        blue = np.all(rgb.transpose(1, 2, 0) == cli.GT_COLOR, axis=-1)
        assert blue.any()


class TestGradcheck:
    def test_pass(self, capsys):
        assert run("gradcheck", "--seeds", 2, "--ops", "relu", "deform") == 0
        out = capsys.readouterr().out
        assert "PASS relu" in out and "PASS deform" in out and "max_rel_err=" in out

    def test_injected_fault(self, capsys):
        assert run("gradcheck", "--seeds", 2, "--ops", "deform", "relu", "--inject-fault", "deform") == 3
        captured = capsys.readouterr()
        assert "FAIL deform" in captured.out and "deform" in captured.err

    def test_unknown_op(self):
        assert run("gradcheck", "--ops", "nope") == 1


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "convdpm", "gradcheck", "--seeds", "1", "--ops", "relu"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    proc = subprocess.run([sys.executable, "-m", "convdpm", "gen"], capture_output=True, text=True)
    assert proc.returncode == 1
