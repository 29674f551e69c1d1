import csv
import subprocess
import sys

import numpy as np
import pytest

from fusiondet import caf_blocks as cb
from fusiondet import cli, models
from fusiondet import detect_toy as dt
from fusiondet import io_formats as fio
from fusiondet import metrics_eval as me
from fixtures import eval_case, to_boxes
from oracles import brute_force_evaluate


def run(*args):
    return cli.main([str(a) for a in args])


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def key_values(text):
    return dict(l.split("=", 1) for l in text.splitlines() if "=" in l and not l.startswith("#"))


TINY = ("--steps", 3, "--patience", 0, "--val-images", 2)


class TestUsage:
    def test_help(self, capsys):
        assert run("--help") == 0
        assert "gen-data" in capsys.readouterr().out

    @pytest.mark.parametrize("argv", [[], ["train"], ["train", "--out", "x", "--bogus"],
                                      ["train", "--out", "x", "--lr", "-1"], ["bench", "--shapes", "4x4"],
                                      ["gen-data", "--out", "x", "--count", "-2"]])
    def test_usage_errors_exit_1(self, argv, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert cli.main(argv) == 1
        assert list(tmp_path.iterdir()) == []

    def test_flags_validated_before_files_are_touched(self, tmp_path):
        assert run("gen-data", "--out", tmp_path / "ds", "--height", 60) == 1
        assert run("train", "--out", tmp_path / "m.cafc", "--max-objects", 0, "--min-objects", 2) == 1
        assert list(tmp_path.iterdir()) == []

    def test_module_entry_point(self):
        out = subprocess.run([sys.executable, "-m", "fusiondet", "--version"], capture_output=True, text=True)
        assert out.returncode == 0 and "fusiondet" in out.stdout


class TestGenData:
    def test_deterministic(self, tmp_path):
        assert run("gen-data", "--out", tmp_path / "a", "--count", 10, "--seed", 7) == 0
        assert run("gen-data", "--out", tmp_path / "b", "--count", 10, "--seed", 7) == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
        run("gen-data", "--out", tmp_path / "c", "--count", 10, "--seed", 8)
        assert tree_bytes(tmp_path / "a") != tree_bytes(tmp_path / "c")

    def test_empty(self, tmp_path, capsys):
        assert run("gen-data", "--out", tmp_path / "e", "--count", 0) == 0
        manifest, images, gts = fio.read_dataset(tmp_path / "e")
        assert manifest["count"] == 0 and images == [] and gts == {}
        assert "wrote 0 images" in capsys.readouterr().out

    def test_contents_match_generator(self, tmp_path):
        run("gen-data", "--out", tmp_path / "d", "--count", 3, "--seed", 2, "--split", "val")
        _, images, gts = fio.read_dataset(tmp_path / "d")
        cfg = dt.SceneConfig(seed=2)
        for k, (image_id, img) in enumerate(images):
            ref_img, ref_gts = dt.gen_scene(cfg, dt.VAL_OFFSET + k)
            assert image_id == f"img{dt.VAL_OFFSET + k}"
            assert img.tobytes() == ref_img.tobytes()
            assert gts.get(image_id, []) == ref_gts


class TestTrain:
    def test_zero_steps_is_initialization(self, tmp_path):
        assert run("train", "--out", tmp_path / "m.cafc", "--steps", 0, "--seed", 4) == 0
        _, tensors = fio.read_checkpoint(tmp_path / "m.cafc")
        init = fio.params_to_tensors(dt.init_detector(seed=4))
        assert list(tensors) == list(init)
        assert all(tensors[k].tobytes() == init[k].tobytes() for k in init)

    def test_same_flags_same_csv(self, tmp_path):
        for name in "ab":
            assert run("train", "--out", tmp_path / f"{name}.cafc", *TINY) == 0
        a = (tmp_path / "a.cafc.loss.csv").read_bytes()
        assert a == (tmp_path / "b.cafc.loss.csv").read_bytes()
        assert a.startswith(b"step,loss\n1,")
        assert (tmp_path / "a.cafc").read_bytes() == (tmp_path / "b.cafc").read_bytes()

    def test_trivial_scene_converges(self, tmp_path):
        assert run("train", "--out", tmp_path / "m.cafc", "--scene", "trivial", "--steps", 500, "--patience", 0) == 0
        with open(tmp_path / "m.cafc.loss.csv") as fh:
            losses = [float(r["loss"]) for r in csv.DictReader(fh)]
        assert len(losses) == 500
        assert losses[-1] < 0.1 * losses[0]

    def test_resume_matches_uninterrupted(self, tmp_path):
        run("train", "--out", tmp_path / "full.cafc", "--steps", 4, "--patience", 0)
        run("train", "--out", tmp_path / "half.cafc", "--steps", 2, "--patience", 0)
        assert run("train", "--out", tmp_path / "rest.cafc", "--steps", 2, "--patience", 0,
                   "--resume", tmp_path / "half.cafc") == 0
        full = (tmp_path / "full.cafc.loss.csv").read_text().splitlines()
        half = (tmp_path / "half.cafc.loss.csv").read_text().splitlines()
        rest = (tmp_path / "rest.cafc.loss.csv").read_text().splitlines()
        assert full == half + rest[1:]
        _, a = fio.read_checkpoint(tmp_path / "full.cafc")
        _, b = fio.read_checkpoint(tmp_path / "rest.cafc")
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_ablation_flag(self, tmp_path):
        run("train", "--out", tmp_path / "m.cafc", "--steps", 0, "--no-caf-block")
        cfg, p = models.load(tmp_path / "m.cafc")
        assert cfg["use_caf_block"] is False and p.caf == []

    def test_config_echo(self, tmp_path):
        run("train", "--out", tmp_path / "m.cafc", "--steps", 0, "--n1", 1, "--n2", 4, "--hidden", 64)
        cfg, p = models.load(tmp_path / "m.cafc")
        assert cfg["dilations"] == [1, 4] and cfg["hidden"] == 64
        assert cfg["widths"] == [8, 16, 32] and cfg["shuffle_groups"] == 4 and cfg["seed"] == 0
        assert p.caf[0].msnn.dilations == (1, 4)

    def test_hidden_below_width_is_usage_error(self, tmp_path):
        assert run("train", "--out", tmp_path / "m.cafc", "--hidden", 16) == 1
        assert list(tmp_path.iterdir()) == []

    def test_divergence_exit_3_without_output(self, tmp_path):
        code = run("train", "--out", tmp_path / "m.cafc", "--steps", 50, "--lr", 1e6, "--patience", 0, "--clip-norm", 0)
        assert code == 3
        assert not (tmp_path / "m.cafc").exists()


class TestEval:
    def write_pair(self, tmp_path, dets, gts):
        fio.write_detections(tmp_path / "d.csv", [(i, b) for i, bs in dets.items() for b in bs], "det")
        fio.write_detections(tmp_path / "g.csv", [(i, b) for i, bs in gts.items() for b in bs], "gt")

    def test_perfect(self, tmp_path, capsys):
        gts = {"a": [me.DetBox(0, 0, 5, 5, 0), me.DetBox(9, 9, 20, 20, 1)]}
        self.write_pair(tmp_path, gts, gts)
        assert run("eval", "--dets", tmp_path / "d.csv", "--gts", tmp_path / "g.csv", "--out", tmp_path / "r.txt") == 0
        kv = key_values(capsys.readouterr().out)
        assert [float(kv[k]) for k in ("mAP50", "mAP50_95", "recall", "precision")] == [1.0] * 4
        assert (tmp_path / "r.txt").read_text().startswith("# detection evaluation")

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_brute_force(self, tmp_path, capsys, seed):
        dets, gts = eval_case(seed)
        self.write_pair(tmp_path, to_boxes(dets), to_boxes(gts))
        assert run("eval", "--dets", tmp_path / "d.csv", "--gts", tmp_path / "g.csv", "--classes", "0,1,2") == 0
        kv = key_values(capsys.readouterr().out)
        ref = brute_force_evaluate(dets, gts, range(3), me.IOU_THRESHOLDS)
        for key, name in (("mAP50", "map50"), ("mAP50_95", "map50_95"), ("recall", "recall"),
                          ("precision", "precision")):
            assert float(kv[key]) == pytest.approx(ref[name], abs=1e-9)

    def test_missing_gt_file(self, tmp_path):
        fio.write_detections(tmp_path / "d.csv", [], "det")
        code = run("eval", "--dets", tmp_path / "d.csv", "--gts", tmp_path / "nope.csv", "--out", tmp_path / "r.txt")
        assert code == 2
        assert not (tmp_path / "r.txt").exists()

    def test_malformed_file(self, tmp_path, capsys):
        (tmp_path / "d.csv").write_text("a,0,0.5,0,0,1\nbad\n")
        fio.write_detections(tmp_path / "g.csv", [], "gt")
        assert run("eval", "--dets", tmp_path / "d.csv", "--gts", tmp_path / "g.csv") == 2
        assert "line 1" in capsys.readouterr().err

    def test_checkpoint_and_dataset(self, tmp_path, capsys):
        run("gen-data", "--out", tmp_path / "ds", "--count", 4, "--split", "val")
        run("train", "--out", tmp_path / "m.cafc", "--steps", 0)
        capsys.readouterr()
        assert run("eval", "--checkpoint", tmp_path / "m.cafc", "--data", tmp_path / "ds") == 0
        kv = key_values(capsys.readouterr().out)
        assert {"mAP50", "AP50.class2"} <= set(kv)

    def test_modes_are_exclusive(self, tmp_path):
        assert run("eval", "--dets", "a", "--checkpoint", "b") == 1
        assert run("eval", "--dets", "a") == 1


class TestGradcheck:
    def test_passes(self, capsys):
        assert run("gradcheck", "--ops", "conv2d,relu,caf_block", "--instances", 1) == 0
        out = capsys.readouterr().out
        assert "caf_block" in out and "failed=none" in out

    def test_tolerance_breach_exit_3(self, capsys):
        assert run("gradcheck", "--ops", "softmax_lastdim", "--instances", 1, "--tolerance", 1e-300) == 3
        assert "FAIL" in capsys.readouterr().out

    def test_unknown_op(self):
        assert run("gradcheck", "--ops", "nope") == 1


class TestBench:
    def test_csv_rows_and_counts(self, tmp_path):
        assert run("bench", "--shapes", "4x4x4,16x2x2", "--repeats", 3, "--out", tmp_path / "b.csv") == 0
        with open(tmp_path / "b.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 16
        assert len({(r["op"], r["c"], r["h"], r["w"]) for r in rows}) == 16
        assert all(float(r["median_s"]) > 0 and float(r["stdev_s"]) >= 0 for r in rows)
        macs = {(r["op"], int(r["c"])): int(r["attn_macs"]) for r in rows if r["attn_macs"]}
        assert macs[("attention_cxc", 4)] < macs[("attention_hwxhw", 4)]  # hw=16 > c=4
        assert macs[("attention_cxc", 16)] > macs[("attention_hwxhw", 16)]  # hw=4 < c=16

    def test_stdout(self, capsys):
        assert run("bench", "--shapes", "2x2x2", "--repeats", 1) == 0
        assert capsys.readouterr().out.startswith("op,n,c,h,w")


class TestForward:
    @pytest.fixture
    def ckpt(self, tmp_path):
        run("train", "--out", tmp_path / "m.cafc", "--steps", 0)
        return tmp_path / "m.cafc"

    def test_detector_shape_and_determinism(self, tmp_path, ckpt, rng):
        x = rng.standard_normal((2, 1, 64, 64)).astype(np.float32)
        fio.write_tensor(tmp_path / "x.caft", x)
        for name in ("y1", "y2"):
            assert run("forward", "--checkpoint", ckpt, "--input", tmp_path / "x.caft",
                       "--out", tmp_path / f"{name}.caft") == 0
        y = fio.read_tensor(tmp_path / "y1.caft")
        assert y.shape == (2, 8, 8, 8)
        assert (tmp_path / "y1.caft").read_bytes() == (tmp_path / "y2.caft").read_bytes()
        np.testing.assert_array_equal(y, dt.detector_forward(x, dt.init_detector()))

    def test_input_mismatch(self, tmp_path, ckpt):
        fio.write_tensor(tmp_path / "x.caft", np.zeros((1, 3, 64, 64), np.float32))
        assert run("forward", "--checkpoint", ckpt, "--input", tmp_path / "x.caft", "--out", tmp_path / "y.caft") == 2
        assert not (tmp_path / "y.caft").exists()

    def test_checkpoint_architecture_mismatch(self, tmp_path, rng):
        p = cb.init_caf_block(4, rng)
        cfg = models.block_config(p)
        cfg["width"] = 8
        models.save(tmp_path / "b.cafc", p, cfg)
        fio.write_tensor(tmp_path / "x.caft", np.zeros((1, 4, 5, 5), np.float32))
        assert run("forward", "--checkpoint", tmp_path / "b.cafc", "--input", tmp_path / "x.caft",
                   "--out", tmp_path / "y.caft") == 2

    def test_block_checkpoint(self, tmp_path, rng):
        p = cb.init_caf_block(4, rng, shuffle_groups=2)
        models.save(tmp_path / "b.cafc", p, models.block_config(p))
        x = rng.standard_normal((1, 4, 5, 6)).astype(np.float32)
        fio.write_tensor(tmp_path / "x.caft", x)
        assert run("forward", "--checkpoint", tmp_path / "b.cafc", "--input", tmp_path / "x.caft",
                   "--out", tmp_path / "y.caft") == 0
        np.testing.assert_array_equal(fio.read_tensor(tmp_path / "y.caft"), cb.caf_block_forward(x, p))
