import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from hypercd import cli, hsdata

TINY = """\
[arch]
n = 1
[pretrain]
iterations = 8
milestones = 5,7
[finetune]
samples = 20
runs = 2
iterations = 6
milestones = 3,5
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.ini").write_text(TINY)
    assert run("synth", "--domains", 3, "--bands", "6,8,10", "--classes", "3,3,3", "--size", 24,
               "--seed", 1, "--out", root / "data") == 0
    assert run("pretrain", "--sources", root / "data/synth1.hsc", root / "data/synth2.hsc",
               "--config", root / "tiny.ini", "--deterministic", "--out", root / "pre") == 0
    assert run("train", "--regime", "self_sup", "--target", root / "data/synth0.hsc",
               "--pretrained", root / "pre/pretrained.hcp", "--config", root / "tiny.ini",
               "--deterministic", "--out", root / "train") == 0
    return root


class TestSynth:
    def test_outputs(self, ws):
        names = sorted(p.name for p in (ws / "data").iterdir())
        assert names == ["manifest.json", "synth0.hsc", "synth1.hsc", "synth2.hsc"]
        assert [hsdata.read_header(ws / f"data/synth{i}.hsc")[2] for i in range(3)] == [6, 8, 10]

    def test_rerun_identical(self, ws, tmp_path):
        assert run("synth", "--domains", 3, "--bands", "6,8,10", "--classes", "3,3,3", "--size", 24,
                   "--seed", 1, "--out", tmp_path) == 0
        assert manifest(tmp_path)["artifacts"] == manifest(ws / "data")["artifacts"]

    def test_list_length_mismatch(self, tmp_path, capsys):
        assert run("synth", "--domains", 3, "--bands", "6,8", "--classes", "3,3,3", "--out", tmp_path) == 2
        assert "comma-separated" in capsys.readouterr().err


class TestPretrainTrain:
    def test_pretrain_artifacts(self, ws):
        m = manifest(ws / "pre")
        assert set(m["artifacts"]) == {"pretrain_loss.csv", "pretrained.hcp"}
        assert len(m["inputs"]) == 2 and m["command"] == "pretrain"
        assert m["config"]["pretrain_iterations"] == 8 and m["config"]["p"] == 6
        rows = list(csv.DictReader(open(ws / "pre/pretrain_loss.csv")))
        assert len(rows) == 8
        assert [float(r["lr"]) for r in rows[4:7]] == [0.03, pytest.approx(0.003), pytest.approx(0.003)]

    def test_train_outputs(self, ws):
        m = manifest(ws / "train")
        assert set(m["artifacts"]) == {"aggregate.json", "metrics.csv", "self_sup_run0.hcp", "self_sup_run1.hcp"}
        rows = list(csv.DictReader(open(ws / "train/metrics.csv")))
        assert list(rows[0]) == ["run", "regime", "oa", "aa", "class_1", "class_2", "class_3"]
        agg = json.loads((ws / "train/aggregate.json").read_text())
        assert agg["runs"] == 2
        assert agg["mean_oa"] == pytest.approx(np.mean([float(r["oa"]) for r in rows]), abs=1e-12)
        assert len(m["seeds"]["splits"]) == 2

    def test_pretrained_wrong_regime(self, ws, tmp_path):
        assert run("train", "--regime", "scratch", "--target", ws / "data/synth0.hsc",
                   "--pretrained", ws / "pre/pretrained.hcp", "--out", tmp_path) == 2

    def test_trunk_mismatch(self, ws, tmp_path, capsys):
        code = run("train", "--regime", "self_sup", "--target", ws / "data/synth0.hsc",
                   "--pretrained", ws / "pre/pretrained.hcp", "--n", 3, "--out", tmp_path)
        assert code == 4
        assert "hint:" in capsys.readouterr().err

    def test_missing_sources(self, ws, tmp_path):
        assert run("train", "--regime", "cd_scratch", "--target", ws / "data/synth0.hsc",
                   "--out", tmp_path) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_code(self, ws, tmp_path):
        cfg = tmp_path / "hot.ini"
        cfg.write_text(TINY + "lr = 1e12\nmax_grad_norm = none\n")
        code = run("train", "--regime", "scratch", "--target", ws / "data/synth0.hsc", "--config", cfg,
                   "--out", tmp_path / "o")
        assert code == 5


class TestEval:
    def test_reproduces_run_metrics(self, ws, tmp_path):
        assert run("eval", "--checkpoint", ws / "train/self_sup_run1.hcp", "--target", ws / "data/synth0.hsc",
                   "--run", 1, "--samples", 20, "--out", tmp_path) == 0
        rows = list(csv.DictReader(open(ws / "train/metrics.csv")))
        assert json.loads((tmp_path / "eval.json").read_text())["oa"] == float(rows[1]["oa"])

    def test_missing_checkpoint(self, ws, tmp_path, capsys):
        assert run("eval", "--checkpoint", tmp_path / "nope.hcp", "--target", ws / "data/synth0.hsc",
                   "--out", tmp_path / "o") == 3
        assert "hint:" in capsys.readouterr().err

    def test_pretrained_has_no_head(self, ws, tmp_path):
        assert run("eval", "--checkpoint", ws / "pre/pretrained.hcp", "--target", ws / "data/synth1.hsc",
                   "--out", tmp_path) == 4

    def test_band_mismatch(self, ws, tmp_path, capsys):
        code = run("eval", "--checkpoint", ws / "train/self_sup_run0.hcp", "--target", ws / "data/synth2.hsc",
                   "--domain", "synth0", "--all-labeled", "--out", tmp_path)
        assert code == 4
        assert "expects 6 bands" in capsys.readouterr().err


class TestSweep:
    def test_p_axis(self, ws, tmp_path, capsys):
        assert run("sweep", "--axis", "p", "--values", "2,3", "--regime", "self_sup",
                   "--target", ws / "data/synth0.hsc", "--sources", ws / "data/synth1.hsc", ws / "data/synth2.hsc",
                   "--config", ws / "tiny.ini", "--runs", 1, "--out", tmp_path) == 0
        rows = list(csv.DictReader(open(tmp_path / "sweep.csv")))
        assert [r["p"] for r in rows] == ["2", "3"]
        assert "OA" in capsys.readouterr().out

    def test_samples_axis(self, ws, tmp_path):
        assert run("sweep", "--axis", "samples", "--values", "10,20", "--regime", "scratch",
                   "--target", ws / "data/synth0.hsc", "--config", ws / "tiny.ini", "--runs", 1,
                   "--out", tmp_path) == 0
        assert [r["samples"] for r in csv.DictReader(open(tmp_path / "sweep.csv"))] == ["10", "20"]

    def test_bad_values(self, ws, tmp_path):
        assert run("sweep", "--axis", "p", "--values", "two", "--regime", "scratch",
                   "--target", ws / "data/synth0.hsc", "--out", tmp_path) == 2


class TestFlops:
    def test_indian_pines_dims(self, tmp_path, capsys):
        assert run("flops", "--arch", "modified", "--n", 5, "--dims", "145,145,200,16", "--out", tmp_path) == 0
        out = capsys.readouterr().out
        assert "trunk/res4b" in out and "total" in out
        total = [r for r in csv.reader(open(tmp_path / "flops.csv")) if r[0] == "total"][0]
        assert abs(int(total[1]) / 33.7e9 - 1) <= 0.10

    def test_image_header(self, ws, capsys):
        assert run("flops", "--arch", "original", "--image", ws / "data/synth0.hsc") == 0
        assert "enc/c1_5x5" in capsys.readouterr().out

    def test_errors(self, tmp_path):
        assert run("flops", "--dims", "1,2,3") == 2
        assert run("flops") == 2
        assert run("flops", "--image", tmp_path / "none.hsc") == 3


class TestConfig:
    def test_flag_beats_file(self, ws, tmp_path):
        assert run("flops", "--dims", "9,9,3,2", "--config", ws / "tiny.ini", "--n", 2, "--out", tmp_path) == 0
        assert manifest(tmp_path)["config"]["n"] == 2
        assert run("flops", "--dims", "9,9,3,2", "--config", ws / "tiny.ini", "--out", tmp_path / "b") == 0
        assert manifest(tmp_path / "b")["config"]["n"] == 1
        assert run("flops", "--dims", "9,9,3,2", "--out", tmp_path / "c") == 0
        assert manifest(tmp_path / "c")["config"]["n"] is None

    def test_unknown_key(self, tmp_path):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[finetune]\nlearning_rate = 0.1\n")
        assert run("flops", "--dims", "9,9,3,2", "--config", cfg) == 2

    def test_milestone_flags(self, ws, tmp_path, capsys):
        short = ("train", "--regime", "scratch", "--target", ws / "data/synth0.hsc", "--runs", 1,
                 "--samples", 10, "--finetune-iterations", 4)
        assert run(*short, "--out", tmp_path / "a") == 2
        assert "--finetune-milestones" in capsys.readouterr().err
        assert run(*short, "--finetune-milestones", "2,3", "--out", tmp_path / "b") == 0
        assert manifest(tmp_path / "b")["config"]["finetune_milestones"] == [2, 3]

    def test_missing_config(self, tmp_path):
        assert run("flops", "--dims", "9,9,3,2", "--config", tmp_path / "none.ini") == 3

    def test_bad_command_line(self):
        assert run("train", "--regime", "bogus") == 2
        assert run("--version") == 0


class TestReplay:
    def test_train_replays_identically(self, ws, tmp_path, capsys):
        assert run("replay", "--manifest", ws / "train/manifest.json", "--out", tmp_path) == 0
        assert "4 artifacts identical" in capsys.readouterr().out

    def test_detects_difference(self, ws, tmp_path):
        m = manifest(ws / "data")
        m["artifacts"]["synth0.hsc"] = "0" * 64
        (tmp_path / "manifest.json").write_text(json.dumps(m))
        assert run("replay", "--manifest", tmp_path / "manifest.json", "--out", tmp_path / "r") == 6


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "hypercd", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("hypercd")
