import csv
import json
import shutil
import subprocess
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from opa3d.cli import ABLATIONS, load_augmentor, main, save_augmentor
from opa3d.augmentor import PointAugmentor
from opa3d.datakit import load_scene, load_split

TINY = """\
s = 64
pretrain.epochs = 4
pretrain.warmup = 2
pretrain.milestones = (3, 3, 3)
pretrain.batch_size = 2
ssl.epochs = 1
ssl.milestones = (1, 1, 1, 1)
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "data"), "--scenes", "10", "--val", "2",
                 "--seed", "3", "--ratio", "0.4"]) == 0
    (root / "tiny.cfg").write_text(TINY)
    return root


@pytest.fixture(scope="module")
def pretrained(workspace):
    out = workspace / "runs" / "pre"
    assert main(["pretrain", "--data", str(workspace / "data"), "--split", str(workspace / "data" / "split.json"),
                 "--config", str(workspace / "tiny.cfg"), "--out", str(out)]) == 0
    return out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestGenData:
    def test_files(self, workspace):
        data = workspace / "data"
        index = json.loads((data / "index.json").read_text())
        assert len(index["train"]) == 10 and len(index["val"]) == 2
        assert len(list(data.glob("train_*.json"))) == 10 and len(list(data.glob("val_*.json"))) == 2
        split = load_split(data / "split.json")
        assert len(split.labeled) == 4 and split.val == index["val"]

    def test_rerun_identical(self, workspace, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path / "d"), "--scenes", "10", "--val", "2",
                     "--seed", "3", "--ratio", "0.4"]) == 0
        for f in (workspace / "data").glob("*.json"):
            assert (tmp_path / "d" / f.name).read_bytes() == f.read_bytes(), f.name

    def test_zero_scenes(self, tmp_path, capsys):
        assert main(["gen-data", "--out", str(tmp_path), "--scenes", "0"]) == 2
        assert "--scenes" in capsys.readouterr().err


class TestPretrain:
    def test_outputs(self, pretrained):
        for name in ("detector.ckpt", "augmentor.ckpt", "metrics.csv", "manifest.json"):
            assert (pretrained / name).exists()
        man = json.loads((pretrained / "manifest.json").read_text())
        assert man["command"] == "pretrain" and man["end"] is not None and man["config"]["s"] == 64
        assert set(man) >= {"command", "config", "seed", "git", "start", "end", "outputs"}

    def test_warmup_in_metrics(self, pretrained):
        rows = read_csv(pretrained / "metrics.csv")
        assert list(rows[0]) == ["epoch", "L_D", "L_A", "rho_mean", "L_l", "L_u", "mAP@0.25", "mAP@0.5", "lr"]
        logged = [int(r["epoch"]) for r in rows if r["L_A"]]
        assert logged and min(logged) == 2
        assert rows[-1]["mAP@0.25"] != ""

    def test_lr_decay(self, pretrained):
        lrs = [float(r["lr"]) for r in read_csv(pretrained / "metrics.csv")]
        assert lrs[:3] == [0.001] * 3 and lrs[3] == pytest.approx(1e-6)

    def test_missing_split(self, workspace, tmp_path, capsys):
        code = main(["pretrain", "--data", str(workspace / "data"), "--split", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "o")])
        assert code == 2 and "split file not found" in capsys.readouterr().err

    def test_bad_config(self, workspace, tmp_path, capsys):
        (tmp_path / "bad.cfg").write_text("pick = 9\n")
        code = main(["pretrain", "--data", str(workspace / "data"), "--split",
                     str(workspace / "data" / "split.json"), "--config", str(tmp_path / "bad.cfg"),
                     "--out", str(tmp_path / "o")])
        assert code == 2 and "pick" in capsys.readouterr().err

    def test_ssl_only_flag_rejected(self, workspace, tmp_path):
        assert main(["pretrain", "--data", str(workspace / "data"), "--split",
                     str(workspace / "data" / "split.json"), "--out", str(tmp_path / "o"),
                     "--ablate", "no-labeled-aug"]) == 2


class TestSSLTrain:
    def args(self, workspace, pretrained, out, *extra):
        return ["ssl-train", "--data", str(workspace / "data"), "--split", str(workspace / "data" / "split.json"),
                "--pretrained", str(pretrained), "--config", str(workspace / "tiny.cfg"), "--out", str(out), *extra]

    def test_outputs(self, workspace, pretrained):
        out = workspace / "runs" / "ssl"
        assert main(self.args(workspace, pretrained, out)) == 0
        for name in ("student.ckpt", "teacher.ckpt", "metrics.csv", "manifest.json"):
            assert (out / name).exists()
        assert json.loads((out / "manifest.json").read_text())["ablation"] is None

    def test_unknown_ablation(self, workspace, pretrained, tmp_path, capsys):
        assert main(self.args(workspace, pretrained, tmp_path / "o", "--ablate", "bogus")) == 2
        err = capsys.readouterr().err
        assert all(flag in err for flag in ABLATIONS)

    def test_ablation_configs(self):
        # ablation rows: ID 1 turns every component off, ID 4 only the objectness term
        assert ABLATIONS["no-object-aug"] == {"use_augmentor": False, "aug_labeled": False, "aug_unlabeled": False}
        assert ABLATIONS["no-objectness-rho"] == {"objectness_rho": False}

    def test_pretrain_mismatch(self, workspace, pretrained, tmp_path, capsys):
        assert main(self.args(workspace, pretrained, tmp_path / "o", "--ablate", "no-object-aug")) == 2
        assert "use_augmentor" in capsys.readouterr().err

    def test_labeled_only_ablation(self, workspace, pretrained, tmp_path):
        assert main(self.args(workspace, pretrained, tmp_path / "o", "--ablate", "no-labeled-aug")) == 0
        man = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert man["ablation"] == "no-labeled-aug" and man["config"]["aug_labeled"] is False

    def test_missing_checkpoint(self, workspace, tmp_path):
        assert main(self.args(workspace, tmp_path, tmp_path / "o")) == 2


class TestEval:
    def test_json_csv_agree(self, workspace, pretrained, tmp_path):
        assert main(["eval", "--ckpt", str(pretrained / "detector.ckpt"), "--data", str(workspace / "data"),
                     "--split", str(workspace / "data" / "split.json"), "--out", str(tmp_path)]) == 0
        doc = json.loads((tmp_path / "eval.json").read_text())
        row = read_csv(tmp_path / "eval.csv")[0]
        assert float(row["mAP@0.25"]) == doc["mAP@0.25"] and float(row["mAP@0.5"]) == doc["mAP@0.5"]

    def test_deterministic(self, workspace, pretrained, tmp_path):
        for d in ("a", "b"):
            main(["eval", "--ckpt", str(pretrained / "detector.ckpt"), "--data", str(workspace / "data"),
                  "--split", str(workspace / "data" / "split.json"), "--out", str(tmp_path / d)])
        assert (tmp_path / "a" / "eval.json").read_bytes() == (tmp_path / "b" / "eval.json").read_bytes()

    def test_bad_checkpoint(self, workspace, tmp_path, capsys):
        (tmp_path / "bad.ckpt").write_text("{not json")
        code = main(["eval", "--ckpt", str(tmp_path / "bad.ckpt"), "--data", str(workspace / "data"),
                     "--split", str(workspace / "data" / "split.json")])
        assert code == 2 and "error:" in capsys.readouterr().err


class TestAugment:
    def scene_path(self, workspace):
        return workspace / "data" / "train_00000.json"

    def test_identity(self, workspace, tmp_path):
        save_augmentor(PointAugmentor(), tmp_path / "zero.ckpt")
        assert main(["augment", "--augmentor", str(tmp_path / "zero.ckpt"), "--scene",
                     str(self.scene_path(workspace)), "--out", str(tmp_path / "out.json")]) == 0
        src, out = load_scene(self.scene_path(workspace)), load_scene(tmp_path / "out.json")
        np.testing.assert_array_equal(out.points, src.points)

    def test_sidecar_bound(self, workspace, tmp_path):
        aug = PointAugmentor()
        rng = np.random.default_rng(0)
        for name, p in aug.named_parameters().items():
            if name.startswith("aug.3"):
                p.values = rng.normal(0, 3.0, p.shape)
        save_augmentor(aug, tmp_path / "a.ckpt")
        assert main(["augment", "--augmentor", str(tmp_path / "a.ckpt"), "--scene",
                     str(self.scene_path(workspace)), "--out", str(tmp_path / "o.json")]) == 0
        side = json.loads((tmp_path / "o.displacements.json").read_text())
        assert side["objects"]
        for obj in side["objects"]:
            assert max(obj["max_ratio"]) <= 0.10
            assert len(obj["point_indices"]) == len(obj["displacements"])
        load_scene(tmp_path / "o.json")  # validates schema

    def test_seed_env(self, workspace, tmp_path, monkeypatch):
        shutil.copy(self.scene_path(workspace), tmp_path / "s.json")
        save_augmentor(PointAugmentor(), tmp_path / "a.ckpt")
        monkeypatch.setenv("OPA_SEED", "41")
        main(["augment", "--augmentor", str(tmp_path / "a.ckpt"), "--scene", str(tmp_path / "s.json"),
              "--out", str(tmp_path / "o.json")])
        assert json.loads((tmp_path / "o.displacements.json").read_text())["seed"] == 41

    def test_augmentor_roundtrip(self, tmp_path):
        aug = PointAugmentor(hidden=(8, 16, 8), seed=3)
        save_augmentor(aug, tmp_path / "a.ckpt")
        back = load_augmentor(tmp_path / "a.ckpt")
        assert back.hidden == (8, 16, 8)


class TestReport:
    def test_table_and_histograms(self, workspace, pretrained, tmp_path, capsys):
        out = tmp_path / "rep"
        assert main(["report", "--runs", str(workspace / "runs"), "--out", str(out), "--histograms",
                     "--data", str(workspace / "data"), "--scenes", "3"]) == 0
        assert "mAP@0.25" in capsys.readouterr().out
        assert (out / "summary.md").exists() and (out / "summary.csv").exists()
        for axis in "xyz":
            ET.parse(out / "histograms" / "pre" / f"hist_{axis}.svg")
        ET.parse(out / "curve_L_D.svg")

    def test_empty_runs(self, tmp_path, capsys):
        (tmp_path / "runs").mkdir()
        assert main(["report", "--runs", str(tmp_path / "runs"), "--out", str(tmp_path / "o")]) == 2
        assert "no runs" in capsys.readouterr().err


def test_console_script(tmp_path):
    exe = shutil.which("opa3d")
    if exe is None:
        pytest.skip("package not installed")
    res = subprocess.run([exe, "gen-data", "--out", str(tmp_path), "--scenes", "0"], capture_output=True, text=True)
    assert res.returncode == 2 and "error:" in res.stderr
