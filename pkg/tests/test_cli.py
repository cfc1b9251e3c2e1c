"""Command-line entry point: artifacts, exit codes and API equality."""

import csv
import json
import subprocess
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from cxrvit import data as D
from cxrvit import evaluation as E
from cxrvit import models as M
from cxrvit import saliency as S
from cxrvit import training as TR
from cxrvit.cli import main
from cxrvit.training import prepare


def run(*argv):
    return main([str(a) for a in argv])


def files(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert run("synth", "--n", 200, "--seed", 4, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def vit_run(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "vit"
    assert run("train", "--model", "vit-tiny", "--data", dataset, "--epochs", 3, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def cnn_run(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "cnn"
    assert run("train", "--model", "cnn-tiny", "--data", dataset, "--epochs", 3, "--lr", 3e-3, "--out", out) == 0
    return out


class TestSynth:
    def test_cardinality(self, dataset):
        lines = (dataset / "manifest.csv").read_text().splitlines()
        assert len(lines) == 201
        assert len(list(dataset.rglob("*.pgm"))) == 200

    def test_small(self, tmp_path):
        assert run("synth", "--n", 100, "--out", tmp_path / "d") == 0
        assert len((tmp_path / "d" / "manifest.csv").read_text().splitlines()) == 101
        recs = D.load_manifest(tmp_path / "d" / "manifest.csv")
        assert len(recs) == 100
        assert D.load_images(recs, tmp_path / "d").shape == (100, 32, 32)

    def test_identical_bytes(self, tmp_path):
        run("synth", "--n", 30, "--seed", 2, "--out", tmp_path / "a")
        run("synth", "--n", 30, "--seed", 2, "--out", tmp_path / "b")
        assert files(tmp_path / "a") == files(tmp_path / "b")

    def test_refuses_non_empty(self, tmp_path, capsys):
        (tmp_path / "x").mkdir()
        (tmp_path / "x" / "keep.txt").write_text("hi")
        assert run("synth", "--n", 5, "--out", tmp_path / "x") == 1
        assert "--force" in capsys.readouterr().err
        assert run("synth", "--n", 5, "--out", tmp_path / "x", "--force") == 0

    def test_env_seed(self, tmp_path, monkeypatch):
        run("synth", "--n", 10, "--seed", 9, "--out", tmp_path / "flag")
        monkeypatch.setenv("DDB_SEED", "9")
        run("synth", "--n", 10, "--out", tmp_path / "env")
        assert files(tmp_path / "flag") == files(tmp_path / "env")

    def test_bad_env_seed(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DDB_SEED", "nine")
        assert run("synth", "--n", 10, "--out", tmp_path / "d") == 1


class TestTrain:
    def test_artifacts(self, vit_run):
        for name in ("model.ddb", "history.csv", "config.json", "plan.json"):
            assert (vit_run / name).is_file()
        cfg = json.loads((vit_run / "config.json").read_text())
        assert cfg["model"] == "vit-tiny" and cfg["max_epochs"] == 3 and cfg["fold"] == 1

    def test_history_lr(self, vit_run):
        cfg = json.loads((vit_run / "config.json").read_text())
        tcfg = TR.TrainConfig(**{k: cfg[k] for k in ("lr_init", "max_epochs", "warmup_epochs", "batch_size")},
                              augment=None)
        plan = D.FoldPlan.load(vit_run / "plan.json")
        steps = -(-len(plan.folds[0].train) // tcfg.batch_size)
        rows = list(csv.DictReader(open(vit_run / "history.csv")))
        assert list(rows[0]) == ["epoch", "train_loss", "val_loss", "bce", "kl", "lr"]
        for row in rows:
            last_step = int(row["epoch"]) * steps - 1
            assert float(row["lr"]) == TR.lr_at(last_step, steps, tcfg)

    def test_checkpoint_carries_config(self, vit_run):
        manifest, _ = M.read_checkpoint(vit_run / "model.ddb")
        assert manifest["extra"]["config"]["model"] == "vit-tiny"
        assert manifest["extra"]["train"]["weight_decay"] == 0.05

    def test_rerun_from_config(self, vit_run, tmp_path):
        assert run("train", "--config", vit_run / "config.json", "--out", tmp_path) == 0
        assert (tmp_path / "model.ddb").read_bytes() == (vit_run / "model.ddb").read_bytes()
        assert (tmp_path / "history.csv").read_bytes() == (vit_run / "history.csv").read_bytes()

    def test_flag_beats_file(self, tmp_path):
        from cxrvit import config as C
        (tmp_path / "c.json").write_text(json.dumps({"max_epochs": 7, "lr_init": 0.01}))
        cfg = C.resolve({"max_epochs": 4, "lr_init": None}, tmp_path / "c.json")
        assert cfg["max_epochs"] == 4 and cfg["lr_init"] == 0.01 and cfg["batch_size"] == 32

    def test_deit_needs_teacher(self, dataset, tmp_path, capsys):
        assert run("train", "--model", "deit-tiny", "--data", dataset, "--out", tmp_path / "o") == 1
        assert "--teacher" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()

    def test_teacher_for_vit(self, dataset, cnn_run, tmp_path):
        assert run("train", "--model", "vit-tiny", "--data", dataset, "--teacher", cnn_run / "model.ddb",
                   "--out", tmp_path) == 1

    def test_deit_with_teacher(self, dataset, cnn_run, tmp_path):
        assert run("train", "--model", "deit-tiny", "--data", dataset, "--teacher", cnn_run / "model.ddb",
                   "--epochs", 3, "--out", tmp_path) == 0
        kl = [float(r["kl"]) for r in csv.DictReader(open(tmp_path / "history.csv"))]
        assert all(v > 0 for v in kl)

    def test_unknown_model(self, dataset, tmp_path):
        assert run("train", "--model", "resnet-50", "--data", dataset, "--out", tmp_path) == 1

    def test_bad_config_file(self, tmp_path):
        (tmp_path / "c.json").write_text("[1, 2]")
        assert run("train", "--config", tmp_path / "c.json", "--out", tmp_path / "o") == 1

    def test_missing_data(self, tmp_path):
        assert run("train", "--model", "vit-tiny", "--data", tmp_path / "nowhere", "--out", tmp_path / "o") == 2


class TestEval:
    def test_matches_library(self, dataset, vit_run, tmp_path):
        assert run("eval", "--checkpoint", vit_run / "model.ddb", "--data", dataset, "--out", tmp_path) == 0
        records = D.apply_policy(D.load_manifest(dataset / "manifest.csv"))
        plan = D.FoldPlan.load(vit_run / "plan.json")
        test = np.asarray(plan.test)
        images = D.load_images(records, dataset)[test]
        ref = E.evaluate(M.load(vit_run / "model.ddb"), images, D.label_matrix(records)[test])
        got = json.loads((tmp_path / "metrics.json").read_text())
        assert got["weighted_auroc"] == ref.weighted_auroc
        assert got["per_class_f1"] == ref.per_class_f1

    def test_schema(self, dataset, cnn_run, tmp_path):
        assert run("eval", "--checkpoint", cnn_run / "model.ddb", "--data", dataset, "--out", tmp_path) == 0
        rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
        assert list(rows[0]) == ["class", "auroc", "f1", "support"]
        assert [r["class"] for r in rows] == list(D.CLASSES) + ["weighted"]
        assert json.loads((tmp_path / "eval_config.json").read_text())["command"] == "eval"

    def test_spec_mismatch(self, dataset, vit_run, tmp_path):
        code = run("eval", "--checkpoint", vit_run / "model.ddb", "--data", dataset, "--model", "deit-tiny",
                   "--out", tmp_path)
        assert code == 2

    def test_corrupt_checkpoint(self, dataset, tmp_path):
        (tmp_path / "bad.ddb").write_bytes(b"garbage!")
        assert run("eval", "--checkpoint", tmp_path / "bad.ddb", "--data", dataset) == 2


class TestSweep:
    @pytest.fixture(scope="class")
    def sweep_out(self, dataset, tmp_path_factory):
        out = tmp_path_factory.mktemp("sweep")
        code = run("sweep", "--data", dataset, "--models", "cnn-tiny", "--fractions", 0.5, 1.0, "--epochs", 3,
                   "--lr", 3e-3, "--out", out)
        return code, out

    def test_cardinality(self, sweep_out):
        code, out = sweep_out
        assert code == 0
        grid = list(csv.DictReader(open(out / "grid.csv")))
        assert len(grid) == 10
        assert len(json.loads((out / "summary.json").read_text())["rows"]) == 2

    def test_summary_recomputes(self, sweep_out):
        _, out = sweep_out
        grid = list(csv.DictReader(open(out / "grid.csv")))
        for row in json.loads((out / "summary.json").read_text())["rows"]:
            vals = [float(g["weighted_auroc"]) for g in grid if float(g["fraction"]) == row["fraction"]]
            mean, std = E.aggregate_folds(vals)
            assert row["auroc_mean"] == pytest.approx(mean, abs=1e-12)
            assert row["auroc_std"] == pytest.approx(std, abs=1e-12)

    def test_svg(self, sweep_out):
        _, out = sweep_out
        svg = ET.fromstring((out / "sweep.svg").read_text())
        assert svg.get("viewBox") == "0 0 800 500"
        ns = "{http://www.w3.org/2000/svg}"
        assert len(svg.findall(f"{ns}polyline")) == 1 and len(svg.findall(f"{ns}polygon")) == 1

    def test_failed_cells_exit_2(self, tmp_path):
        # two training images cannot cover all five classes, so class weighting fails for that cell
        run("synth", "--n", 30, "--seed", 1, "--out", tmp_path / "d")
        code = run("sweep", "--data", tmp_path / "d", "--models", "cnn-tiny", "--fractions", 0.1, 1.0,
                   "--folds", 2, "--epochs", 3, "--out", tmp_path / "o")
        grid = list(csv.DictReader(open(tmp_path / "o" / "grid.csv")))
        assert code == 2 and len(grid) == 4
        errors = [g["error"] for g in grid if float(g["fraction"]) == 0.1]
        assert all(e.startswith("WeightingError") for e in errors)
        assert all(g["error"] == "" for g in grid if float(g["fraction"]) == 1.0)

    def test_bad_folds(self, dataset, tmp_path):
        assert run("sweep", "--data", dataset, "--models", "cnn-tiny", "--folds", 9, "--out", tmp_path) == 1


class TestParams:
    def test_table(self, capsys):
        assert run("params") == 0
        rows = [line.split() for line in capsys.readouterr().out.splitlines()]
        assert [r[0] for r in rows] == ["densenet-121", "densenet-201", "vit-s", "vit-b", "deit-s", "deit-b"]
        expected = [6.96, 18.10, 21.67, 85.80, 21.67, 85.81]
        for (_, count, millions), ref in zip(rows, expected):
            assert abs(int(count) / 1e6 - ref) <= 0.01 * ref
            assert millions == f"{int(count) / 1e6:.2f}"

    def test_deit_vit_gap(self, capsys):
        run("params", "--model", "vit-b", "deit-b")
        (_, vit, _), (_, deit, _) = [line.split() for line in capsys.readouterr().out.splitlines()]
        d, k = 768, 5
        # distillation token, its position row, second head
        assert int(deit) - int(vit) == d + d + d * k + k

    def test_unknown(self):
        assert run("params", "--model", "vgg-16") == 1


class TestSaliency:
    def test_attention_on_cnn(self, cnn_run, dataset, tmp_path):
        img = next(dataset.rglob("*.pgm"))
        assert run("saliency", "--checkpoint", cnn_run / "model.ddb", "--image", img, "--method", "attention",
                   "--out", tmp_path / "s") == 1

    def test_grad_cam_on_vit(self, vit_run, dataset, tmp_path):
        img = next(dataset.rglob("*.pgm"))
        assert run("saliency", "--checkpoint", vit_run / "model.ddb", "--image", img, "--method", "grad_cam",
                   "--out", tmp_path / "s") == 1

    def test_attention_matches_library(self, vit_run, dataset, tmp_path):
        img = next(dataset.rglob("*.pgm"))
        assert run("saliency", "--checkpoint", vit_run / "model.ddb", "--image", img, "--method", "attention",
                   "--out", tmp_path / "s") == 0
        ref = S.model_attention_map(M.load(vit_run / "model.ddb"), D.read_pgm(img)).values
        got = np.loadtxt(tmp_path / "s_map.csv", delimiter=",")
        assert np.array_equal(got, ref)
        assert D.read_pgm(tmp_path / "s_overlay.pgm").shape == D.read_pgm(img).shape

    def test_grad_cam_matches_library(self, cnn_run, dataset, tmp_path):
        img = next(dataset.rglob("*.pgm"))
        assert run("saliency", "--checkpoint", cnn_run / "model.ddb", "--image", img, "--method", "grad_cam",
                   "--class", 2, "--out", tmp_path / "g") == 0
        ref = S.grad_cam(M.load(cnn_run / "model.ddb"), D.read_pgm(img), 2).values
        assert np.array_equal(np.loadtxt(tmp_path / "g_map.csv", delimiter=","), ref)

    def test_default_class_is_argmax(self, cnn_run, dataset, tmp_path):
        img = next(dataset.rglob("*.pgm"))
        model = M.load(cnn_run / "model.ddb")
        logits, _ = M.predict_logits(model, prepare(D.read_pgm(img)[None], model))
        run("saliency", "--checkpoint", cnn_run / "model.ddb", "--image", img, "--method", "grad_cam",
            "--out", tmp_path / "a")
        run("saliency", "--checkpoint", cnn_run / "model.ddb", "--image", img, "--method", "grad_cam",
            "--class", int(np.argmax(logits[0])), "--out", tmp_path / "b")
        assert (tmp_path / "a_map.csv").read_bytes() == (tmp_path / "b_map.csv").read_bytes()

    def test_resized_input(self, vit_run, tmp_path):
        D.write_pgm(tmp_path / "big.pgm", np.random.default_rng(0).random((48, 40)))
        assert run("saliency", "--checkpoint", vit_run / "model.ddb", "--image", tmp_path / "big.pgm",
                   "--method", "attention", "--out", tmp_path / "r") == 0
        for suffix in ("_map.pgm", "_overlay.pgm", "_image.pgm"):
            assert D.read_pgm(tmp_path / f"r{suffix}").shape == (48, 40)


def test_usage_error_exit_code():
    assert run("train") == 1
    assert run("no-such-command") == 1


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "cxrvit", "params", "--model", "cnn-tiny"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("cnn-tiny")
