"""Command line interface: run directories, exit codes, determinism."""

import csv
import json
import os

import pytest

from cogfuse.cli import main

SPEC = {
    "n_mci_subjects": 10,
    "n_control_subjects": 10,
    "zh_subjects": 10,
    "en_subjects": 10,
    "seq_len": 6,
    "embed_dim": 8,
    "audio_dim": 5,
    "text_separation": 2.0,
    "audio_separation": 1.5,
}

CONFIG = {"learning_rate": 0.01, "max_epochs": 3, "patience": 3, "hidden": [8]}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A generated corpus plus config file shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    spec_path = root / "spec.json"
    spec_path.write_text(json.dumps(SPEC))
    (root / "config.json").write_text(json.dumps(CONFIG))
    assert main(["generate", "--spec", str(spec_path), "--out", str(root / "corpus.jsonl")]) == 0
    return root


def run_dirs(base):
    return sorted(p for p in base.iterdir() if p.is_dir())


def crossval_args(ws, out, extra=()):
    return [
        "crossval", "--corpus", str(ws / "corpus.jsonl"), "--variant", "audio",
        "--task", "cls", "--config", str(ws / "config.json"), "--out-dir", str(out),
        *extra,
    ]


class TestGenerate:
    def test_line_count_is_records_plus_meta(self, workspace):
        lines = (workspace / "corpus.jsonl").read_text().strip().split("\n")
        assert len(lines) == 20 * 3 + 1
        assert json.loads(lines[0])["meta"]["L"] == SPEC["seq_len"]

    def test_seed_flag_changes_the_file(self, workspace, tmp_path):
        out = tmp_path / "alt.jsonl"
        args = ["generate", "--spec", str(workspace / "spec.json"), "--out", str(out)]
        assert main(args + ["--seed", "7"]) == 0
        assert out.read_text() != (workspace / "corpus.jsonl").read_text()

    def test_unknown_spec_key_is_usage_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"n_mci_subjects": 10, "n_rows": 4}))
        assert main(["generate", "--spec", str(bad), "--out", str(tmp_path / "c.jsonl")]) == 2
        assert "n_rows" in capsys.readouterr().err


@pytest.fixture(scope="module")
def run_dir(workspace, tmp_path_factory):
    out = tmp_path_factory.mktemp("cv")
    assert main(crossval_args(workspace, out)) == 0
    (only,) = run_dirs(out)
    return only


@pytest.fixture(scope="module")
def train_dir(workspace, tmp_path_factory):
    out = tmp_path_factory.mktemp("tr")
    args = [
        "train", "--corpus", str(workspace / "corpus.jsonl"), "--variant", "audio",
        "--task", "cls", "--config", str(workspace / "config.json"),
        "--folds", "5", "--val-fold", "0", "--out-dir", str(out),
    ]
    assert main(args) == 0
    (only,) = run_dirs(out)
    return only


class TestCrossval:
    def test_run_dir_contents(self, run_dir):
        names = sorted(p.name for p in run_dir.iterdir())
        assert names == ["fold_plan.json", "folds", "manifest.json", "summary.json"]
        for fold in range(5):
            fold_dir = run_dir / "folds" / f"fold{fold}"
            assert (fold_dir / "checkpoint.json").is_file()
            with open(fold_dir / "history.csv", newline="") as fh:
                rows = list(csv.DictReader(fh))
            assert rows and set(rows[0]) == {"epoch", "train_loss", "val_loss"}

    def test_manifest_records_the_run(self, run_dir, workspace):
        doc = json.loads((run_dir / "manifest.json").read_text())
        assert doc["command"] == "crossval"
        assert doc["config"]["variant"] == "audio"
        assert doc["seeds"]["train"] == 42
        assert doc["inputs"]["corpus"] == str(workspace / "corpus.jsonl")
        assert doc["outputs"]["summary"] == "summary.json"

    def test_summary_shape(self, run_dir):
        doc = json.loads((run_dir / "summary.json").read_text())
        assert doc["n_folds"] == 5
        assert doc["aggregation"] == "sample"
        assert len(doc["folds"]) == 5
        assert {"uar", "f1"} <= set(doc["summary"])
        assert "created" not in doc

    def test_report_formats(self, run_dir, capsys):
        assert main(["report", "--run", str(run_dir), "--format", "json"]) == 0
        json.loads(capsys.readouterr().out)

        assert main(["report", "--run", str(run_dir), "--format", "csv"]) == 0
        rows = capsys.readouterr().out.strip().split("\n")
        assert len(rows) == 1 + 5 + 2  # header, folds, mean, sd
        assert rows[0].startswith("fold,")

        assert main(["report", "--run", str(run_dir), "--format", "md"]) == 0
        out = capsys.readouterr().out
        assert "| Model | UAR | F1 | Specificity | Sensitivity | Precision |" in out
        assert "| audio |" in out
        assert "±" in out

    def test_subject_mean_is_tagged(self, workspace, tmp_path):
        assert main(crossval_args(workspace, tmp_path, ["--subject-mean"])) == 0
        (rd,) = run_dirs(tmp_path)
        assert json.loads((rd / "summary.json").read_text())["aggregation"] == "subject"

    def test_reruns_get_distinct_directories(self, workspace, tmp_path):
        assert main(crossval_args(workspace, tmp_path)) == 0
        assert main(crossval_args(workspace, tmp_path)) == 0
        assert len(run_dirs(tmp_path)) == 2


class TestDeterminism:
    def test_same_seed_same_bytes(self, workspace, tmp_path):
        for sub in ("a", "b"):
            assert main(crossval_args(workspace, tmp_path / sub, ["--seed", "5"])) == 0
        (da,), (db,) = run_dirs(tmp_path / "a"), run_dirs(tmp_path / "b")
        assert (da / "summary.json").read_bytes() == (db / "summary.json").read_bytes()

    def test_seed_flip_changes_a_metric(self, workspace, tmp_path):
        for seed, sub in (("5", "a"), ("6", "b")):
            assert main(crossval_args(workspace, tmp_path / sub, ["--seed", seed])) == 0
        (da,), (db,) = run_dirs(tmp_path / "a"), run_dirs(tmp_path / "b")
        assert (da / "summary.json").read_bytes() != (db / "summary.json").read_bytes()

    def test_env_seed_equals_flag_seed(self, workspace, tmp_path, monkeypatch):
        monkeypatch.setenv("COGFUSE_SEED", "5")
        assert main(crossval_args(workspace, tmp_path / "env")) == 0
        monkeypatch.delenv("COGFUSE_SEED")
        assert main(crossval_args(workspace, tmp_path / "flag", ["--seed", "5"])) == 0
        (de,), (df,) = run_dirs(tmp_path / "env"), run_dirs(tmp_path / "flag")
        assert (de / "summary.json").read_bytes() == (df / "summary.json").read_bytes()


class TestTrainEvaluate:
    def test_train_outputs(self, train_dir):
        names = sorted(p.name for p in train_dir.iterdir())
        assert names == ["checkpoint.json", "fit.json", "fold_plan.json", "history.csv", "manifest.json"]
        fit_doc = json.loads((train_dir / "fit.json").read_text())
        assert fit_doc["val_fold"] == 0
        assert len(fit_doc["history"]) == fit_doc["stopped_epoch"]
        assert "uar" in fit_doc["validation"]
        with open(train_dir / "history.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == fit_doc["stopped_epoch"]
        assert float(rows[0]["val_loss"]) == fit_doc["history"][0]["val_loss"]

    def test_train_accepts_a_plan_file(self, workspace, train_dir, tmp_path):
        args = [
            "train", "--corpus", str(workspace / "corpus.jsonl"), "--variant", "audio",
            "--task", "cls", "--config", str(workspace / "config.json"),
            "--folds", str(train_dir / "fold_plan.json"), "--val-fold", "1",
            "--out-dir", str(tmp_path),
        ]
        assert main(args) == 0
        (rd,) = run_dirs(tmp_path)
        assert (rd / "fold_plan.json").read_bytes() == (train_dir / "fold_plan.json").read_bytes()

    def test_evaluate_a_run_directory(self, workspace, train_dir, tmp_path, capsys):
        args = [
            "evaluate", "--checkpoint", str(train_dir),
            "--corpus", str(workspace / "corpus.jsonl"), "--out-dir", str(tmp_path),
        ]
        assert main(args) == 0
        printed = json.loads(capsys.readouterr().out)
        (rd,) = run_dirs(tmp_path)
        doc = json.loads((rd / "evaluation.json").read_text())
        assert doc == printed
        assert doc["variant"] == "audio" and doc["task"] == "cls"
        assert doc["n_records"] == 60 and doc["n_subjects"] == 20
        assert 0.0 <= doc["uar"] <= 1.0

        assert main(["report", "--run", str(rd), "--format", "md"]) == 0
        assert "held-out evaluation" in capsys.readouterr().out


class TestExitCodes:
    def test_missing_corpus_is_io_error(self, tmp_path, capsys):
        args = ["crossval", "--corpus", str(tmp_path / "nope.jsonl"), "--variant", "audio",
                "--task", "cls", "--out-dir", str(tmp_path)]
        assert main(args) == 1

    def test_bad_variant_is_usage_error(self, workspace, tmp_path):
        args = crossval_args(workspace, tmp_path)
        args[args.index("--variant") + 1] = "video"
        with pytest.raises(SystemExit) as exc:
            main(args)
        assert exc.value.code == 2

    def test_unknown_config_key_is_usage_error(self, workspace, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"learning_rate": 0.01, "momentum": 0.9}))
        args = crossval_args(workspace, tmp_path)
        args[args.index("--config") + 1] = str(bad)
        assert main(args) == 2
        assert "momentum" in capsys.readouterr().err

    def test_bad_env_seed_is_usage_error(self, workspace, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("COGFUSE_SEED", "not-a-number")
        assert main(crossval_args(workspace, tmp_path)) == 2
        assert "COGFUSE_SEED" in capsys.readouterr().err

    def test_missing_checkpoint_is_io_error(self, workspace, tmp_path):
        args = ["evaluate", "--checkpoint", str(tmp_path / "missing.json"),
                "--corpus", str(workspace / "corpus.jsonl"), "--out-dir", str(tmp_path)]
        assert main(args) == 1

    def test_report_on_empty_directory_is_io_error(self, tmp_path):
        assert main(["report", "--run", str(tmp_path)]) == 1
