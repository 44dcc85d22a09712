import json
import shutil

import numpy as np
import pytest

from cafv.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, run
from cafv.data import load_features

SPEC = {"n_classes": 4, "feature_dim": 6, "counts": [30, 30, 5, 30], "test_counts": [10, 10, 10, 10], "seed": 2}
CONFIG = {"feature_dim": 6, "noise_dim": 4, "generator_hidden": 8, "critic_hidden": 8, "classifier_epochs": 3,
          "max_generator_steps": 5, "batch_size": 8, "synth_per_class": 10, "seed": 4}


@pytest.fixture
def files(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    (tmp_path / "spec.json").write_text(json.dumps(SPEC))
    (tmp_path / "cfg.json").write_text(json.dumps(CONFIG))
    return tmp_path


def cafv(*argv):
    return run([str(a) for a in argv] + ["--quiet"])


@pytest.fixture
def pipeline(files):
    """gen-data -> train-classifier -> train-gan in a scratch directory."""
    d = files
    assert cafv("gen-data", "--spec", d / "spec.json", "--out", d / "data") == EXIT_OK
    assert cafv("train-classifier", "--data", d / "data/train.csv", "--config", d / "cfg.json",
                "--out", d / "clf") == EXIT_OK
    assert cafv("train-gan", "--data", d / "data/train.csv", "--classifier", d / "clf/classifier",
                "--config", d / "cfg.json", "--out", d / "gan") == EXIT_OK
    return d


def test_gen_data_contract(files):
    assert cafv("gen-data", "--spec", files / "spec.json", "--out", files / "d") == EXIT_OK
    names = sorted(p.name for p in (files / "d").iterdir())
    assert names == ["class_histogram.csv", "prototypes.csv", "run_manifest.json", "test.csv", "train.csv"]
    train = load_features(files / "d/train.csv")
    assert train.feature_dim == 6 and len(train) == 95
    man = json.loads((files / "d/run_manifest.json").read_text())
    assert man["started"] == man["finished"]
    assert {o["path"].split("/")[-1] for o in man["outputs"]} >= {"train.csv", "test.csv"}


def test_binary_format_round_trips(files):
    assert cafv("gen-data", "--spec", files / "spec.json", "--format", "binary", "--out", files / "b") == EXIT_OK
    assert cafv("gen-data", "--spec", files / "spec.json", "--out", files / "c") == EXIT_OK
    b, c = load_features(files / "b/train.cafv"), load_features(files / "c/train.csv")
    np.testing.assert_array_equal(b.features.astype(np.float32), c.features.astype(np.float32))


def test_usage_errors_exit_one_and_write_nothing(files):
    out = files / "never"
    assert run(["no-such-command"]) == EXIT_USAGE
    assert cafv("train-classifier", "--data", files / "missing.csv", "--out", out) == EXIT_USAGE
    assert cafv("gen-data", "--spec", files / "cfg.json", "--out", out) == EXIT_USAGE
    assert cafv("gen-data", "--format", "xml", "--out", out) == EXIT_USAGE
    assert cafv("gen-data", "--spec", files / "spec.json") == EXIT_USAGE
    assert not out.exists()


def test_dimension_mismatch_is_usage_error(pipeline):
    bad = dict(CONFIG, feature_dim=7)
    (pipeline / "bad.json").write_text(json.dumps(bad))
    assert cafv("train-classifier", "--data", pipeline / "data/train.csv", "--config", pipeline / "bad.json",
                "--out", pipeline / "x") == EXIT_USAGE
    assert not (pipeline / "x").exists()


def test_runtime_failure_exits_two(pipeline):
    # label 99 has no source class within any allowed interval
    assert cafv("synthesize", "--checkpoint", pipeline / "gan/gan", "--data", pipeline / "data/train.csv",
                "--target", 99, "--count", 3, "--out", pipeline / "s") == EXIT_RUNTIME


def test_synthesize_and_evaluate(pipeline, capsys):
    d = pipeline
    assert cafv("synthesize", "--checkpoint", d / "gan/gan", "--data", d / "data/train.csv",
                "--target", 12, "--count", 7, "--out", d / "s") == EXIT_OK
    synth = load_features(d / "s/synthetic_12.csv")
    assert len(synth) == 7 and set(synth.labels) == {12} and synth.has_synthetic
    assert set(synth.source_ids) <= set(load_features(d / "data/train.csv").ids)
    assert cafv("evaluate", "--classifier", d / "clf/classifier", "--data", d / "data/test.csv",
                "--bin-width", 0.5, "--out", d / "ev") == EXIT_OK
    metrics = json.loads((d / "ev/metrics.json").read_text())
    assert sum(metrics["abs_error_histogram"].values()) == 40
    assert (d / "ev/error_histogram.csv").read_text().startswith("bin_lower,count\n")


def test_resume_matches_uninterrupted(pipeline):
    d = pipeline
    for name, steps in (("a", 2), ("b", 3)):
        src = d / "gan/gan" if name == "a" else d / "a/gan"
        assert cafv("train-gan", "--data", d / "data/train.csv", "--resume", src, "--steps", 0,
                    "--out", d / name) == EXIT_OK
    assert cafv("train-gan", "--data", d / "data/train.csv", "--classifier", d / "clf/classifier",
                "--config", d / "cfg.json", "--steps", 2, "--out", d / "p") == EXIT_OK
    assert cafv("train-gan", "--data", d / "data/train.csv", "--resume", d / "p/gan",
                "--out", d / "q") == EXIT_OK
    assert (d / "q/gan/weights.bin").read_bytes() == (d / "gan/gan/weights.bin").read_bytes()
    assert cafv("train-gan", "--data", d / "data/train.csv", "--resume", d / "p/gan", "--seed", 1,
                "--out", d / "r") == EXIT_USAGE


def test_inspect_checkpoint(pipeline, capsys):
    assert cafv("inspect-checkpoint", pipeline / "gan/gan") == EXIT_OK
    text = capsys.readouterr().out
    assert "lambda1: 10.0" in text and "n_critic: 5" in text and "step: 5" in text
    assert "noise_dim: 4" in text
    assert cafv("inspect-checkpoint", pipeline / "nowhere") == EXIT_USAGE


def test_gradcheck_command(files, capsys):
    assert cafv("gradcheck", "--seed", 3, "--count", 2, "--out", files / "g") == EXIT_OK
    table = (files / "g/gradcheck.csv").read_text()
    assert table == capsys.readouterr().out
    assert table.count(",ok\n") == 7


def test_augment_eval_outputs_are_reproducible(pipeline):
    d = pipeline
    argv = ["augment-eval", "--data", d / "data", "--rare", "12", "--seeds", "1,2", "--config", d / "cfg.json",
            "--out", d / "aug"]
    assert cafv(*argv) == EXIT_OK
    first = {p.relative_to(d / "aug"): p.read_bytes() for p in (d / "aug").rglob("*") if p.is_file()}
    assert {str(p) for p in first} >= {"summary.json", "seed-1/result.json", "seed-2/error_histogram.svg",
                                        "seed-1/table.csv", "seed-1/error_histogram_augmented.csv"}
    shutil.rmtree(d / "aug")
    assert cafv(*argv) == EXIT_OK
    second = {p.relative_to(d / "aug"): p.read_bytes() for p in (d / "aug").rglob("*") if p.is_file()}
    assert first == second
    assert cafv("augment-eval", "--data", d / "data", "--rare", "77", "--config", d / "cfg.json",
                "--out", d / "bad") == EXIT_USAGE
