import json
from pathlib import Path

import numpy as np
import pytest

from nirskill.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_USAGE, dispatch


FAST = [
    "--set", "train.max_epochs=40",
    "--set", "train.classifier_epochs=120",
    "--set", "train.lr_step_size=40",
]
TINY_SCENARIO = [
    "--set", "synth.n_subjects=3",
    "--set", "synth.days=1",
    "--set", "synth.trials_per_day=8",
    "--set", "synth.duration_min_s=45",
    "--set", "synth.duration_max_s=60",
    "--set", "synth.positive_fraction=0.625",
]


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("dataset")
    code = dispatch(["synth", "--out", str(out), *TINY_SCENARIO])
    assert code == EXIT_OK
    return out


@pytest.fixture(scope="module")
def artifacts_dir(tmp_path_factory, dataset_dir):
    art = tmp_path_factory.mktemp("artifacts")
    manifest = str(dataset_dir / "manifest.json")
    code = dispatch([
        "pretrain", "--manifest", manifest, "--out", str(art),
        "--region", "RPFC", "--mode", "end_to_end", *TINY_SCENARIO, *FAST,
    ])
    assert code == EXIT_OK
    return art


class TestSmokePipeline:
    """synth -> pretrain -> train -> cv completes on a small scenario."""

    def test_synth_outputs(self, dataset_dir):
        assert (dataset_dir / "manifest.json").exists()
        assert (dataset_dir / "montage.json").exists()
        assert (dataset_dir / "run_synth.json").exists()
        doc = json.loads((dataset_dir / "run_synth.json").read_text())
        assert doc["command"] == "synth" and "seed" in doc

    def test_pretrain_outputs(self, artifacts_dir):
        assert (artifacts_dir / "RPFC" / "encoder.wgt").exists()
        assert (artifacts_dir / "RPFC" / "norm.json").exists()
        report = json.loads((artifacts_dir / "RPFC" / "pretrain_report.json").read_text())
        assert report["best_loss"] <= report["epoch_losses"][0]

    def test_train_then_cv_then_infer(self, dataset_dir, artifacts_dir):
        manifest = str(dataset_dir / "manifest.json")
        art = str(artifacts_dir)
        assert dispatch(["train", "--manifest", manifest, "--artifacts", art,
                         "--region", "RPFC", *TINY_SCENARIO, *FAST]) == EXIT_OK
        assert (artifacts_dir / "RPFC" / "classifier.wgt").exists()
        assert dispatch(["cv", "--manifest", manifest, "--artifacts", art,
                         "--region", "RPFC", "-k", "3", *TINY_SCENARIO, *FAST]) == EXIT_OK
        assert (artifacts_dir / "metrics.csv").exists()
        assert (artifacts_dir / "roc_RPFC.csv").exists()
        assert (artifacts_dir / "results.json").exists()
        assert dispatch(["loso", "--manifest", manifest, "--artifacts", art,
                         "--region", "RPFC", *TINY_SCENARIO, *FAST]) == EXIT_OK
        assert (artifacts_dir / "loso_mce.csv").exists()
        assert dispatch(["infer", "--manifest", manifest, "--artifacts", art,
                         "--region", "RPFC", *TINY_SCENARIO]) == EXIT_OK
        scores = (artifacts_dir / "scores.csv").read_text().splitlines()
        assert scores[0] == "subject,day,trial,label,score,predicted"
        assert len(scores) == 1 + 24

    def test_report_rerenders_identically(self, dataset_dir, artifacts_dir):
        if not (artifacts_dir / "results.json").exists():
            pytest.skip("cv output missing")
        before = (artifacts_dir / "metrics.csv").read_bytes()
        assert dispatch(["report", "--results", str(artifacts_dir)]) == EXIT_OK
        assert (artifacts_dir / "metrics.csv").read_bytes() == before

    def test_compare_layout(self, dataset_dir, artifacts_dir, tmp_path):
        if not (artifacts_dir / "metrics.csv").exists():
            pytest.skip("cv output missing")
        out = tmp_path / "comparison.csv"
        code = dispatch(["compare", str(artifacts_dir), str(artifacts_dir),
                         "--out", str(out), "--task", "FLS_X"])
        assert code == EXIT_OK
        lines = out.read_text().strip().splitlines()
        assert lines[0] == ("task,mcc,f1_score,sensitivity,specificity,"
                            "accuracy,balanced_accuracy,roc_auc,pr_auc")
        assert lines[1].startswith("FLS_X,")


class TestErrorPaths:
    def test_unknown_flag_usage_exit(self):
        assert dispatch(["synth", "--nope", "x"]) == EXIT_USAGE

    def test_unknown_command_usage_exit(self):
        assert dispatch(["frobnicate"]) == EXIT_USAGE

    def test_bad_config_key_exit(self, tmp_path):
        assert dispatch(["synth", "--out", str(tmp_path / "d"),
                         "--set", "synth.bogus_knob=3"]) == EXIT_CONFIG

    def test_bad_config_value_exit(self, tmp_path):
        assert dispatch(["synth", "--out", str(tmp_path / "d"),
                         "--set", "synth.n_subjects=elephant"]) == EXIT_CONFIG

    def test_missing_manifest_io_exit(self, tmp_path):
        code = dispatch(["pretrain", "--manifest", str(tmp_path / "no.json"),
                         "--out", str(tmp_path / "a"), "--region", "RPFC"])
        assert code in (EXIT_IO, 1)  # FileNotFoundError -> 4

    def test_config_file_support(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("[synth]\nn_subjects = 2\ndays = 1\ntrials_per_day = 4\n"
                       "duration_min_s = 45\nduration_max_s = 50\n")
        out = tmp_path / "d"
        assert dispatch(["synth", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(manifest["records"]) == 8

    def test_seed_override_recorded(self, tmp_path):
        out = tmp_path / "d"
        assert dispatch(["synth", "--out", str(out), "--seed", "99",
                         *TINY_SCENARIO]) == EXIT_OK
        doc = json.loads((out / "run_synth.json").read_text())
        assert doc["seed"] == 99


class TestDeterminism:
    def test_same_seed_identical_dataset_and_weights(self, tmp_path):
        args = [*TINY_SCENARIO, *FAST]
        outs = []
        for tag in ("a", "b"):
            d = tmp_path / f"d_{tag}"
            r = tmp_path / f"r_{tag}"
            assert dispatch(["synth", "--out", str(d), *args]) == EXIT_OK
            assert dispatch(["pretrain", "--manifest", str(d / "manifest.json"),
                             "--out", str(r), "--region", "RPFC", *args]) == EXIT_OK
            outs.append((d, r))
        (d1, r1), (d2, r2) = outs
        assert (d1 / "manifest.json").read_bytes() == (d2 / "manifest.json").read_bytes()
        assert (r1 / "RPFC" / "encoder.wgt").read_bytes() == \
            (r2 / "RPFC" / "encoder.wgt").read_bytes()
