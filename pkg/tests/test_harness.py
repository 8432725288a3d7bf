"""Tests for configuration, feature-file I/O, the training/eval commands
and the CLI surface."""

import json

import numpy as np
import pytest

from oodkit import cli, harness
from oodkit import transformer as tfm
from oodkit.harness import (ExperimentConfig, FormatError, read_feature_file,
                            write_feature_file)
from oodkit.synthdata import FeatureBatch, gen_mixture_2d


def small_config(**overrides):
    values = {"n_train_per_class": 100, "n_test_per_class": 50, "n_ood": 80,
              "epochs": 2, "batch_size": 32, "lr": 0.01}
    values.update(overrides)
    return ExperimentConfig(values)


class TestExperimentConfig:
    def test_defaults_and_typed_access(self):
        cfg = ExperimentConfig()
        assert cfg.get("task") == "mixture2d"
        assert cfg.get_int("epochs") == 10
        assert cfg.get_float("gamma") == 0.1
        assert cfg.get_bool("grod_enabled") is True
        assert cfg.get_int_list("sweep_depths") == [1, 2, 4, 8, 16]

    def test_unknown_key_rejected(self):
        with pytest.raises(FormatError):
            ExperimentConfig({"no_such_key": 1})

    def test_invalid_values_rejected(self):
        with pytest.raises(FormatError):
            ExperimentConfig({"batch_size": 1})
        with pytest.raises(FormatError):
            ExperimentConfig({"epochs": 0})

    def test_from_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# comment\nepochs = 3\ngamma=0.2\n\n")
        cfg = ExperimentConfig.from_file(path)
        assert cfg.get_int("epochs") == 3
        assert cfg.get_float("gamma") == 0.2

    def test_from_file_rejects_bad_line(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("epochs 3\n")
        with pytest.raises(FormatError):
            ExperimentConfig.from_file(path)

    def test_hash_stable_and_sensitive(self):
        a = ExperimentConfig({"epochs": 3})
        b = ExperimentConfig({"epochs": 3})
        c = ExperimentConfig({"epochs": 4})
        assert a.hash() == b.hash()
        assert a.hash() != c.hash()
        assert len(a.hash()) == 16

    def test_bool_parsing_from_strings(self):
        assert ExperimentConfig(
            {"grod_enabled": "false"}).get_bool("grod_enabled") is False
        assert ExperimentConfig(
            {"grod_enabled": "1"}).get_bool("grod_enabled") is True


class TestFeatureFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        batch = FeatureBatch(rng.standard_normal((20, 3)),
                             rng.integers(1, 3, size=20))
        path = tmp_path / "f.csv"
        write_feature_file(path, batch, 2)
        loaded, k = read_feature_file(path)
        assert k == 2
        np.testing.assert_array_equal(loaded.features, batch.features)
        np.testing.assert_array_equal(loaded.labels, batch.labels)

    def test_header_format(self, tmp_path):
        batch = FeatureBatch(np.zeros((3, 2)), np.array([1, 1, 2]))
        path = tmp_path / "f.csv"
        write_feature_file(path, batch, 2)
        assert path.read_text().splitlines()[0] == "dim=2,classes=2,rows=3"

    def test_malformed_row_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("dim=2,classes=2,rows=2\n"
                        "0.0,0.0,1\n"
                        "0.0,nope,2\n")
        with pytest.raises(FormatError, match=":3"):
            read_feature_file(path)

    def test_wrong_field_count(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("dim=2,classes=2,rows=1\n0.0,1\n")
        with pytest.raises(FormatError, match=":2"):
            read_feature_file(path)

    def test_row_count_mismatch(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("dim=2,classes=2,rows=5\n0.0,0.0,1\n")
        with pytest.raises(FormatError, match="promises 5"):
            read_feature_file(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("hello\n")
        with pytest.raises(FormatError, match=":1"):
            read_feature_file(path)

    def test_label_out_of_range(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("dim=2,classes=2,rows=1\n0.0,0.0,9\n")
        with pytest.raises(FormatError, match="label 9"):
            read_feature_file(path)


class TestGenData:
    def test_mixture_determinism_byte_identical(self, tmp_path):
        cfg = small_config()
        for name in ("a", "b"):
            harness.cmd_gen_data(cfg, 7, str(tmp_path / name))
        for fname in ("train.csv", "test.csv", "ood.csv"):
            assert (tmp_path / "a" / fname).read_bytes() == \
                (tmp_path / "b" / fname).read_bytes()

    def test_row_counts_and_header(self, tmp_path):
        cfg = small_config()
        harness.cmd_gen_data(cfg, 3, str(tmp_path))
        train, k = read_feature_file(tmp_path / "train.csv")
        assert k == 2
        assert train.features.shape == (200, 2)
        ood, _ = read_feature_file(tmp_path / "ood.csv")
        assert ood.features.shape == (80, 2)
        assert np.all(ood.labels == 3)

    def test_ingest_task_generates_separable_sets(self, tmp_path):
        cfg = ExperimentConfig({"task": "ingest", "classes": 3, "dim": 8,
                                "n_per_class": 30, "separation": 12.0})
        harness.cmd_gen_data(cfg, 1, str(tmp_path))
        train, k = read_feature_file(tmp_path / "train.csv")
        assert k == 3
        assert train.features.shape == (90, 8)
        ood, _ = read_feature_file(tmp_path / "ood.csv")
        assert np.all(ood.labels == 4)

    def test_unknown_task(self, tmp_path):
        cfg = ExperimentConfig()
        cfg.values["task"] = "bogus"
        with pytest.raises(FormatError):
            harness.cmd_gen_data(cfg, 1, str(tmp_path))


class TestTrainEval:
    def test_cross_entropy_loss_decreases(self):
        cfg = small_config(grod_enabled="false", gamma=0.0, epochs=6)
        losses = []
        for seed in (79, 169):
            train, _, _, _ = gen_mixture_2d(seed, 100, 50, 80)
            _, _, log = harness.train_model(cfg, seed, train, 2, d_hat0=2)
            losses.append([e["loss_l1"] for e in log])
        mean = np.mean(losses, axis=0)
        assert mean[-1] < mean[0]

    def test_checkpoint_round_trip(self, tmp_path):
        cfg = small_config(grod_enabled="false", gamma=0.0)
        harness.cmd_gen_data(cfg, 79, str(tmp_path))
        ckpt = harness.cmd_train(cfg, 79, str(tmp_path))
        model = tfm.load_model(ckpt)
        path2 = tmp_path / "again.npz"
        tfm.save_model(model, path2)
        assert (tmp_path / "checkpoint.npz").read_bytes() == \
            path2.read_bytes()

    def test_eval_perfectly_separable(self):
        # a head-only identity model on far-apart clusters scores perfectly
        rng = np.random.default_rng(0)
        train = FeatureBatch(
            np.vstack([rng.standard_normal((50, 2)) * 0.1 + [10, 0],
                       rng.standard_normal((50, 2)) * 0.1 + [0, 10]]),
            np.array([1] * 50 + [2] * 50))
        test = FeatureBatch(train.features[::5].copy(),
                            train.labels[::5].copy())
        ood = FeatureBatch(rng.standard_normal((40, 2)) * 0.1 + [-50, -50],
                           np.full(40, 3))
        budget = tfm.Budget(d_hat=2, h=1, m_h=1, m_V=1, r=1)
        model = tfm.init_model(2, 1, 0, budget, 2, seed=1)
        model.params["input.W"] = np.eye(2)
        model.params["head.W3"] = np.array([[1.0, 0.0], [0.0, 1.0],
                                            [0.0, 0.0]])
        model.params["head.W4"] = np.ones((3, 1))
        summary, report = harness.evaluate_model(model, train, test, ood, 2,
                                                 scorer="vim")
        assert summary.auroc == 1.0
        assert summary.fpr_at_95 == 0.0
        assert summary.id_acc == 1.0

    def test_report_metrics_match_metrics_module(self, tmp_path):
        cfg = small_config(grod_enabled="false", gamma=0.0, scorer="msp")
        harness.cmd_gen_data(cfg, 79, str(tmp_path))
        harness.cmd_train(cfg, 79, str(tmp_path))
        summary = harness.cmd_eval(cfg, 79, str(tmp_path))
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["metrics"] == summary.to_dict()
        assert report["config_hash"] == cfg.hash()
        assert report["seed"] == 79
        assert set(report["per_set"]) == {"id_test", "ood"}

    def test_grod_training_produces_fake_outliers(self):
        cfg = small_config(grod_enabled="true", gamma=0.1, epochs=3)
        train, _, _, _ = gen_mixture_2d(79, 100, 50, 80)
        _, state, log = harness.train_model(cfg, 79, train, 2, d_hat0=2)
        assert state is not None and state.initialized
        assert sum(e["fake_ood_retained"] for e in log) > 0

    def test_grod_state_round_trip(self, tmp_path):
        cfg = small_config(grod_enabled="true", gamma=0.1, epochs=3)
        train, _, _, _ = gen_mixture_2d(79, 100, 50, 80)
        _, state, _ = harness.train_model(cfg, 79, train, 2, d_hat0=2)
        path = tmp_path / "state.npz"
        harness._save_grod_state(state, path)
        loaded = harness.load_grod_state(path)
        np.testing.assert_array_equal(loaded.mu_pca, state.mu_pca)
        assert loaded.dist_id_pca == state.dist_id_pca
        assert sorted(loaded.mu_lda) == sorted(state.mu_lda)


class TestSweep:
    def test_row_count_and_fields(self, tmp_path):
        cfg = ExperimentConfig({"n_train_per_class": 60,
                                "n_test_per_class": 30, "n_ood": 40,
                                "epochs": 1, "batch_size": 32, "lr": 0.01,
                                "grod_enabled": "false", "gamma": 0.0,
                                "sweep_depths": "1,2", "sweep_seeds": "1,2"})
        rows = harness.cmd_sweep_capacity(cfg, 0, str(tmp_path))
        narrow = [r for r in rows if r["config"] == "narrow"]
        wide = [r for r in rows if r["config"] == "wide"]
        assert len(narrow) == 2 * 2
        assert len(wide) == 2
        for r in rows:
            assert {"train_id_acc", "test_id_acc", "ood_acc",
                    "mean_msp"} <= set(r)
            assert {"class1", "class2", "ood"} == set(r["mean_msp"])
        payload = json.loads((tmp_path / "sweep.json").read_text())
        assert len(payload["rows"]) == len(rows)


class TestCli:
    def test_end_to_end_subcommands(self, tmp_path):
        cfg_path = tmp_path / "run.cfg"
        cfg_path.write_text("n_train_per_class=100\nn_test_per_class=50\n"
                            "n_ood=80\nepochs=2\nbatch_size=32\nlr=0.01\n"
                            "grod_enabled=false\ngamma=0.0\nscorer=msp\n")
        out = str(tmp_path / "out")
        for command in ("gen-data", "train", "eval"):
            rc = cli.main([command, "--config", str(cfg_path),
                           "--seed", "79", "--out", out])
            assert rc == 0
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        assert report["seed"] == 79

    def test_eval_with_explicit_checkpoint(self, tmp_path):
        cfg = small_config(grod_enabled="false", gamma=0.0)
        harness.cmd_gen_data(cfg, 79, str(tmp_path))
        ckpt = harness.cmd_train(cfg, 79, str(tmp_path))
        summary = harness.cmd_eval(cfg, 79, str(tmp_path), checkpoint=ckpt)
        assert 0.0 <= summary.auroc <= 1.0

    def test_failure_single_line_stderr(self, tmp_path, capsys):
        rc = cli.main(["eval", "--seed", "0",
                       "--out", str(tmp_path / "missing")])
        assert rc == 1
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1
        assert err[0].startswith("error: ")

    def test_bad_config_file(self, tmp_path, capsys):
        cfg_path = tmp_path / "bad.cfg"
        cfg_path.write_text("unknown_key=1\n")
        rc = cli.main(["gen-data", "--config", str(cfg_path),
                       "--seed", "0", "--out", str(tmp_path)])
        assert rc == 1
        assert "error: FormatError" in capsys.readouterr().err

    def test_seed_from_config_when_flag_absent(self, tmp_path):
        cfg_path = tmp_path / "run.cfg"
        cfg_path.write_text("seed=11\nn_train_per_class=20\n"
                            "n_test_per_class=10\nn_ood=10\n")
        out = str(tmp_path / "out")
        rc = cli.main(["gen-data", "--config", str(cfg_path), "--out", out])
        assert rc == 0
        a = (tmp_path / "out" / "train.csv").read_bytes()
        harness.cmd_gen_data(ExperimentConfig({"n_train_per_class": 20,
                                               "n_test_per_class": 10,
                                               "n_ood": 10}),
                             11, str(tmp_path / "direct"))
        assert a == (tmp_path / "direct" / "train.csv").read_bytes()


class TestIngestCommand:
    def test_smoke_and_report(self, tmp_path):
        cfg = ExperimentConfig({"task": "ingest", "classes": 3, "dim": 8,
                                "n_per_class": 40, "separation": 12.0,
                                "epochs": 3, "batch_size": 32, "lr": 0.005,
                                "scorer": "msp"})
        out = str(tmp_path)
        harness.cmd_gen_data(cfg, 1, out)
        summary = harness.cmd_ingest(cfg, 1, out)
        assert 0.0 <= summary.auroc <= 1.0
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["metrics"]["auroc"] == summary.auroc
