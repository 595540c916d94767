import csv
import json

import numpy as np
import pytest

from vdecomp.cli import main
from vdecomp.config import OUTPUT_ENV, SCHEMA, ConfigError, defaults, parse_config
from vdecomp.metrics import psnr
from vdecomp.tasks import load_dataset

TINY_FLAGS = ["--depth", "1", "--channels", "8", "--groups", "4", "--r0", "4"]


def write_ini(path, text):
    path.write_text(text)
    return path


class TestConfig:
    def test_documented_defaults(self):
        cfg = parse_config(env={})
        m, t, a = cfg.model, cfg.train, cfg.adapt
        assert (m.depth, m.kernel, m.channels, m.groups, m.r0, m.norm) == (8, 3, 32, 8, 8, "group")
        assert (t.epochs, t.batch_size, t.lr, t.lr_decay_factor, t.lr_decay_every) == (60, 8, 1e-4, 0.5, 20)
        assert (a.mode.value, a.lr, a.batch_size, a.max_steps, a.patience) == ("S", 1e-6, 1, 20, 2)
        h = cfg.hyper
        assert (h.alpha0_gamma, h.beta0_gamma, h.beta0_lambda, h.sigma0) == (2.0, 1e-6, 1e-8, 1.0)
        assert cfg.run["threshold"] is None

    def test_flag_overrides_file(self, tmp_path):
        ini = write_ini(tmp_path / "c.ini", "[model]\nr0 = 8\ndepth = 3\n")
        cfg = parse_config(ini, {("model", "r0"): "4"}, env={})
        assert cfg.model.r0 == 4 and cfg.model.depth == 3

    def test_file_overrides_default(self, tmp_path):
        ini = write_ini(tmp_path / "c.ini", "[train]\nlr = 0.002  # inline comment\n")
        assert parse_config(ini, env={}).train.lr == 0.002

    def test_env_between_file_and_flags(self, tmp_path):
        ini = write_ini(tmp_path / "c.ini", "[run]\noutput_dir = from_file\n")
        assert parse_config(ini, env={OUTPUT_ENV: "from_env"}).run["output_dir"] == "from_env"
        assert parse_config(ini, {"output_dir": "from_flag"}, env={OUTPUT_ENV: "from_env"}).run["output_dir"] == "from_flag"

    def test_zero_rank_names_key(self):
        with pytest.raises(ConfigError, match="r0"):
            parse_config(overrides={"model.r0": "0"}, env={})

    @pytest.mark.parametrize("text,name", [("[model]\nwidth = 3\n", "model.width"), ("[extras]\nx = 1\n", "extras")])
    def test_unknown_rejected(self, tmp_path, text, name):
        with pytest.raises(ConfigError, match=name):
            parse_config(write_ini(tmp_path / "c.ini", text), env={})

    @pytest.mark.parametrize(
        "name,raw",
        [("train.lr", "-1"), ("model.kernel", "4"), ("model.groups", "5"), ("run.sigma_min", "0.5"), ("adapt.mode", "Q"), ("train.epochs", "two")],
    )
    def test_invalid_values(self, name, raw):
        with pytest.raises(ConfigError) as info:
            parse_config(overrides={name: raw}, env={})
        assert name.split(".")[0] in str(info.value)

    def test_ambiguous_bare_key(self):
        with pytest.raises(ConfigError, match="ambiguous"):
            parse_config(overrides={"lr": "1"}, env={})

    def test_inf_patience(self):
        assert parse_config(overrides={"adapt.patience": "inf"}, env={}).adapt.patience == float("inf")

    def test_ini_round_trip(self, tmp_path):
        cfg = parse_config(overrides={"model.r0": "5", "train.lr": "0.003", "adapt.patience": "inf"}, env={})
        again = parse_config(write_ini(tmp_path / "e.ini", cfg.to_ini()), env={})
        assert again.values == cfg.values

    def test_schema_defaults_table(self):
        d = defaults()
        assert d.keys() == SCHEMA.keys()
        assert all(d[s].keys() == SCHEMA[s].keys() for s in SCHEMA)


class TestCliParsing:
    def test_flag_beats_file(self, tmp_path, capsys):
        ini = write_ini(tmp_path / "c.ini", "[model]\nr0 = 8\n")
        assert main(["--config", str(ini), "--r0", "4", "--print-config"]) == 0
        assert "r0 = 4" in capsys.readouterr().out

    def test_zero_rank_exit_code(self, capsys):
        assert main(["--r0", "0", "--print-config"]) == 2
        assert "r0" in capsys.readouterr().err

    def test_adapt_flags_are_prefixed(self, capsys):
        assert main(["--adapt-lr", "0.01", "--lr", "0.5", "--print-config"]) == 0
        text = capsys.readouterr().out
        adapt_block = text.split("[adapt]")[1].split("[")[0]
        train_block = text.split("[train]")[1].split("[")[0]
        assert "lr = 0.01" in adapt_block and "lr = 0.5" in train_block

    @pytest.mark.parametrize("command", ["decompose", "solve", "diagnose", "adapt-online"])
    def test_threshold_required(self, tmp_path, command, capsys):
        code = main([command, "--input", str(tmp_path), "--data", str(tmp_path), "--checkpoint", str(tmp_path / "m.ckpt"), "--output-dir", str(tmp_path / "o")])
        assert code == 2
        assert "threshold" in capsys.readouterr().err

    def test_missing_checkpoint_is_runtime_error(self, tmp_path, capsys):
        assert main(["eval-denoise", "--data", str(tmp_path), "--checkpoint", str(tmp_path / "nope.ckpt"), "--output-dir", str(tmp_path / "o")]) == 1


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small dataset and a briefly trained tiny model, shared by the pipeline tests."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--task", "den", "--n", "16", "--size", "16", "--sigma", "0.1", "--output-dir", str(root / "data")]) == 0
    assert main(["train", "--data", str(root / "data"), *TINY_FLAGS, "--epochs", "2", "--lr", "1e-3", "--sigma0", "1e4", "--output-dir", str(root / "train")]) == 0
    return root


class TestPipeline:
    def test_synth_pairs_and_rerun_identical(self, workspace, tmp_path):
        ds = load_dataset(workspace / "data")
        assert ds.Y.shape == ds.U.shape == (16, 1, 16, 16)
        assert np.all(ds.sigma == 0.1)
        assert main(["synth", "--task", "den", "--n", "16", "--size", "16", "--sigma", "0.1", "--output-dir", str(tmp_path)]) == 0
        for f in (workspace / "data").glob("*.npy"):
            assert f.read_bytes() == (tmp_path / f.name).read_bytes()
        assert (tmp_path / "manifest.json").read_bytes() == (workspace / "data" / "manifest.json").read_bytes()

    def test_train_outputs(self, workspace):
        out = workspace / "train"
        rows = list(csv.DictReader((out / "history.csv").open()))
        assert len(rows) == 2
        assert (out / "model.ckpt").exists()
        cfg = parse_config(out / "effective_config.ini", env={})
        assert cfg.model.r0 == 4 and cfg.hyper.sigma0 == 1e4

    def test_decompose_components_sum_to_input(self, workspace, tmp_path, capsys):
        code = main(["decompose", "--checkpoint", str(workspace / "train" / "model.ckpt"), "--input", str(workspace / "data" / "Y.npy"), "--threshold", "0.1", "--output-dir", str(tmp_path)])
        assert code == 0
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert summary["images"] == 16
        Y = np.load(workspace / "data" / "Y.npy")
        for i in range(16):
            parts = [np.load(tmp_path / "components" / f"{i:04d}_{c}.npy") for c in "LSN"]
            assert np.abs(sum(parts) - Y[i]).max() <= 1e-6
        records = [json.loads(line) for line in (tmp_path / "decompose.jsonl").open()]
        assert len(records) == 16
        assert {"image_id", "seed", "losses", "rank_indicator", "threshold", "gamma_mean", "files"} <= records[0].keys()
        assert all(0 <= np.min(r["rank_indicator"]) and np.max(r["rank_indicator"]) <= 4 for r in records)

    def test_eval_denoise_matches_offline(self, workspace, tmp_path):
        assert main(["eval-denoise", "--checkpoint", str(workspace / "train" / "model.ckpt"), "--data", str(workspace / "data"), "--output-dir", str(tmp_path)]) == 0
        rows = list(csv.DictReader((tmp_path / "metrics.csv").open()))
        assert [r["image_id"] for r in rows] == [f"{i:04d}" for i in range(16)]
        denoised = np.load(tmp_path / "denoised.npy")
        U = load_dataset(workspace / "data").U
        offline = np.mean([psnr(denoised[i], U[i]) for i in range(16)])
        csv_mean = np.mean([float(r["psnr"]) for r in rows])
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert csv_mean == pytest.approx(offline, abs=1e-9)
        assert summary["mean_psnr"] == pytest.approx(offline, abs=1e-9)

    def test_diagnose_and_adapt(self, workspace, tmp_path):
        ckpt = str(workspace / "train" / "model.ckpt")
        assert main(["diagnose", "--checkpoint", ckpt, "--data", str(workspace / "data"), "--threshold", "0.1", "--output-dir", str(tmp_path / "d")]) == 0
        sig = list(csv.DictReader((tmp_path / "d" / "signatures.csv").open()))
        assert len(sig) == 16 and all(np.isfinite(float(r["l_rank"])) for r in sig)
        hist = list(csv.DictReader((tmp_path / "d" / "gamma_hist.csv").open()))
        assert sum(int(r["count"]) for r in hist) == 16 * 4
        assert main(["adapt", "--checkpoint", ckpt, "--data", str(workspace / "data"), "--adapt-max-steps", "2", "--adapt-lr", "1e-4", "--output-dir", str(tmp_path / "a")]) == 0
        assert (tmp_path / "a" / "adapted.ckpt").exists()
        assert len(list(csv.DictReader((tmp_path / "a" / "adapt_history.csv").open()))) == 2

    def test_solve_writes_trace(self, tmp_path):
        rng = np.random.default_rng(0)
        Y = rng.normal(size=(12, 1)) @ rng.normal(size=(1, 12))
        np.save(tmp_path / "y.npy", Y)
        code = main(["solve", "--input", str(tmp_path / "y.npy"), "--r0", "3", "--outer-iters", "3", "--threshold", "0.05", "--output-dir", str(tmp_path / "o")])
        assert code == 0
        trace = list(csv.DictReader((tmp_path / "o" / "trace.csv").open()))
        assert trace and list(trace[0].keys()) == ["image_id", "channel", "round", "negative_elbo"]
        parts = [np.load(tmp_path / "o" / "components" / f"y_{c}.npy") for c in "LSN"]
        assert parts[0].shape == (1, 12, 12)
        assert np.abs(sum(parts)[0] - Y).max() <= 1e-9
