import csv
import hashlib
from pathlib import Path

import numpy as np
import pytest

from neighborcast import cli
from neighborcast import config as C
from neighborcast import data as D
from neighborcast.errors import ConfigError


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A tiny trained pipeline shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cliwork")
    data_path = root / "tiny.kmtsbin"
    cfg_path = root / "run.toml"
    cfg_path.write_text(
        "[model]\n"
        "input_len = 24\nseg_len = 6\nhorizon = 4\nd_model = 8\n"
        "n_heads = 2\nn_transformer_layers = 1\nshort_layers = 2\n"
        "dilations = [1, 2]\ndiffusion_order = 1\nadaptive_dim = 3\n"
        "[train]\n"
        "lr = 0.01\nbatch_size = 8\nmax_epochs = 1\npatience = 1\nseed = 3\n"
        "steps_per_epoch = 4\n"
        "[forecast]\nk = 5\n")
    assert run_cli("synth", "--nodes", 3, "--steps", 400, "--period", 48,
                   "--motif-len", 24, "--motif-count", 2, "--motif-repeats", 3,
                   "--noise", 0.05, "--seed", 5, "--out", data_path) == 0
    run_dir = root / "run"
    assert run_cli("train", "--config", cfg_path, "--data", data_path,
                   "--out-dir", run_dir) == 0
    store = root / "store.kmtds"
    assert run_cli("build-store", "--config", cfg_path, "--data", data_path,
                   "--checkpoint", run_dir / "checkpoint.kmtw",
                   "--out", store) == 0
    return {"root": root, "data": data_path, "config": cfg_path,
            "run_dir": run_dir, "store": store,
            "checkpoint": run_dir / "checkpoint.kmtw"}


class TestSynthConvert:
    def test_synth_deterministic_checksum(self, tmp_path):
        a = tmp_path / "a.kmtsbin"
        b = tmp_path / "b.kmtsbin"
        argv = ["synth", "--nodes", 2, "--steps", 300, "--period", 48,
                "--motif-count", 0, "--seed", 42]
        assert run_cli(*argv, "--out", a) == 0
        assert run_cli(*argv, "--out", b) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_convert_round_trip(self, tmp_path):
        src = tmp_path / "x.kmtsbin"
        run_cli("synth", "--nodes", 2, "--steps", 100, "--period", 24,
                "--motif-count", 0, "--seed", 1, "--out", src)
        mid = tmp_path / "x.csv"
        back = tmp_path / "y.kmtsbin"
        assert run_cli("convert", src, mid) == 0
        assert run_cli("convert", mid, back) == 0
        assert np.array_equal(D.load_kmtsbin(src).values,
                              D.load_kmtsbin(back).values)

    def test_missing_input_exits_3(self, tmp_path, capsys):
        code = run_cli("convert", tmp_path / "absent.csv", tmp_path / "o.kmtsbin")
        assert code == 3
        assert "absent.csv" in capsys.readouterr().err

    def test_motif_sidecar_written(self, tmp_path):
        out = tmp_path / "m.kmtsbin"
        run_cli("synth", "--nodes", 4, "--steps", 500, "--period", 48,
                "--motif-len", 24, "--motif-count", 2, "--motif-repeats", 3,
                "--seed", 2, "--out", out)
        placements = D.load_placements_csv(tmp_path / "m_motifs.csv")
        assert len(placements) == 6


class TestTrain:
    def test_zero_epoch_dry_run(self, workdir, tmp_path):
        out = tmp_path / "dry"
        code = run_cli("train", "--config", workdir["config"], "--data",
                       workdir["data"], "--epochs", 0, "--patience", 0,
                       "--out-dir", out)
        assert code == 0
        assert (out / "checkpoint.kmtw").exists()
        assert (out / "config.resolved.toml").exists()

    def test_same_seed_identical_checkpoint(self, workdir, tmp_path):
        hashes = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            assert run_cli("train", "--config", workdir["config"], "--data",
                           workdir["data"], "--out-dir", out) == 0
            hashes.append(hashlib.sha256(
                (out / "checkpoint.kmtw").read_bytes()).hexdigest())
        assert hashes[0] == hashes[1]

    def test_all_modes_train(self, workdir, tmp_path):
        for mode in ("long_only", "short_only"):
            out = tmp_path / mode
            code = run_cli("train", "--config", workdir["config"], "--data",
                           workdir["data"], "--mode", mode, "--epochs", 1,
                           "--out-dir", out)
            assert code == 0

    def test_trace_csv_shape(self, workdir):
        rows = list(csv.reader(open(workdir["run_dir"] / "trace.csv")))
        assert rows[0][0] == "epoch"
        assert len(rows) == 2  # header + 1 epoch


class TestBuildStore:
    def test_rebuild_identical(self, workdir, tmp_path):
        out = tmp_path / "s.kmtds"
        for _ in range(2):
            assert run_cli("build-store", "--config", workdir["config"],
                           "--data", workdir["data"],
                           "--checkpoint", workdir["checkpoint"],
                           "--out", out) == 0
        assert out.read_bytes() == workdir["store"].read_bytes()

    def test_fraction_subsample(self, workdir, tmp_path):
        out = tmp_path / "half.kmtds"
        assert run_cli("build-store", "--config", workdir["config"], "--data",
                       workdir["data"], "--checkpoint", workdir["checkpoint"],
                       "--fraction", 0.5, "--subsample-seed", 1,
                       "--out", out) == 0
        from neighborcast import datastore as DS
        full = DS.load_store(workdir["store"])
        half = DS.load_store(out)
        assert half.size == full.size // 2

    def test_stale_overwrite_refused(self, workdir, tmp_path, capsys):
        other_run = tmp_path / "other"
        assert run_cli("train", "--config", workdir["config"], "--data",
                       workdir["data"], "--seed", 99, "--out-dir",
                       other_run) == 0
        code = run_cli("build-store", "--config", workdir["config"], "--data",
                       workdir["data"],
                       "--checkpoint", other_run / "checkpoint.kmtw",
                       "--out", workdir["store"])
        assert code == 2
        assert "--force" in capsys.readouterr().err
        # with --force it succeeds; rebuild the original afterwards
        assert run_cli("build-store", "--config", workdir["config"], "--data",
                       workdir["data"],
                       "--checkpoint", other_run / "checkpoint.kmtw",
                       "--force", "--out", workdir["store"]) == 0
        assert run_cli("build-store", "--config", workdir["config"], "--data",
                       workdir["data"], "--checkpoint", workdir["checkpoint"],
                       "--force", "--out", workdir["store"]) == 0

    def test_ivf_sidecar(self, workdir, tmp_path):
        out = tmp_path / "s.kmtds"
        assert run_cli("build-store", "--config", workdir["config"], "--data",
                       workdir["data"], "--checkpoint", workdir["checkpoint"],
                       "--ivf-nlist", 4, "--out", out) == 0
        assert (tmp_path / "s.kmtdx").exists()


class TestEval:
    def test_paired_reports(self, workdir, tmp_path, capsys):
        with_dir = tmp_path / "with"
        without_dir = tmp_path / "without"
        assert run_cli("eval", "--config", workdir["config"], "--data",
                       workdir["data"], "--checkpoint", workdir["checkpoint"],
                       "--store", workdir["store"], "--out-dir", with_dir) == 0
        out1 = capsys.readouterr().out
        assert "kNN-augmented" in out1
        assert "points/sec/node" in out1
        assert run_cli("eval", "--config", workdir["config"], "--data",
                       workdir["data"], "--checkpoint", workdir["checkpoint"],
                       "--no-store", "--out-dir", without_dir) == 0
        assert "encoder-only" in capsys.readouterr().out

        rows = list(csv.reader(open(with_dir / "eval.csv")))
        assert rows[0] == ["scope", "mae", "rmse", "mape", "count"]
        scopes = [r[0] for r in rows[1:]]
        assert "horizon_3" in scopes and "averaged" in scopes
        preds = list(csv.reader(open(with_dir / "predictions.csv")))
        assert preds[0] == ["node", "end_step", "horizon", "prediction", "label"]
        assert len(preds) > 1

    def test_k_and_alpha_grids(self, workdir, tmp_path):
        out = tmp_path / "grid"
        assert run_cli("eval", "--config", workdir["config"], "--data",
                       workdir["data"], "--checkpoint", workdir["checkpoint"],
                       "--store", workdir["store"], "--k-grid", "1,3,5",
                       "--alpha-grid", "0.1..0.3:0.1", "--out-dir", out) == 0
        krows = list(csv.reader(open(out / "kgrid.csv")))
        assert [r[0] for r in krows] == ["k", "1", "3", "5"]
        arows = list(csv.reader(open(out / "alphagrid.csv")))
        assert len(arows) == 4

    def test_eval_deterministic_outputs(self, workdir, tmp_path):
        dirs = [tmp_path / "e1", tmp_path / "e2"]
        for d in dirs:
            assert run_cli("eval", "--config", workdir["config"], "--data",
                           workdir["data"], "--checkpoint",
                           workdir["checkpoint"], "--store", workdir["store"],
                           "--out-dir", d) == 0
        assert (dirs[0] / "eval.csv").read_bytes() == \
            (dirs[1] / "eval.csv").read_bytes()
        assert (dirs[0] / "predictions.csv").read_bytes() == \
            (dirs[1] / "predictions.csv").read_bytes()

    def test_ivf_eval(self, workdir, tmp_path):
        store = tmp_path / "s.kmtds"
        assert run_cli("build-store", "--config", workdir["config"], "--data",
                       workdir["data"], "--checkpoint", workdir["checkpoint"],
                       "--ivf-nlist", 4, "--out", store) == 0
        out = tmp_path / "ivf_eval"
        assert run_cli("eval", "--config", workdir["config"], "--data",
                       workdir["data"], "--checkpoint", workdir["checkpoint"],
                       "--store", store, "--index", "ivf", "--n-probe", 4,
                       "--out-dir", out) == 0


class TestInspect:
    def test_dump_files(self, workdir, tmp_path, capsys):
        out = tmp_path / "nb.csv"
        ds = D.load_kmtsbin(workdir["data"])
        test_start = ds.n_steps - int(ds.n_steps * 0.2)
        end_step = test_start + 24
        code = run_cli("inspect", "--config", workdir["config"], "--data",
                       workdir["data"], "--checkpoint", workdir["checkpoint"],
                       "--store", workdir["store"], "--node", 1,
                       "--end-step", end_step, "--out", out)
        assert code == 0
        assert out.exists()
        assert (tmp_path / "nb_query.csv").exists()
        assert (tmp_path / "nb_keys.csv").exists()

    def test_out_of_range_end_step(self, workdir, tmp_path, capsys):
        code = run_cli("inspect", "--config", workdir["config"], "--data",
                       workdir["data"], "--checkpoint", workdir["checkpoint"],
                       "--store", workdir["store"], "--node", 0,
                       "--end-step", 5, "--out", tmp_path / "x.csv")
        assert code == 2
        assert "valid global range" in capsys.readouterr().err


class TestRunConfig:
    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("[model]\nwidth = 3\n")
        with pytest.raises(ConfigError, match="unknown key model.width"):
            C.load_run_config(str(p))

    def test_unknown_section_rejected(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("[optimizer]\nlr = 1.0\n")
        with pytest.raises(ConfigError, match="unknown section"):
            C.load_run_config(str(p))

    def test_defaults_match_published_settings(self):
        run = C.load_run_config(None)
        assert run.model.input_len == 2016
        assert run.model.seg_len == 12
        assert run.model.d_model == 96
        assert run.model.n_transformer_layers == 4
        assert run.forecast.k == 50
        assert run.forecast.tau == 1.0
        assert run.forecast.alpha == 0.2
        assert run.train.lr == 0.001
        assert run.train.batch_size == 16

    def test_resolved_round_trips(self, tmp_path):
        run = C.load_run_config(None, {"model": {"d_model": 32}})
        p = tmp_path / "echo.toml"
        p.write_text(run.resolved_toml())
        again = C.load_run_config(str(p))
        assert again == run

    def test_flags_win_over_file(self, tmp_path):
        p = tmp_path / "cfg.toml"
        p.write_text("[train]\nlr = 0.5\n")
        run = C.load_run_config(str(p), {"train": {"lr": 0.25}})
        assert run.train.lr == 0.25
