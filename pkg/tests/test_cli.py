import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latentsde.cli import main
from latentsde.config import ExperimentConfig
from latentsde.errors import InvalidInputError, NotFoundError
from latentsde.pipeline import dimsearch, run_experiment

TINY = ["--steps", "120", "--epochs", "3", "--val-size", "20", "--enc-hidden", "8",
        "--dec-hidden", "8", "--drift-hidden", "4", "--n", "6"]


def tiny_config(**training):
    cfg = ExperimentConfig()
    cfg.dataset.steps, cfg.dataset.n = 120, 6
    cfg.model.enc_hidden = cfg.model.dec_hidden = [8]
    cfg.model.drift_hidden = [4]
    cfg.training.epochs, cfg.training.val_size = 3, 20
    for k, v in training.items():
        setattr(cfg.training, k, v)
    return cfg


# ---------------------------------------------------------------- config

def test_config_defaults_echo_seeds():
    data = json.loads(ExperimentConfig().to_json())
    assert data["dataset"]["seed"] == 0 and data["dataset"]["map_seed"] == 0
    assert data["model"]["seed"] == 0 and data["training"]["seed"] == 0


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["ou2d", "ou1d", "gbm1d"]), st.integers(0, 2**31), st.floats(1e-4, 1.0),
       st.lists(st.integers(1, 64), max_size=3), st.booleans(), st.sampled_from(["auto", "on", "off"]))
def test_config_json_roundtrip(spec, seed, tau, hidden, diag, rescale):
    cfg = ExperimentConfig()
    cfg.dataset.spec, cfg.dataset.seed, cfg.dataset.rescale = spec, seed, rescale
    cfg.model.tau, cfg.model.enc_hidden, cfg.model.diffusion_diag = tau, hidden, diag
    back = ExperimentConfig.from_json(cfg.to_json())
    assert back == cfg
    assert back.hash() == cfg.hash()


def test_config_rejects_unknown_fields_and_bad_values():
    with pytest.raises(InvalidInputError):
        ExperimentConfig.from_dict({"model": {"width": 3}})
    with pytest.raises(InvalidInputError):
        ExperimentConfig.from_dict({"optimizer": {}})
    with pytest.raises(InvalidInputError):
        ExperimentConfig.from_json("[1, 2]")
    cfg = ExperimentConfig()
    cfg.dataset.spec = "nope"
    with pytest.raises(NotFoundError):
        cfg.validate()
    cfg = ExperimentConfig()
    cfg.training.decay = 1.5
    with pytest.raises(InvalidInputError):
        cfg.validate()


def test_config_hash_tracks_content():
    a, b = ExperimentConfig(), ExperimentConfig()
    assert a.hash() == b.hash()
    b.training.seed = 1
    assert a.hash() != b.hash()


def test_rescale_auto_only_for_raster():
    cfg = ExperimentConfig()
    assert not cfg.dataset.rescale_enabled()
    cfg.dataset.map = "raster_ball"
    assert cfg.dataset.rescale_enabled()


# ---------------------------------------------------------------- subcommands

def test_crlb_command(capsys):
    assert main(["crlb", "--d", "2", "--dt", "0.01", "--N", "1000"]) == 0
    assert capsys.readouterr().out.strip() == "0.2"


def test_invalid_spec_exit_code_names_catalog(tmp_path, capsys):
    assert main(["run", "--spec", "nope", "--out", str(tmp_path / "r")]) == 2
    err = capsys.readouterr().err
    assert "nope" in err and "ou2d" in err and "gbm1d" in err


def test_generate_train_evaluate(tmp_path, capsys):
    data, model = tmp_path / "data", tmp_path / "model"
    assert main(["generate", "--spec", "ou2d", "--map", "random_smooth", "--n", "6", "--steps", "150",
                 "--dt", "0.01", "--noise", "none", "--seed", "7", "--out", str(data)]) == 0
    assert (data / "meta.json").exists() and (data / "pairs.bin").exists()
    assert main(["train", "--data", str(data), "--d", "2", "--tau", "0.01", "--nu", "0",
                 "--epochs", "4", "--seed", "3", "--val-size", "30", "--enc-hidden", "8",
                 "--dec-hidden", "8", "--out", str(model)]) == 0
    with open(model / "loss_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "entropy", "prior", "transition", "reconstruction", "l1",
                             "total", "val_total"]
    assert len(rows) == 4
    table = tmp_path / "results.csv"
    for _ in range(2):
        assert main(["evaluate", "--data", str(data), "--model", str(model), "--csv", str(table)]) == 0
    metrics = json.loads((model / "metrics.json").read_text())
    assert metrics["provenance"]["seeds"] == {"dataset": 7, "map": 0, "model": 3, "training": 3}
    assert metrics["crlb"] == pytest.approx(2 / (0.01 * 150))
    with open(table) as fh:
        lines = list(csv.reader(fh))
    assert lines[0] == ["dataset", "sde", "L_latent", "L_mu", "CRLB", "recon_mse"]
    assert len(lines) == 3 and lines[1][:2] == ["random_smooth", "ou2d"]


def test_evaluate_wrong_latent_size_is_infeasible(tmp_path, capsys):
    data, model = tmp_path / "data", tmp_path / "model"
    main(["generate", "--n", "6", "--steps", "100", "--out", str(data)])
    main(["train", "--data", str(data), "--d", "3", "--epochs", "1", "--val-size", "10",
          "--out", str(model)])
    assert main(["evaluate", "--data", str(data), "--model", str(model)]) == 4


def test_diverged_training_exit_code(tmp_path, capsys):
    data = tmp_path / "data"
    main(["generate", "--n", "6", "--steps", "100", "--out", str(data)])
    code = main(["train", "--data", str(data), "--tau", "1e-320", "--epochs", "2", "--val-size", "10",
                 "--out", str(tmp_path / "m")])
    assert code == 3
    assert "reconstruction" in capsys.readouterr().err


def test_run_stage_is_named_on_failure(tmp_path, capsys):
    code = main(["run", *TINY, "--tau", "1e-320", "--out", str(tmp_path / "r")])
    assert code == 3
    assert "train stage" in capsys.readouterr().err
    assert (tmp_path / "r" / "dataset" / "meta.json").exists()  # partial outputs kept


def test_run_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["run", *TINY, "--out", str(tmp_path / name)]) == 0
    a = (tmp_path / "a" / "metrics.json").read_bytes()
    assert a == (tmp_path / "b" / "metrics.json").read_bytes()
    assert b"time" not in a


def test_run_output_reconstructible_from_embedded_config(tmp_path):
    run_experiment(tiny_config(), tmp_path / "a")
    cfg = ExperimentConfig.load(tmp_path / "a" / "config.json")
    run_experiment(cfg, tmp_path / "b")
    for name in ("metrics.json", "loss_log.csv", "model/params.bin", "dataset/pairs.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_repeat_writes_mean_and_std(tmp_path, monkeypatch):
    monkeypatch.setenv("LSDE_THREADS", "2")
    summary = run_experiment(tiny_config(), tmp_path, repeat=3)
    with open(tmp_path / "metrics.csv") as fh:
        rows = {r["metric"]: r for r in csv.DictReader(fh)}
    assert set(rows) == {"L_latent", "L_mu", "reconstruction_mse", "crlb"}
    for r in rows.values():
        assert np.isfinite(float(r["mean"])) and np.isfinite(float(r["std"])) and r["count"] == "3"
    assert float(rows["L_latent"]["std"]) > 0
    seeds = [json.loads((tmp_path / f"run_{i:03d}" / "metrics.json").read_text())["provenance"]["seeds"]
             for i in range(3)]
    assert [s["training"] for s in seeds] == [0, 1, 2]
    assert {s["dataset"] for s in seeds} == {0}
    assert summary["repeat"] == 3


def test_repeat_parallel_matches_serial(tmp_path):
    a = run_experiment(tiny_config(), tmp_path / "serial", repeat=2, workers=1)
    b = run_experiment(tiny_config(), tmp_path / "parallel", repeat=2, workers=2)
    assert a == b


def test_bad_thread_env(tmp_path, monkeypatch):
    monkeypatch.setenv("LSDE_THREADS", "zero")
    with pytest.raises(InvalidInputError):
        run_experiment(tiny_config(), tmp_path, repeat=2)


def test_dimsearch_linear_selects_three(tmp_path, capsys):
    code = main(["dimsearch", "--spec", "ou3d", "--map", "linear", "--n", "6", "--steps", "1000",
                 "--mode", "linear_likelihood", "--candidates", "1,2,3,4,5", "--out", str(tmp_path)])
    assert code == 0
    out = capsys.readouterr().out
    assert "selected dimension: 3" in out
    assert json.loads((tmp_path / "dimsearch.json").read_text())["selected"] == 3


def test_dimsearch_single_candidate():
    cfg = ExperimentConfig()
    cfg.dataset.spec, cfg.dataset.map, cfg.dataset.n = "ou3d", "linear", 6
    cfg.evaluation.dimsearch_mode, cfg.evaluation.candidates = "linear_likelihood", [3]
    assert dimsearch(cfg).selected == 3


def test_dimsearch_linear_refuses_nonlinear_map(capsys):
    code = main(["dimsearch", "--steps", "200", "--mode", "linear_likelihood"])
    assert code == 2
    assert "linear" in capsys.readouterr().err


def test_dimsearch_diag_reports_diagonals(capsys):
    code = main(["dimsearch", *TINY, "--mode", "diag_heuristic", "--candidates", "3"])
    assert code == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "candidate,count_above,D1,D2,D3"
    assert out[-1].startswith("selected dimension:")


def test_lamperti_check_csv(capsys):
    assert main(["lamperti-check", "--spec", "gbm1d", "--base-point", "1", "--count", "4"]) == 0
    captured = capsys.readouterr()
    rows = list(csv.DictReader(captured.out.splitlines()))
    assert len(rows) == 5
    assert all(float(r["curl_residual"]) == 0.0 for r in rows)
    assert all(float(r["roundtrip"]) <= 1e-10 for r in rows)
    assert "reducible=True" in captured.err


def test_lamperti_check_singular_base(capsys):
    assert main(["lamperti-check", "--spec", "gbm1d", "--count", "2"]) == 0
    captured = capsys.readouterr()
    rows = list(csv.DictReader(captured.out.splitlines()))
    assert rows[0]["singular"] == "1"
    assert "reducible=False" in captured.err


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "latentsde.cli", "crlb", "--d", "4", "--dt", "0.01",
                          "--N", "1000"], capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "0.4"


def test_argparse_error_exit_code():
    with pytest.raises(SystemExit) as info:
        main(["crlb", "--d", "two", "--dt", "0.1", "--N", "3"])
    assert info.value.code == 2
