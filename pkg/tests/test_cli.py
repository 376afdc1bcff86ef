"""Command-line interface: subcommands, exit codes, offline/served parity."""

from __future__ import annotations

import json
import subprocess
import sys

import numpy as np
import pytest
from fastapi.testclient import TestClient

from dosegraph.bundles import load_bundle
from dosegraph.cli import FEATURES_MAGIC, GRAPH_MAGIC, PREDICTION_MAGIC, main
from dosegraph.container import read_container
from dosegraph.conversion import extract_pixel_features, segment_structures
from dosegraph.graph import build_graph
from dosegraph.metrics import case_curves
from dosegraph.model import load_checkpoint, prepare_case
from dosegraph.phantoms import generate_phantom_set
from dosegraph.service import create_app

SMALL_SHAPES = ["--image-shape", "8,8,4", "--dose-shape", "4,4,4"]


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_data")
    rc = main(["gen-phantoms", "--n", "4", "--seed", "9", "--out", str(out), *SMALL_SHAPES])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def cli_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli_config") / "config.json"
    path.write_text(
        json.dumps(
            {
                "hidden_width": 8,
                "ffn_hidden": 8,
                "learning_rates": [0.01],
                "patience": 5,
                "max_epochs": 3,
                "seed": 3,
            }
        )
    )
    return path


@pytest.fixture(scope="module")
def cli_checkpoint(small_data, cli_config, tmp_path_factory):
    path = tmp_path_factory.mktemp("cli_ckpt") / "model.dgp"
    rc = main(["train", "--data", str(small_data), "--config", str(cli_config), "--out", str(path)])
    assert rc == 0
    return path


# ------------------------------------------------------------- gen-phantoms


def test_gen_phantoms_writes_reproducible_bundles(tmp_path, capsys):
    rc = main(["gen-phantoms", "--n", "2", "--seed", "9", "--out", str(tmp_path), *SMALL_SHAPES])
    assert rc == 0
    assert "wrote 2 bundles" in capsys.readouterr().out
    paths = sorted(tmp_path.glob("*.dgb"))
    assert len(paths) == 2
    expected = generate_phantom_set(2, seed=9, image_shape=(8, 8, 4), dose_shape=(4, 4, 4))
    loaded = load_bundle(paths[0])
    assert loaded.case_id == expected[0].case_id
    assert np.array_equal(loaded.image, expected[0].image)
    assert np.array_equal(loaded.dose, expected[0].dose)


def test_gen_phantoms_rejects_bad_shape(tmp_path, capsys):
    rc = main(["gen-phantoms", "--n", "1", "--out", str(tmp_path), "--image-shape", "8,8"])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


# ------------------------------------------------------------------ convert


def test_convert_writes_feature_container(small_data, tmp_path, capsys):
    case_path = sorted(small_data.glob("*.dgb"))[0]
    out = tmp_path / "case.features"
    rc = main(["convert", "--case", str(case_path), "--out", str(out)])
    assert rc == 0
    assert "provided masks" in capsys.readouterr().out
    header, arrays = read_container(out, FEATURES_MAGIC)
    case = load_bundle(case_path)
    assert header["kind"] == "features"
    assert header["case_id"] == case.case_id
    masks = segment_structures(case)
    features = extract_pixel_features(masks, case.image_geom)
    assert np.array_equal(arrays["features"], features.values)
    assert np.array_equal(arrays["masks"], masks.masks.astype(np.float32))


def test_convert_default_output_path(small_data):
    case_path = sorted(small_data.glob("*.dgb"))[1]
    rc = main(["convert", "--case", str(case_path)])
    assert rc == 0
    assert case_path.with_suffix(".features").exists()


# -------------------------------------------------------------- build-graph


def test_build_graph_exports_all_tensors(small_data, tmp_path, capsys):
    case_path = sorted(small_data.glob("*.dgb"))[0]
    out = tmp_path / "case.graph"
    rc = main(["build-graph", "--case", str(case_path), "--out", str(out)])
    assert rc == 0
    assert "image-dose edges" in capsys.readouterr().out

    case = load_bundle(case_path)
    masks = segment_structures(case)
    features = extract_pixel_features(masks, case.image_geom)
    graph = build_graph(case, features, masks, threshold=0.3)

    header, arrays = read_container(out, GRAPH_MAGIC)
    assert header["kind"] == "graph"
    assert header["num_image_nodes"] == graph.num_image_nodes
    assert header["num_dose_nodes"] == graph.num_dose_nodes
    assert header["num_edges"] == graph.edge_dose.shape[0]
    assert np.array_equal(arrays["edge_dose"], graph.edge_dose)
    assert np.array_equal(arrays["edge_image"], graph.edge_image)
    assert np.array_equal(arrays["dose_features"], graph.dose_features)
    assert np.array_equal(arrays["targets"], graph.targets)


def test_build_graph_rejects_bad_threshold(small_data, capsys):
    case_path = sorted(small_data.glob("*.dgb"))[0]
    rc = main(["build-graph", "--case", str(case_path), "--threshold", "0.0"])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


# -------------------------------------------------------------------- train


def test_train_writes_checkpoint_and_log(cli_checkpoint, capsys):
    store, config, model_kind = load_checkpoint(cli_checkpoint)
    assert model_kind == "dose_gnn"
    assert config.hidden_width == 8
    log_text = (cli_checkpoint.parent / (cli_checkpoint.name + ".log")).read_text()
    assert log_text.startswith("seed=3\n")
    assert "chosen_lr=" in log_text


def test_train_mlp_model_flag(small_data, cli_config, tmp_path, capsys):
    out = tmp_path / "mlp.dgp"
    rc = main(["train", "--data", str(small_data), "--config", str(cli_config), "--model", "mlp", "--out", str(out)])
    assert rc == 0
    assert "chosen lr" in capsys.readouterr().out
    _, _, model_kind = load_checkpoint(out)
    assert model_kind == "mlp_baseline"


def test_train_seed_override(small_data, cli_config, tmp_path):
    out = tmp_path / "seeded.dgp"
    rc = main(
        ["train", "--data", str(small_data), "--config", str(cli_config), "--seed", "12", "--model", "mlp", "--out", str(out)]
    )
    assert rc == 0
    _, config, _ = load_checkpoint(out)
    assert config.seed == 12


def test_train_empty_directory_fails(tmp_path, capsys):
    rc = main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "x.dgp")])
    assert rc == 1
    assert "no case bundles" in capsys.readouterr().err


# ------------------------------------------------------------------ predict


def test_predict_writes_prediction_container(small_data, cli_checkpoint, tmp_path, capsys):
    case_path = sorted(small_data.glob("*.dgb"))[0]
    out = tmp_path / "case.pred"
    rc = main(["predict", "--case", str(case_path), "--checkpoint", str(cli_checkpoint), "--out", str(out)])
    assert rc == 0
    assert "mse" in capsys.readouterr().out
    header, arrays = read_container(out, PREDICTION_MAGIC)
    case = load_bundle(case_path)
    assert header["kind"] == "prediction"
    assert header["model"] == "dose_gnn"
    assert header["prompt_text"] == ""
    assert arrays["predicted"].shape == (np.prod(case.dose_geom.shape),)
    assert np.all(np.isfinite(arrays["predicted"]))


def test_predict_prompt_text_changes_output(small_data, cli_checkpoint, tmp_path):
    case_path = sorted(small_data.glob("*.dgb"))[0]
    plain = tmp_path / "plain.pred"
    boosted = tmp_path / "boost.pred"
    assert main(["predict", "--case", str(case_path), "--checkpoint", str(cli_checkpoint), "--out", str(plain)]) == 0
    assert (
        main(
            [
                "predict",
                "--case", str(case_path),
                "--checkpoint", str(cli_checkpoint),
                "--prompt-text", "boost_ptv",
                "--out", str(boosted),
            ]
        )
        == 0
    )
    _, a = read_container(plain, PREDICTION_MAGIC)
    _, b = read_container(boosted, PREDICTION_MAGIC)
    assert not np.array_equal(a["predicted"], b["predicted"])


def test_predict_missing_checkpoint_fails(small_data, tmp_path, capsys):
    case_path = sorted(small_data.glob("*.dgb"))[0]
    rc = main(["predict", "--case", str(case_path), "--checkpoint", str(tmp_path / "nope.dgp")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_cli_predictions_match_served_curves(phantom_cases, gnn_checkpoint, bundle_dir, tmp_path, monkeypatch):
    monkeypatch.delenv("DOSEGRAPH_EMBED_URL", raising=False)
    case = phantom_cases[1]
    out = tmp_path / "case.pred"
    rc = main(
        [
            "predict",
            "--case", str(bundle_dir / f"{case.case_id}.dgb"),
            "--checkpoint", str(gnn_checkpoint),
            "--prompt-text", "boost_ptv",
            "--out", str(out),
        ]
    )
    assert rc == 0
    _, arrays = read_container(out, PREDICTION_MAGIC)

    _, config, _ = load_checkpoint(gnn_checkpoint)
    _, masks = prepare_case(case, config)
    pairs = case_curves(case, masks, arrays["predicted"].reshape(case.dose_geom.shape))

    client = TestClient(create_app(gnn_checkpoint, bundle_dir))
    session = client.post("/sessions", json={"case_id": case.case_id}).json()
    served = client.post(f"/sessions/{session['session_id']}/instruct", json={"text": "boost_ptv"}).json()
    assert len(served["curves"]) == len(pairs)
    for got, pair in zip(served["curves"], pairs):
        assert got["slot"] == pair.slot
        assert got["predicted"] == [float(x) for x in pair.predicted.values]


# ------------------------------------------------------- evaluate and cv


def test_evaluate_writes_report(small_data, cli_checkpoint, tmp_path, capsys):
    report = tmp_path / "report"
    rc = main(["evaluate", "--data", str(small_data), "--checkpoint", str(cli_checkpoint), "--report-dir", str(report)])
    assert rc == 0
    assert "evaluated 4 cases" in capsys.readouterr().out
    lines = (report / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("fold,model,mse")
    assert lines[1].startswith("0,dose_gnn,")
    assert len(lines) == 4  # header, one pseudo-fold, mean, sd
    assert list(report.glob("cdvh_*.csv"))
    assert list(report.glob("cdvh_*.svg"))


def test_cv_writes_report(small_data, cli_config, tmp_path, capsys):
    report = tmp_path / "cv_report"
    rc = main(
        [
            "cv",
            "--data", str(small_data),
            "--k", "2",
            "--model", "mlp",
            "--config", str(cli_config),
            "--report-dir", str(report),
        ]
    )
    assert rc == 0
    assert "cv (2 folds, mlp_baseline)" in capsys.readouterr().out
    lines = (report / "metrics.csv").read_text().splitlines()
    assert len(lines) == 5  # header, 2 folds, mean, sd
    assert lines[1].startswith("0,mlp_baseline,")
    assert lines[2].startswith("1,mlp_baseline,")


# -------------------------------------------------------------------- serve


def test_serve_invokes_uvicorn_with_app(gnn_checkpoint, bundle_dir, monkeypatch):
    import uvicorn

    calls = {}

    def fake_run(app, host, port, log_level):
        calls["app"] = app
        calls["host"] = host
        calls["port"] = port

    monkeypatch.setattr(uvicorn, "run", fake_run)
    rc = main(
        ["serve", "--checkpoint", str(gnn_checkpoint), "--data", str(bundle_dir), "--addr", "127.0.0.1:9191"]
    )
    assert rc == 0
    assert calls["host"] == "127.0.0.1"
    assert calls["port"] == 9191
    assert calls["app"].title == "dosegraph console"


def test_serve_reads_config_file(gnn_checkpoint, bundle_dir, tmp_path, monkeypatch):
    import uvicorn

    calls = {}
    monkeypatch.setattr(uvicorn, "run", lambda app, host, port, log_level: calls.update(host=host, port=port))
    cfg = tmp_path / "serve.json"
    cfg.write_text(json.dumps({"checkpoint": str(gnn_checkpoint), "data": str(bundle_dir), "addr": "0.0.0.0:7777"}))
    rc = main(["serve", "--config", str(cfg)])
    assert rc == 0
    assert calls == {"host": "0.0.0.0", "port": 7777}


def test_serve_requires_checkpoint_and_data(capsys):
    assert main(["serve", "--data", "somewhere"]) == 1
    assert "needs --checkpoint" in capsys.readouterr().err
    assert main(["serve", "--checkpoint", "somewhere"]) == 1
    assert "needs --data" in capsys.readouterr().err


# ----------------------------------------------------------------- plumbing


def test_unknown_command_exits_with_usage():
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2


def test_module_entry_point_help():
    proc = subprocess.run(
        [sys.executable, "-m", "dosegraph.cli", "--help"],
        capture_output=True,
        text=True,
        timeout=60,
    )
    assert proc.returncode == 0
    assert "dose prediction on image-dose graphs" in proc.stdout
