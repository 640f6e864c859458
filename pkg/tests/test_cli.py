"""CLI contracts on tiny configurations: exit codes, artifacts, determinism."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from volpose.cli import main
from volpose.fileio import load_pose, load_volume


def digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


GEN_ARGS = [
    "phantom-gen", "--n-train", "3", "--n-test", "2", "--size", "48",
    "--seed", "11", "--noise-mult", "0.05", "--shadow-prob", "0.0",
]

TRAIN_ARGS = [
    "train", "--epochs", "1", "--depth", "1", "--base-channels", "2",
    "--input-scale", "1.0", "--sigma", "2.0", "--seed", "3", "--no-save-epochs",
]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(GEN_ARGS + ["--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def model(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("model")
    assert main(TRAIN_ARGS + ["--data", str(dataset), "--out", str(out)]) == 0
    return out / "model"


def test_phantom_gen_counts_and_manifest(dataset):
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert manifest["n_train"] == 3 and manifest["n_test"] == 2
    assert len(manifest["cases"]) == 5
    assert "config_hash" in manifest


def test_phantom_gen_deterministic(tmp_path, dataset):
    rerun = tmp_path / "again"
    assert main(GEN_ARGS + ["--out", str(rerun)]) == 0
    assert digest(rerun / "manifest.json") == digest(dataset / "manifest.json")
    for case in json.loads((dataset / "manifest.json").read_text())["cases"]:
        a = (dataset / case["volume"]).with_suffix(".raw")
        b = (rerun / case["volume"]).with_suffix(".raw")
        assert digest(a) == digest(b)


def test_train_writes_model_and_curve(dataset, model):
    assert (model / "graph.json").exists()
    assert (model / "params.bin").exists()
    assert (model / "manifest.json").exists()
    curve = (model.parent / "loss_curve.csv").read_text().splitlines()
    assert curve[0].startswith("# ")
    assert curve[1] == "epoch,step,loss"
    assert len(curve) == 2 + 3  # three train cases, one epoch


def test_train_missing_dataset_exits_2(tmp_path):
    rc = main(TRAIN_ARGS + ["--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "m")])
    assert rc == 2


def test_infer_emits_pose_per_volume(dataset, model, tmp_path):
    out = tmp_path / "pred"
    assert main([
        "infer", "--model", str(model), "--data", str(dataset),
        "--split", "test", "--out", str(out), "--floor", "0.0",
    ]) == 0
    poses = sorted(out.glob("*_pose.json"))
    assert len(poses) == 2
    pose, doc = load_pose(poses[0])
    assert doc["spacing_mm"] == [1.0, 1.0, 1.0]  # propagated from input header
    assert "config_hash" in doc


def test_infer_dump_heatmaps(dataset, model, tmp_path):
    out = tmp_path / "pred_hm"
    assert main([
        "infer", "--model", str(model), "--data", str(dataset),
        "--split", "test", "--out", str(out), "--dump-heatmaps", "--floor", "0.0",
    ]) == 0
    channels = sorted(out.glob("test_0000_ch*.raw"))
    assert len(channels) == 16
    vol, spacing = load_volume(channels[0].with_suffix(""))
    assert vol.shape == (48, 48, 48)


def test_refine_zero_iterations_matches_infer(dataset, model, tmp_path):
    lib = tmp_path / "library.json"
    assert main(["build-library", "--data", str(dataset), "--out", str(lib)]) == 0
    infer_out = tmp_path / "plain"
    refine_out = tmp_path / "refined0"
    assert main([
        "infer", "--model", str(model), "--data", str(dataset),
        "--split", "test", "--out", str(infer_out), "--floor", "0.0",
    ]) == 0
    assert main([
        "refine", "--model", str(model), "--data", str(dataset), "--split", "test",
        "--library", str(lib), "--out", str(refine_out),
        "--iterations", "0", "--floor", "0.0", "--k", "3",
    ]) == 0
    for pose_file in infer_out.glob("*_pose.json"):
        a, _ = load_pose(pose_file)
        b, doc = load_pose(refine_out / pose_file.name)
        np.testing.assert_allclose(a.xyz_mm, b.xyz_mm, atol=1e-9)
        assert doc["declined"] is False


def test_refine_flags_declined_cases(dataset, model, tmp_path):
    lib = tmp_path / "library.json"
    assert main(["build-library", "--data", str(dataset), "--out", str(lib)]) == 0
    out = tmp_path / "declined"
    # an untrained net cannot reach confidence 1e9: every case declines
    assert main([
        "refine", "--model", str(model), "--data", str(dataset), "--split", "test",
        "--library", str(lib), "--out", str(out),
        "--iterations", "2", "--floor", "1e9", "--k", "3",
    ]) == 0
    docs = [json.loads(p.read_text()) for p in out.glob("*_pose.json")]
    assert all(d["declined"] for d in docs)
    summary = json.loads((out / "refine_summary.json").read_text())
    assert summary["n_declined"] == 2


def test_eval_perfect_predictions(dataset, tmp_path):
    gt_dir = dataset / "cases"
    out = tmp_path / "eval"
    assert main([
        "eval", "--pred", str(gt_dir), "--gt", str(gt_dir), "--out", str(out),
    ]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["mean_distance_mm"] == 0.0
    assert report["mean_auc_percent"] == 100.0
    table = (out / "distance_table.csv").read_text().splitlines()
    assert table[1].split(",") == ["metric"] + [f"L{j}" for j in range(1, 17)] + ["mean"]


def test_eval_reports_reproducible(dataset, tmp_path):
    gt_dir = dataset / "cases"
    outs = [tmp_path / "e1", tmp_path / "e2"]
    for out in outs:
        assert main(["eval", "--pred", str(gt_dir), "--gt", str(gt_dir), "--out", str(out)]) == 0
    for name in ("report.json", "distance_table.csv", "auc_table.csv", "pck_curve.csv"):
        assert digest(outs[0] / name) == digest(outs[1] / name)


def test_eval_missing_dirs_exit_2(tmp_path):
    assert main(["eval", "--pred", str(tmp_path / "x"), "--gt", str(tmp_path / "y"),
                 "--out", str(tmp_path / "z")]) == 2


def test_gcp_produces_identical_final_params(dataset, tmp_path):
    outs = {}
    for policy in ("off", "block_boundary"):
        out = tmp_path / f"train_{policy}"
        assert main(
            TRAIN_ARGS + ["--data", str(dataset), "--out", str(out), "--gcp", policy]
        ) == 0
        outs[policy] = digest(out / "model" / "params.bin")
    assert outs["off"] == outs["block_boundary"]


def test_landmarks_table_prints(capsys):
    assert main(["landmarks"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert len(rows) == 16
    subset = [r["index"] for r in rows if r["registration_subset"]]
    assert subset == [1, 2, 3, 4, 5, 7, 8, 9, 11, 14]
