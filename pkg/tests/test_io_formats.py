"""File formats: byte-level layout, sidecar contracts, error paths."""

import json

import numpy as np
import pytest

from volpose.fileio import (
    FileFormatError,
    load_manifest,
    load_pose,
    load_volume,
    save_manifest,
    save_pose,
    save_volume,
)
from volpose.registration import Pose


def test_raw_volume_is_little_endian_x_fastest(tmp_path):
    # hand-build a volume where the value encodes (z, y, x); the raw file
    # must advance x first, then y, then z
    nz, ny, nx = 2, 3, 4
    vol = np.zeros((nz, ny, nx), dtype=np.float32)
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                vol[z, y, x] = z * 100 + y * 10 + x
    save_volume(tmp_path / "v", vol, 1.0)
    raw = np.frombuffer((tmp_path / "v.raw").read_bytes(), dtype="<f4")
    expected = [z * 100 + y * 10 + x
                for z in range(nz) for y in range(ny) for x in range(nx)]
    np.testing.assert_array_equal(raw, expected)
    header = json.loads((tmp_path / "v.json").read_text())
    assert header["dims"] == [nx, ny, nz]
    assert header["dtype"] == "float32"
    assert header["version"] == 1


def test_volume_round_trip_preserves_bits(tmp_path):
    rng = np.random.default_rng(0)
    vol = rng.normal(size=(5, 6, 7)).astype(np.float32)
    save_volume(tmp_path / "v", vol, [0.5, 0.5, 1.0])
    loaded, spacing = load_volume(tmp_path / "v")
    np.testing.assert_array_equal(loaded, vol)
    np.testing.assert_array_equal(spacing, [0.5, 0.5, 1.0])


def test_volume_size_mismatch_rejected(tmp_path):
    vol = np.zeros((2, 2, 2), dtype=np.float32)
    save_volume(tmp_path / "v", vol, 1.0)
    (tmp_path / "v.raw").write_bytes(b"\x00" * 4 * 7)  # 7 voxels, header says 8
    with pytest.raises(FileFormatError, match="header says"):
        load_volume(tmp_path / "v")


def test_volume_version_check(tmp_path):
    vol = np.zeros((2, 2, 2), dtype=np.float32)
    save_volume(tmp_path / "v", vol, 1.0)
    header = json.loads((tmp_path / "v.json").read_text())
    header["version"] = 99
    (tmp_path / "v.json").write_text(json.dumps(header))
    with pytest.raises(FileFormatError, match="version"):
        load_volume(tmp_path / "v")


def test_pose_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    pose = Pose(rng.normal(scale=20, size=(16, 3)))
    pose.present[5] = False
    save_pose(tmp_path / "p.json", pose, spacing=1.0, extra={"config_hash": "abc"})
    loaded, doc = load_pose(tmp_path / "p.json")
    np.testing.assert_allclose(loaded.xyz_mm, pose.xyz_mm)
    np.testing.assert_array_equal(loaded.present, pose.present)
    assert doc["config_hash"] == "abc"
    assert doc["landmarks"][0]["name"] == "head_top"
    assert doc["spacing_mm"] == [1.0, 1.0, 1.0]


def test_pose_version_check(tmp_path):
    pose = Pose(np.zeros((16, 3)))
    save_pose(tmp_path / "p.json", pose)
    doc = json.loads((tmp_path / "p.json").read_text())
    doc["version"] = 42
    (tmp_path / "p.json").write_text(json.dumps(doc))
    with pytest.raises(FileFormatError, match="version"):
        load_pose(tmp_path / "p.json")


def test_manifest_round_trip(tmp_path):
    doc = {"version": 1, "cases": [{"id": "a", "seed": 3}]}
    save_manifest(tmp_path / "m.json", doc)
    assert load_manifest(tmp_path / "m.json") == doc
