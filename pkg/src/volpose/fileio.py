"""File formats: raw volumes with JSON sidecars, pose JSON, dataset manifests.

Volume format: raw little-endian float32, x-fastest order (exactly the bytes
of a C-order (z, y, x) array), with a sidecar ``<stem>.json`` holding
``{dims: [nx, ny, nz], spacing_mm: [sx, sy, sz], dtype, version}``.
Pose format: JSON with 16 named landmarks in mm and validity flags.
All writers are pure functions of their inputs; nothing embeds timestamps.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from volpose.anatomy import NUM_LANDMARKS, landmark_names
from volpose.registration import Pose

VOLUME_FORMAT_VERSION = 1
POSE_FORMAT_VERSION = 1


class FileFormatError(ValueError):
    pass


def save_volume(path: str | Path, volume: np.ndarray, spacing, extra: dict | None = None) -> None:
    """Write <path>.raw plus <path>.json; volume is (z, y, x) float32."""
    path = Path(path)
    if volume.ndim != 3:
        raise FileFormatError(f"volume must be 3-D (z, y, x), got shape {volume.shape}")
    s = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,))
    arr = np.ascontiguousarray(volume, dtype="<f4")
    path.with_suffix(".raw").write_bytes(arr.tobytes())
    nz, ny, nx = volume.shape
    header = {
        "version": VOLUME_FORMAT_VERSION,
        "dims": [nx, ny, nz],
        "spacing_mm": [float(v) for v in s],
        "dtype": "float32",
    }
    header.update(extra or {})
    path.with_suffix(".json").write_text(json.dumps(header, sort_keys=True, indent=1))


def load_volume(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read a raw+sidecar volume; returns ((z, y, x) float32, spacing (3,))."""
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    if header.get("version") != VOLUME_FORMAT_VERSION:
        raise FileFormatError(f"unsupported volume format version {header.get('version')}")
    if header.get("dtype") != "float32":
        raise FileFormatError(f"unsupported volume dtype {header.get('dtype')}")
    nx, ny, nz = header["dims"]
    raw = np.frombuffer(path.with_suffix(".raw").read_bytes(), dtype="<f4")
    if raw.size != nx * ny * nz:
        raise FileFormatError(
            f"{path}.raw holds {raw.size} voxels, header says {nx * ny * nz}"
        )
    spacing = np.asarray(header["spacing_mm"], dtype=np.float64)
    return raw.reshape(nz, ny, nx).copy(), spacing


def save_pose(
    path: str | Path,
    pose: Pose,
    spacing=None,
    extra: dict | None = None,
) -> None:
    doc = {
        "version": POSE_FORMAT_VERSION,
        "spacing_mm": None if spacing is None else [float(v) for v in np.broadcast_to(spacing, (3,))],
        "landmarks": [
            {
                "index": j + 1,
                "name": landmark_names()[j],
                "xyz_mm": [float(v) for v in pose.xyz_mm[j]],
                "valid": bool(pose.present[j]),
            }
            for j in range(NUM_LANDMARKS)
        ],
    }
    doc.update(extra or {})
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1))


def load_pose(path: str | Path) -> tuple[Pose, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != POSE_FORMAT_VERSION:
        raise FileFormatError(f"unsupported pose format version {doc.get('version')}")
    xyz = np.zeros((NUM_LANDMARKS, 3))
    present = np.zeros(NUM_LANDMARKS, dtype=bool)
    for lm in doc["landmarks"]:
        j = lm["index"] - 1
        xyz[j] = lm["xyz_mm"]
        present[j] = lm["valid"]
    return Pose(xyz, present), doc


def save_manifest(path: str | Path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, sort_keys=True, indent=1))


def load_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
