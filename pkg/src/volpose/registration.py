"""Pose data model, rigid point-set registration, and pose-library retrieval.

Alignment of a library pose to a prediction uses the closed-form
least-squares rotation (centroid subtraction, cross-covariance SVD,
reflection correction so det(R) = +1). Retrieval ranks every library pose by
its summed per-landmark residual over the registration subset and returns
the top-K with full aligned poses; the label proxy is the mean of the
aligned poses' Gaussian heatmaps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from volpose import heatmap
from volpose.anatomy import NUM_LANDMARKS, REGISTRATION_SUBSET, landmark_names


class RegistrationError(ValueError):
    pass


class RetrievalDeclined(RuntimeError):
    """Too few valid subset landmarks; the caller should keep its raw pose."""


@dataclass
class Pose:
    """16 labeled landmark coordinates in mm, with a presence mask."""

    xyz_mm: np.ndarray                      # (16, 3) float64
    present: np.ndarray = field(default=None)  # (16,) bool

    def __post_init__(self):
        self.xyz_mm = np.asarray(self.xyz_mm, dtype=np.float64)
        if self.xyz_mm.shape != (NUM_LANDMARKS, 3):
            raise RegistrationError(f"pose must be ({NUM_LANDMARKS}, 3), got {self.xyz_mm.shape}")
        if self.present is None:
            self.present = np.ones(NUM_LANDMARKS, dtype=bool)
        else:
            self.present = np.asarray(self.present, dtype=bool)
        if not np.all(np.isfinite(self.xyz_mm[self.present])):
            raise RegistrationError("pose has non-finite coordinates")

    def copy(self) -> "Pose":
        return Pose(self.xyz_mm.copy(), self.present.copy())


@dataclass
class RigidTransform:
    """Proper rotation (det = +1) plus translation, acting on mm points."""

    rotation: np.ndarray      # (3, 3)
    translation: np.ndarray   # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        r = self.rotation
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise RegistrationError("rotation is not orthonormal within 1e-9")
        if not np.isclose(np.linalg.det(r), 1.0, atol=1e-9):
            raise RegistrationError("rotation determinant is not +1 within 1e-9")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))


def fit_rigid(src: np.ndarray, dst: np.ndarray) -> tuple[RigidTransform, float]:
    """Least-squares rigid transform taking src points onto dst points.

    Returns the transform and the RMS residual, computed as
    sqrt(mean squared residual) over all 3n coordinates. Requires >= 3
    non-collinear point pairs; a reflection-optimal configuration is
    corrected to the best proper rotation.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise RegistrationError(f"point sets must both be (n, 3), got {src.shape} vs {dst.shape}")
    n = src.shape[0]
    if n < 3:
        raise RegistrationError(f"need at least 3 point pairs, got {n}")
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    a = src - cs
    b = dst - cd
    # collinear points leave the rotation about their axis unconstrained
    sv_a = np.linalg.svd(a, compute_uv=False)
    if sv_a[1] < 1e-9 * max(sv_a[0], 1.0):
        raise RegistrationError(
            f"source points are collinear (singular values {sv_a.round(12)}); "
            "rotation is not determined"
        )
    cov = a.T @ b
    u, _, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = cd - rot @ cs
    transform = RigidTransform(rot, t)
    residual = transform.apply(src) - dst
    rms = float(np.sqrt(np.mean(residual**2)))
    return transform, rms


@dataclass
class PoseLibrary:
    """Immutable set of reference poses with string ids and source tags."""

    ids: list[str]
    poses: list[Pose]
    sources: list[str]

    def __post_init__(self):
        if not (len(self.ids) == len(self.poses) == len(self.sources)):
            raise RegistrationError("library fields must have equal length")
        subset = np.array(REGISTRATION_SUBSET) - 1
        for pid, pose in zip(self.ids, self.poses):
            if not pose.present[subset].all():
                raise RegistrationError(
                    f"library pose '{pid}' is missing registration-subset landmarks"
                )

    def __len__(self) -> int:
        return len(self.ids)

    def save(self, path: str | Path) -> None:
        records = []
        for pid, pose, src in zip(self.ids, self.poses, self.sources):
            records.append(
                {
                    "id": pid,
                    "source": src,
                    "landmarks": [
                        {
                            "index": j + 1,
                            "name": landmark_names()[j],
                            "xyz_mm": [float(v) for v in pose.xyz_mm[j]],
                            "present": bool(pose.present[j]),
                        }
                        for j in range(NUM_LANDMARKS)
                    ],
                }
            )
        Path(path).write_text(json.dumps({"version": 1, "poses": records}, indent=1))

    @staticmethod
    def load(path: str | Path) -> "PoseLibrary":
        doc = json.loads(Path(path).read_text())
        ids, poses, sources = [], [], []
        for rec in doc["poses"]:
            xyz = np.zeros((NUM_LANDMARKS, 3))
            present = np.zeros(NUM_LANDMARKS, dtype=bool)
            for lm in rec["landmarks"]:
                j = lm["index"] - 1
                xyz[j] = lm["xyz_mm"]
                present[j] = lm["present"]
            ids.append(rec["id"])
            poses.append(Pose(xyz, present))
            sources.append(rec.get("source", ""))
        return PoseLibrary(ids, poses, sources)


@dataclass
class SupportEntry:
    atlas_id: str
    transform: RigidTransform
    error_mm: float          # summed subset residual norms
    aligned: Pose            # full 16-landmark pose after alignment


@dataclass
class SupportSet:
    entries: list[SupportEntry]

    def __post_init__(self):
        errs = [e.error_mm for e in self.entries]
        if any(b < a for a, b in zip(errs, errs[1:])):
            raise RegistrationError("support entries must be sorted by ascending error")

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> list[str]:
        return [e.atlas_id for e in self.entries]


MIN_VALID_SUBSET = 4


def retrieve_support(
    query_xyz_mm: np.ndarray,
    query_valid: np.ndarray,
    library: PoseLibrary,
    k: int = 10,
) -> SupportSet:
    """Align every library pose to the query and keep the top-K by error.

    The alignment is fit on the registration subset intersected with the
    query's valid mask (at least 4 landmarks, else the retrieval is
    declined). Errors are the summed Euclidean residuals of the subset
    landmarks; ties in the ranking break on atlas id.
    """
    if k < 1:
        raise RegistrationError(f"k must be >= 1, got {k}")
    if k > len(library):
        raise RegistrationError(f"k={k} exceeds library size {len(library)}")
    query_xyz_mm = np.asarray(query_xyz_mm, dtype=np.float64)
    query_valid = np.asarray(query_valid, dtype=bool)
    subset0 = np.array(REGISTRATION_SUBSET) - 1
    usable = subset0[query_valid[subset0]]
    if usable.size < MIN_VALID_SUBSET:
        raise RetrievalDeclined(
            f"only {usable.size} valid registration-subset landmarks "
            f"(need >= {MIN_VALID_SUBSET})"
        )
    dst = query_xyz_mm[usable]
    scored = []
    for pid, pose in zip(library.ids, library.poses):
        transform, _ = fit_rigid(pose.xyz_mm[usable], dst)
        residual = transform.apply(pose.xyz_mm[usable]) - dst
        error = float(np.linalg.norm(residual, axis=1).sum())
        scored.append((error, pid, transform, pose))
    scored.sort(key=lambda item: (item[0], item[1]))
    entries = [
        SupportEntry(pid, tr, err, Pose(tr.apply(pose.xyz_mm), pose.present.copy()))
        for err, pid, tr, pose in scored[:k]
    ]
    return SupportSet(entries)


def build_label_proxy(
    support: SupportSet,
    shape: tuple[int, int, int],
    spacing,
    sigma_vox: float,
) -> np.ndarray:
    """Mean of the aligned atlases' Gaussian stacks: the pseudo ground truth.

    Aligned landmarks may land outside the grid; such a landmark contributes
    a zero (or edge-clipped) map for its channel.
    """
    if len(support) == 0:
        raise RegistrationError("support set is empty")
    s = np.asarray(spacing, dtype=np.float64)
    if s.ndim == 0:
        s = np.repeat(s, 3)
    nz, ny, nx = shape
    acc = np.zeros((NUM_LANDMARKS, nz, ny, nx), dtype=np.float64)
    chan = np.zeros((nz, ny, nx), dtype=np.float32)
    for entry in support.entries:
        for j in range(NUM_LANDMARKS):
            if not entry.aligned.present[j]:
                continue
            chan[:] = 0.0
            heatmap.encode_channel(entry.aligned.xyz_mm[j] / s, shape, sigma_vox, out=chan)
            acc[j] += chan
    acc /= len(support)
    return acc.astype(np.float32)
