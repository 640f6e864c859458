"""Articulated soft-tube phantoms with exact 16-landmark ground truth.

A phantom is a jittered instance of a curled base figure: a head sphere, a
spine chain, and four limb chains rendered as Gaussian-profile tubes with
bright joint bumps, then degraded with multiplicative and additive noise and
optional zero-intensity shadow cones. The base figure is bilaterally
symmetric in appearance but chiral in geometry (limbs curl toward the
front), so left/right labels are determined by construction while local
appearance alone cannot tell the sides apart when the left-intensity offset
is zero. Raising ``left_intensity_offset`` brightens left-side limbs and
makes the symmetric landmarks progressively easier.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from volpose import fileio
from volpose.anatomy import FLIP_PERMUTATION, LANDMARKS, NUM_LANDMARKS, SEGMENTS
from volpose.registration import Pose


class PhantomError(RuntimeError):
    pass


# Base figure在 body frame, mm: +z toward the head, +y toward the front
# (limbs curl that way), +x the anatomical left. 1-based landmark indexing.
_BASE_POSITIONS = {
    1: (0.0, 3.0, 21.0),     # head_top
    2: (0.0, 0.0, 13.0),     # neck
    3: (0.0, -2.0, 3.0),     # spine_mid
    4: (0.0, 1.0, -7.0),     # sacrum
    5: (6.5, 1.0, 11.0),     # l_shoulder
    6: (9.0, 7.0, 5.5),      # l_elbow
    7: (5.5, 12.0, 0.5),     # l_wrist
    8: (-6.5, 1.0, 11.0),    # r_shoulder
    9: (-9.0, 7.0, 5.5),     # r_elbow
    10: (-5.5, 12.0, 0.5),   # r_wrist
    11: (4.5, 2.0, -8.5),    # l_hip
    12: (7.0, 9.5, -4.5),    # l_knee
    13: (5.0, 14.0, -11.5),  # l_ankle
    14: (-4.5, 2.0, -8.5),   # r_hip
    15: (-7.0, 9.5, -4.5),   # r_knee
    16: (-5.0, 14.0, -11.5), # r_ankle
}

# segment class -> intensity; radii live on PhantomSpec
_CLASS_AMPS = {
    "torso": 0.95,
    "arm": 0.80,
    "leg": 0.85,
}


def _segment_class(a: int, b: int) -> str:
    sides = {LANDMARKS[a - 1].side, LANDMARKS[b - 1].side}
    if sides == {"midline"}:
        return "torso"
    limb = LANDMARKS[b - 1] if LANDMARKS[b - 1].side != "midline" else LANDMARKS[a - 1]
    return "arm" if limb.index in (5, 6, 7, 8, 9, 10) else "leg"


@dataclass
class PhantomSpec:
    shape: tuple[int, int, int] = (64, 64, 64)      # (nz, ny, nx)
    spacing_mm: float = 1.0
    scale_range: tuple[float, float] = (0.92, 1.12)
    spine_jitter_deg: float = 7.0
    limb_jitter_deg: float = 11.0
    length_jitter: float = 0.1                       # relative
    head_radius_mm: float = 5.5
    torso_radius_mm: float = 3.0
    arm_radius_mm: float = 2.2
    leg_radius_mm: float = 2.6
    joint_bump_scale: float = 1.35                   # bump radius vs tube radius
    joint_bump_amp: float = 1.06                     # uniform bump intensity
    left_intensity_offset: float = 0.0               # 0 = hardest symmetry
    noise_multiplicative: float = 0.08
    noise_additive: float = 0.02
    shadow_probability: float = 0.08
    shadow_half_angle_deg: tuple[float, float] = (10.0, 18.0)
    center_jitter_mm: float = 3.0
    bounds_margin_mm: float = 2.0
    min_joint_separation_mm: float = 4.0
    max_rejections: int = 100

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        return d

    @staticmethod
    def from_dict(d: dict) -> "PhantomSpec":
        d = dict(d)
        d["shape"] = tuple(d["shape"])
        for key in ("scale_range", "shadow_half_angle_deg"):
            if key in d:
                d[key] = tuple(d[key])
        return PhantomSpec(**d)


@dataclass
class PhantomCase:
    volume: np.ndarray           # (z, y, x) float32
    pose: Pose                   # ground truth, mm
    spacing_mm: float
    provenance: dict = field(default_factory=dict)


def _rotate_toward(rng: np.random.Generator, direction: np.ndarray, max_deg: float) -> np.ndarray:
    """Tilt a unit vector by a random angle up to max_deg about a random
    perpendicular axis."""
    angle = np.deg2rad(rng.uniform(0.0, max_deg))
    probe = rng.normal(size=3)
    axis = np.cross(direction, probe)
    norm = np.linalg.norm(axis)
    if norm < 1e-9:
        return direction
    axis /= norm
    c, s = np.cos(angle), np.sin(angle)
    return c * direction + s * np.cross(axis, direction)


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _sample_skeleton(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Jittered joint positions (16, 3) in the body frame, centered."""
    pos = {1: np.zeros(3)}
    for a, b in SEGMENTS:
        base_vec = np.asarray(_BASE_POSITIONS[b]) - np.asarray(_BASE_POSITIONS[a])
        length = np.linalg.norm(base_vec)
        cls = _segment_class(a, b)
        cone = spec.spine_jitter_deg if cls == "torso" else spec.limb_jitter_deg
        direction = _rotate_toward(rng, base_vec / length, cone)
        length *= rng.uniform(1.0 - spec.length_jitter, 1.0 + spec.length_jitter)
        pos[b] = pos[a] + direction * length
    pts = np.stack([pos[j] for j in range(1, NUM_LANDMARKS + 1)])
    return pts - pts.mean(axis=0)


def render_tube(
    volume: np.ndarray,
    p0_mm: np.ndarray,
    p1_mm: np.ndarray,
    radius_mm: float,
    amplitude: float,
    spacing_mm: float,
) -> None:
    """Max-compose a Gaussian-profile capsule into (z, y, x) volume, in place.

    Intensity is amplitude * exp(-d^2 / (2 r^2)) with d the distance to the
    segment; contributions beyond 3 r are dropped.
    """
    nz, ny, nx = volume.shape
    reach = 3.0 * radius_mm
    lo_mm = np.minimum(p0_mm, p1_mm) - reach
    hi_mm = np.maximum(p0_mm, p1_mm) + reach
    xlo, ylo, zlo = (max(0, int(np.floor(v / spacing_mm))) for v in lo_mm)
    xhi = min(nx - 1, int(np.ceil(hi_mm[0] / spacing_mm)))
    yhi = min(ny - 1, int(np.ceil(hi_mm[1] / spacing_mm)))
    zhi = min(nz - 1, int(np.ceil(hi_mm[2] / spacing_mm)))
    if xlo > xhi or ylo > yhi or zlo > zhi:
        return
    zs, ys, xs = np.meshgrid(
        np.arange(zlo, zhi + 1) * spacing_mm,
        np.arange(ylo, yhi + 1) * spacing_mm,
        np.arange(xlo, xhi + 1) * spacing_mm,
        indexing="ij",
    )
    pts = np.stack([xs, ys, zs], axis=-1)
    seg = p1_mm - p0_mm
    seg_len2 = float(seg @ seg)
    rel = pts - p0_mm
    if seg_len2 < 1e-12:
        d2 = np.sum(rel**2, axis=-1)
    else:
        t = np.clip(np.tensordot(rel, seg, axes=([-1], [0])) / seg_len2, 0.0, 1.0)
        d2 = np.sum((rel - t[..., None] * seg) ** 2, axis=-1)
    blob = amplitude * np.exp(-d2 / (2.0 * radius_mm**2))
    blob[d2 > reach**2] = 0.0
    region = volume[zlo : zhi + 1, ylo : yhi + 1, xlo : xhi + 1]
    np.maximum(region, blob.astype(volume.dtype), out=region)


def _class_radius(spec: PhantomSpec, cls: str) -> float:
    return {
        "torso": spec.torso_radius_mm,
        "arm": spec.arm_radius_mm,
        "leg": spec.leg_radius_mm,
    }[cls]


def _render_clean(spec: PhantomSpec, pose_mm: np.ndarray) -> np.ndarray:
    nz, ny, nx = spec.shape
    vol = np.zeros((nz, ny, nx), dtype=np.float32)
    left = {ld.index for ld in LANDMARKS if ld.side == "left"}

    def amp_for(indices: set[int], base_amp: float) -> float:
        if indices & left:
            return min(base_amp + spec.left_intensity_offset, 1.3)
        return base_amp

    for a, b in SEGMENTS:
        cls = _segment_class(a, b)
        amp = amp_for({a, b}, _CLASS_AMPS[cls])
        render_tube(
            vol, pose_mm[a - 1], pose_mm[b - 1], _class_radius(spec, cls), amp, spec.spacing_mm
        )
    # joint bumps: spheres of one uniform intensity above every tube keep an
    # intensity ridge maximum exactly at each ground-truth landmark even
    # where bumps of different body parts sit close together
    for ld in LANDMARKS:
        if ld.index == 1:
            radius = spec.head_radius_mm
        else:
            parent_edges = [(a, b) for a, b in SEGMENTS if b == ld.index or a == ld.index]
            radius = _class_radius(spec, _segment_class(*parent_edges[0])) * spec.joint_bump_scale
        amp = min(amp_for({ld.index}, spec.joint_bump_amp), 1.3)
        p = pose_mm[ld.index - 1]
        render_tube(vol, p, p, radius, amp, spec.spacing_mm)
    return vol


def _apply_shadow(spec: PhantomSpec, vol: np.ndarray, rng: np.random.Generator) -> dict | None:
    if rng.uniform() >= spec.shadow_probability:
        return None
    nz, ny, nx = vol.shape
    s = spec.spacing_mm
    face = int(rng.integers(6))
    apex = rng.uniform([0, 0, 0], [(nx - 1) * s, (ny - 1) * s, (nz - 1) * s])
    normal = np.zeros(3)
    apex[face // 2] = 0.0 if face % 2 == 0 else [nx - 1, ny - 1, nz - 1][face // 2] * s
    normal[face // 2] = 1.0 if face % 2 == 0 else -1.0
    axis = _rotate_toward(rng, normal, 25.0)
    half_angle = np.deg2rad(rng.uniform(*spec.shadow_half_angle_deg))
    zs, ys, xs = np.meshgrid(
        np.arange(nz) * s, np.arange(ny) * s, np.arange(nx) * s, indexing="ij"
    )
    rel = np.stack([xs, ys, zs], axis=-1) - apex
    dist = np.linalg.norm(rel, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cosang = np.tensordot(rel, axis, axes=([-1], [0])) / np.maximum(dist, 1e-9)
    vol[cosang > np.cos(half_angle)] = 0.0
    return {
        "apex_mm": [float(v) for v in apex],
        "axis": [float(v) for v in axis],
        "half_angle_deg": float(np.rad2deg(half_angle)),
    }


def sample_case(spec: PhantomSpec, seed: int) -> PhantomCase:
    """Deterministically generate one phantom volume with ground-truth pose."""
    rng = np.random.default_rng(seed)
    nz, ny, nx = spec.shape
    s = spec.spacing_mm
    extent_mm = np.array([(nx - 1) * s, (ny - 1) * s, (nz - 1) * s])
    margin = spec.bounds_margin_mm + max(
        spec.torso_radius_mm, spec.arm_radius_mm, spec.leg_radius_mm
    )

    pose_mm = None
    for attempt in range(spec.max_rejections):
        pts = _sample_skeleton(spec, rng)
        scale = rng.uniform(*spec.scale_range)
        rot = _random_rotation(rng)
        center = extent_mm / 2 + rng.uniform(
            -spec.center_jitter_mm, spec.center_jitter_mm, size=3
        )
        candidate = (pts * scale) @ rot.T + center
        diff = candidate[:, None, :] - candidate[None, :, :]
        pairwise = np.linalg.norm(diff, axis=-1) + np.eye(NUM_LANDMARKS) * 1e9
        if (
            np.all(candidate >= margin)
            and np.all(candidate <= extent_mm - margin)
            and pairwise.min() >= spec.min_joint_separation_mm
        ):
            pose_mm = candidate
            provenance = {
                "seed": int(seed),
                "scale": float(scale),
                "attempt": attempt,
                "center_mm": [float(v) for v in center],
            }
            break
    if pose_mm is None:
        raise PhantomError(
            f"could not place the skeleton inside {spec.shape} within "
            f"{spec.max_rejections} rejection samples"
        )

    vol = _render_clean(spec, pose_mm)
    shadow = _apply_shadow(spec, vol, rng)
    if shadow is not None:
        provenance["shadow"] = shadow
    if spec.noise_multiplicative > 0:
        vol *= 1.0 + spec.noise_multiplicative * rng.standard_normal(vol.shape).astype(np.float32)
    if spec.noise_additive > 0:
        vol += spec.noise_additive * np.abs(rng.standard_normal(vol.shape)).astype(np.float32)
    np.clip(vol, 0.0, 2.0, out=vol)
    return PhantomCase(vol, Pose(pose_mm), s, provenance)


# ---------------------------------------------------------------------------
# augmentation: flips (with left/right label swap) and quarter rotations
# ---------------------------------------------------------------------------

AUGMENT_OPS = ("flip_x", "flip_y", "flip_z", "rot90_x", "rot90_y", "rot90_z")


def augment(case: PhantomCase, op: str) -> PhantomCase:
    """Transform volume and pose identically; flips also swap the left/right
    landmark labels so they stay anatomically consistent."""
    vol = case.volume
    xyz = case.pose.xyz_mm.copy()
    present = case.pose.present.copy()
    nz, ny, nx = vol.shape
    s = case.spacing_mm
    if op == "flip_x":
        vol2 = vol[:, :, ::-1].copy()
        xyz[:, 0] = (nx - 1) * s - xyz[:, 0]
        xyz, present = xyz[list(FLIP_PERMUTATION)], present[list(FLIP_PERMUTATION)]
    elif op == "flip_y":
        vol2 = vol[:, ::-1, :].copy()
        xyz[:, 1] = (ny - 1) * s - xyz[:, 1]
        xyz, present = xyz[list(FLIP_PERMUTATION)], present[list(FLIP_PERMUTATION)]
    elif op == "flip_z":
        vol2 = vol[::-1, :, :].copy()
        xyz[:, 2] = (nz - 1) * s - xyz[:, 2]
        xyz, present = xyz[list(FLIP_PERMUTATION)], present[list(FLIP_PERMUTATION)]
    elif op == "rot90_z":
        vol2 = np.rot90(vol, k=1, axes=(1, 2)).copy()
        x, y = xyz[:, 0].copy(), xyz[:, 1].copy()
        xyz[:, 0] = y
        xyz[:, 1] = (nx - 1) * s - x
    elif op == "rot90_x":
        vol2 = np.rot90(vol, k=1, axes=(0, 1)).copy()
        y, z = xyz[:, 1].copy(), xyz[:, 2].copy()
        xyz[:, 1] = z
        xyz[:, 2] = (ny - 1) * s - y
    elif op == "rot90_y":
        vol2 = np.rot90(vol, k=1, axes=(2, 0)).copy()
        x, z = xyz[:, 0].copy(), xyz[:, 2].copy()
        xyz[:, 2] = x
        xyz[:, 0] = (nz - 1) * s - z
    else:
        raise PhantomError(f"unknown augmentation op '{op}' (choose from {AUGMENT_OPS})")
    prov = dict(case.provenance)
    prov["augmented"] = list(prov.get("augmented", [])) + [op]
    return PhantomCase(vol2, Pose(xyz, present), s, prov)


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

def make_dataset(
    spec: PhantomSpec,
    n_train: int,
    n_test: int,
    out_dir: str | Path,
    seed: int = 0,
    stamp: dict | None = None,
) -> dict:
    """Write train/test phantom cases and a manifest describing them.

    Case seeds are ``seed + i`` for train and ``seed + n_train + j`` for
    test: disjoint by construction and sufficient to regenerate every volume
    bit for bit. ``stamp`` (e.g. a run-config hash) is embedded in every
    written file.
    """
    if n_train < 1 or n_test < 1:
        raise PhantomError("need at least one train and one test case")
    out_dir = Path(out_dir)
    cases_dir = out_dir / "cases"
    cases_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    names = set()
    for split, count, offset in (("train", n_train, 0), ("test", n_test, n_train)):
        for i in range(count):
            case_seed = seed + offset + i
            case_id = f"{split}_{i:04d}"
            case = sample_case(spec, case_seed)
            vol_path = cases_dir / case_id
            pose_path = cases_dir / f"{case_id}_pose.json"
            if case_id in names:
                raise PhantomError(f"output path collision for '{case_id}'")
            names.add(case_id)
            fileio.save_volume(vol_path, case.volume, case.spacing_mm, extra=stamp)
            fileio.save_pose(
                pose_path, case.pose, spacing=np.repeat(case.spacing_mm, 3), extra=stamp
            )
            entries.append(
                {
                    "id": case_id,
                    "split": split,
                    "seed": case_seed,
                    "volume": str(vol_path.relative_to(out_dir)),
                    "pose": str(pose_path.relative_to(out_dir)),
                    "provenance": case.provenance,
                }
            )
    manifest = {
        "version": 1,
        "phantom_spec": spec.to_dict(),
        "base_seed": seed,
        "n_train": n_train,
        "n_test": n_test,
        "cases": entries,
    }
    fileio.save_manifest(out_dir / "manifest.json", manifest)
    return manifest
