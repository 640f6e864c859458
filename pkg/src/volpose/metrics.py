"""Evaluation: per-landmark distances, PCK curves, AUC, segment lengths.

PCK at a threshold is the fraction of predictions whose Euclidean distance
to ground truth is strictly below it (an exactly-zero distance counts at
every threshold, so perfect predictions score AUC 100 even at the grid's
zero point); AUC is the trapezoidal integral of the PCK curve normalized by
the grid span, in percent. The default threshold grid is 0..30 mm in 0.5 mm
steps and is recorded in every report.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from volpose.anatomy import NUM_LANDMARKS, SEGMENTS, landmark_names
from volpose.registration import Pose


class MetricsError(ValueError):
    pass


DEFAULT_THRESHOLDS = np.arange(0.0, 30.0 + 1e-9, 0.5)


def euclidean(
    pred: Pose,
    gt: Pose,
    pred_spacing=None,
    gt_spacing=None,
) -> np.ndarray:
    """Per-landmark Euclidean distance in mm; NaN where either side is masked.

    If both poses carry spacing metadata it must agree, guarding against
    accidentally comparing poses from differently calibrated volumes.
    """
    if pred_spacing is not None and gt_spacing is not None:
        ps = np.broadcast_to(np.asarray(pred_spacing, dtype=np.float64), (3,))
        gs = np.broadcast_to(np.asarray(gt_spacing, dtype=np.float64), (3,))
        if not np.allclose(ps, gs):
            raise MetricsError(f"spacing metadata disagrees: {ps} vs {gs}")
    d = np.linalg.norm(pred.xyz_mm - gt.xyz_mm, axis=1)
    d = np.where(pred.present & gt.present, d, np.nan)
    return d


def pck_curve(distances: np.ndarray, thresholds: np.ndarray) -> dict:
    """PCK per landmark and pooled over a strictly increasing threshold grid.

    ``distances``: (n_cases, 16) mm, NaN entries excluded from the counts.
    """
    distances = np.atleast_2d(np.asarray(distances, dtype=np.float64))
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if distances.size == 0:
        raise MetricsError("distance set is empty")
    if thresholds.size == 0:
        raise MetricsError("threshold grid is empty")
    if thresholds.size > 1 and np.any(np.diff(thresholds) <= 0):
        raise MetricsError("threshold grid must be strictly increasing")
    valid = np.isfinite(distances)
    n_valid = valid.sum(axis=0)             # per landmark
    below = distances[None, :, :] < thresholds[:, None, None]
    below |= (distances == 0.0)[None, :, :]
    below &= valid[None, :, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        per_landmark = below.sum(axis=1) / np.maximum(n_valid, 1)[None, :]
    pooled = below.sum(axis=(1, 2)) / max(int(valid.sum()), 1)
    return {
        "thresholds": thresholds,
        "per_landmark": per_landmark,        # (T, 16)
        "pooled": pooled,                    # (T,)
        "n_valid": n_valid,
    }


def auc(pck_values: np.ndarray, thresholds: np.ndarray) -> float:
    """Normalized area under the PCK curve, in percent."""
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if thresholds.size < 2:
        raise MetricsError("AUC needs at least a two-point threshold grid")
    span = thresholds[-1] - thresholds[0]
    return float(np.trapezoid(np.asarray(pck_values, dtype=np.float64), thresholds) / span * 100.0)


def segment_lengths(pose: Pose) -> np.ndarray:
    """The 15 canonical segment lengths in mm; NaN where an endpoint is masked."""
    out = np.zeros(len(SEGMENTS))
    for i, (a, b) in enumerate(SEGMENTS):
        if pose.present[a - 1] and pose.present[b - 1]:
            out[i] = np.linalg.norm(pose.xyz_mm[a - 1] - pose.xyz_mm[b - 1])
        else:
            out[i] = np.nan
    return out


@dataclass
class EvalReport:
    per_landmark_mean_mm: np.ndarray          # (16,)
    per_landmark_auc: np.ndarray              # (16,)
    mean_mm: float
    mean_auc: float
    pck: dict
    case_ids: list[str]
    segment_lengths_mm: dict[str, list[float]] = field(default_factory=dict)
    thresholds: np.ndarray = field(default_factory=lambda: DEFAULT_THRESHOLDS.copy())

    @property
    def case_count(self) -> int:
        return len(self.case_ids)


def build_report(
    preds: dict[str, Pose],
    gts: dict[str, Pose],
    thresholds: np.ndarray | None = None,
) -> EvalReport:
    if thresholds is None:
        thresholds = DEFAULT_THRESHOLDS.copy()
    ids = sorted(preds)
    missing = [i for i in ids if i not in gts]
    if missing:
        raise MetricsError(f"no ground truth for cases {missing}")
    if not ids:
        raise MetricsError("no cases to evaluate")
    rows = np.stack([euclidean(preds[i], gts[i]) for i in ids])
    curve = pck_curve(rows, thresholds)
    with np.errstate(invalid="ignore"):
        per_mean = np.nanmean(rows, axis=0)
    per_auc = np.array(
        [auc(curve["per_landmark"][:, j], thresholds) for j in range(rows.shape[1])]
    )
    seg = {i: [float(v) for v in segment_lengths(preds[i])] for i in ids}
    return EvalReport(
        per_landmark_mean_mm=per_mean,
        per_landmark_auc=per_auc,
        mean_mm=float(np.nanmean(rows)),
        mean_auc=auc(curve["pooled"], thresholds),
        pck=curve,
        case_ids=ids,
        segment_lengths_mm=seg,
        thresholds=thresholds,
    )


def write_report(report: EvalReport, out_dir: str | Path, config_note: dict | None = None) -> None:
    """Emit report.json plus the landmark-table and PCK-curve CSVs.

    Table CSVs carry one column per landmark (L1..L16) plus a mean column;
    the PCK CSV has one row per threshold for plotting.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    note = config_note or {}
    doc = {
        **note,
        "case_count": report.case_count,
        "case_ids": report.case_ids,
        "mean_distance_mm": report.mean_mm,
        "mean_auc_percent": report.mean_auc,
        "per_landmark_mean_mm": [float(v) for v in report.per_landmark_mean_mm],
        "per_landmark_auc_percent": [float(v) for v in report.per_landmark_auc],
        "landmark_names": landmark_names(),
        "threshold_grid_mm": [float(v) for v in report.thresholds],
        "segment_lengths_mm": report.segment_lengths_mm,
    }
    (out_dir / "report.json").write_text(json.dumps(doc, sort_keys=True, indent=1))

    header = [f"L{j}" for j in range(1, NUM_LANDMARKS + 1)] + ["mean"]
    note_line = "# " + json.dumps(note, sort_keys=True) if note else None

    with open(out_dir / "distance_table.csv", "w", newline="") as f:
        if note_line:
            f.write(note_line + "\n")
        w = csv.writer(f)
        w.writerow(["metric"] + header)
        w.writerow(
            ["euclidean_mm"]
            + [f"{v:.4f}" for v in report.per_landmark_mean_mm]
            + [f"{report.mean_mm:.4f}"]
        )
    with open(out_dir / "auc_table.csv", "w", newline="") as f:
        if note_line:
            f.write(note_line + "\n")
        w = csv.writer(f)
        w.writerow(["metric"] + header)
        w.writerow(
            ["auc_percent"]
            + [f"{v:.4f}" for v in report.per_landmark_auc]
            + [f"{report.mean_auc:.4f}"]
        )
    with open(out_dir / "pck_curve.csv", "w", newline="") as f:
        if note_line:
            f.write(note_line + "\n")
        w = csv.writer(f)
        w.writerow(["threshold_mm", "pooled"] + header[:-1])
        for ti, thr in enumerate(report.thresholds):
            w.writerow(
                [f"{thr:.3f}", f"{report.pck['pooled'][ti]:.6f}"]
                + [f"{report.pck['per_landmark'][ti, j]:.6f}" for j in range(NUM_LANDMARKS)]
            )
