"""Test-time self-supervised refinement against a pose library.

Per case, on a private copy of the trained detector: infer heatmaps, decode
an intermediate pose, align every library pose to it and keep the best K,
average their Gaussian maps into a label proxy, and take one Adam step
toward the proxy. Support set and proxy are rebuilt every iteration, so the
supervision evolves with the prediction. The base model is never mutated;
batch-norm running statistics stay frozen throughout (normalization always
uses live per-volume statistics, and no step updates the stored buffers).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from volpose import fileio
from volpose.anatomy import NUM_LANDMARKS
from volpose.graph import Graph, GraphError, NonFiniteValue
from volpose.heatmap import DecodedPose
from volpose.model import DetectorConfig, decode_prediction, output_node, prepare_volume
from volpose.optim import Adam
from volpose.registration import (
    PoseLibrary,
    Pose,
    RetrievalDeclined,
    build_label_proxy,
    retrieve_support,
)


@dataclass
class RefineConfig:
    iterations: int = 6
    lr: float = 5e-4
    k_support: int = 10
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    window: int = 5
    confidence_floor: float = 0.1
    snapshot_each_iter: bool = False

    def __post_init__(self):
        if self.iterations < 0:
            raise GraphError(f"iterations must be >= 0, got {self.iterations}")
        if self.lr <= 0:
            raise GraphError(f"lr must be positive, got {self.lr}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class IterationRecord:
    iteration: int
    loss_pre: float               # L2 vs this iteration's proxy, before the step
    loss_post: float              # same proxy, after the step
    pose_mm: np.ndarray           # the decoded intermediate pose (16, 3)
    support_ids: list[str]
    mean_support_error: float

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "loss_pre": self.loss_pre,
            "loss_post": self.loss_post,
            "pose_mm": [[float(v) for v in row] for row in self.pose_mm],
            "support_ids": self.support_ids,
            "mean_support_error": self.mean_support_error,
        }


@dataclass
class RefineResult:
    pose: DecodedPose             # decode after the final update
    initial_pose: DecodedPose     # plain inference, before any update
    trace: list[IterationRecord]
    declined: bool = False
    aborted: bool = False
    note: str = ""

    def trace_dict(self) -> dict:
        return {
            "declined": self.declined,
            "aborted": self.aborted,
            "note": self.note,
            "iterations": [rec.to_dict() for rec in self.trace],
        }


def refine(
    base_graph: Graph,
    volume: np.ndarray,
    spacing,
    library: PoseLibrary,
    detector_cfg: DetectorConfig,
    cfg: RefineConfig,
) -> RefineResult:
    """Refine one case. The base graph's parameters are copied, never touched."""
    graph = base_graph.clone()
    net_in, frame = prepare_volume(volume, spacing, detector_cfg)
    out_id = output_node(graph)
    adam = Adam(
        graph.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps
    )

    zero_target = np.zeros((NUM_LANDMARKS,) + net_in.shape[1:], dtype=np.float32)
    graph.forward({"volume": net_in, "target": zero_target})
    initial = decode_prediction(
        graph.value(out_id), frame, cfg.window, cfg.confidence_floor
    )
    current = initial
    trace: list[IterationRecord] = []

    for it in range(cfg.iterations):
        try:
            support = retrieve_support(
                current.xyz_mm, current.valid, library, k=cfg.k_support
            )
        except RetrievalDeclined as e:
            return RefineResult(current, initial, trace, declined=True, note=str(e))
        proxy = _proxy_in_net_frame(support, frame, detector_cfg.sigma_vox)
        try:
            # the prediction is already on the graph from the last forward;
            # swap in the fresh proxy as the loss target and backpropagate
            graph.feed("target", proxy)
            loss_pre = _mse(graph.value(out_id), proxy)
            grads = graph.backward_plain()
            adam.step(grads)
            loss_post = graph.forward({"volume": net_in, "target": proxy})
        except NonFiniteValue as e:
            return RefineResult(
                initial, initial, trace, aborted=True, note=f"non-finite value: {e}"
            )
        current = decode_prediction(
            graph.value(out_id), frame, cfg.window, cfg.confidence_floor
        )
        trace.append(
            IterationRecord(
                iteration=it,
                loss_pre=loss_pre,
                loss_post=float(loss_post),
                pose_mm=current.xyz_mm.copy(),
                support_ids=support.ids(),
                mean_support_error=float(
                    np.mean([e.error_mm for e in support.entries])
                ),
            )
        )
    return RefineResult(current, initial, trace)


def _proxy_in_net_frame(support, frame, sigma_vox) -> np.ndarray:
    from volpose.registration import SupportEntry, SupportSet

    entries = [
        SupportEntry(
            e.atlas_id,
            e.transform,
            e.error_mm,
            Pose(frame.mm_to_net_voxel(e.aligned.xyz_mm), e.aligned.present),
        )
        for e in support.entries
    ]
    # aligned poses are now in net-voxel units; encode with unit spacing
    return build_label_proxy(SupportSet(entries), frame.net_shape, 1.0, sigma_vox)


def _mse(a: np.ndarray, b: np.ndarray) -> float:
    diff = (a - b).ravel()
    return float(np.dot(diff, diff) / diff.size)


@dataclass
class BatchSummary:
    n_cases: int
    n_declined: int
    n_aborted: int
    mean_final_proxy_loss: float | None


def refine_batch(
    base_graph: Graph,
    cases: list[tuple[str, np.ndarray, np.ndarray]],   # (case id, volume, spacing)
    library: PoseLibrary,
    detector_cfg: DetectorConfig,
    cfg: RefineConfig,
    out_dir: str | Path | None = None,
    stamp: dict | None = None,
) -> tuple[dict[str, RefineResult], BatchSummary]:
    """Independent per-case refinement; one failing case never aborts the rest."""
    results: dict[str, RefineResult] = {}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    for case_id, volume, spacing in cases:
        try:
            res = refine(base_graph, volume, spacing, library, detector_cfg, cfg)
        except Exception as e:  # defensive: isolate per-case failures
            dummy = DecodedPose(
                np.zeros((16, 3)), np.zeros(16), np.zeros(16, dtype=bool)
            )
            res = RefineResult(dummy, dummy, [], aborted=True, note=f"error: {e}")
        results[case_id] = res
        if out_dir is not None and cfg.snapshot_each_iter:
            doc = {**(stamp or {}), **res.trace_dict()}
            (out_dir / f"{case_id}_trace.json").write_text(json.dumps(doc, indent=1))
            for rec in res.trace:
                fileio.save_pose(
                    out_dir / f"{case_id}_iter{rec.iteration:02d}_pose.json",
                    Pose(rec.pose_mm),
                    extra=stamp,
                )
    final_losses = [
        res.trace[-1].loss_post for res in results.values() if res.trace and not res.aborted
    ]
    summary = BatchSummary(
        n_cases=len(cases),
        n_declined=sum(r.declined for r in results.values()),
        n_aborted=sum(r.aborted for r in results.values()),
        mean_final_proxy_loss=float(np.mean(final_losses)) if final_losses else None,
    )
    return results, summary
