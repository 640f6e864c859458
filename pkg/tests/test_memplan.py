"""The symbolic memory planner must agree with the live meter, then scale."""

import numpy as np

from volpose.graph import select_checkpoints
from volpose.memplan import plan_memory
from volpose.model import DetectorConfig, build_detector


def measured_peaks(graph, shape):
    rng = np.random.default_rng(0)
    feeds = {
        "volume": rng.normal(size=(1, *shape)).astype(np.float32),
        "target": rng.normal(size=(16, *shape)).astype(np.float32),
    }
    graph.forward(feeds)
    graph.backward_plain()
    plain = graph.meter.peak
    graph.set_checkpoints(select_checkpoints(graph, "block_boundary"))
    graph.forward(feeds, discard=True)
    fwd = graph.meter.peak
    graph.backward_checkpointed()
    step = graph.meter.peak
    return plain, fwd, step


def test_plan_matches_live_meter_on_reference_detector():
    cfg = DetectorConfig(depth=3, base_channels=8, input_scale=1.0)
    graph = build_detector(cfg, seed=0)
    shape = (32, 32, 32)
    plain, fwd, step = measured_peaks(graph, shape)
    graph.set_checkpoints(select_checkpoints(graph, "block_boundary"))
    plan = plan_memory(graph, {"volume": (1, *shape), "target": (16, *shape)})
    assert plan.plain_step_peak == plain
    assert plan.forward_discard_peak == fwd
    assert plan.checkpointed_step_peak == step


def test_plan_matches_meter_small_depth2():
    cfg = DetectorConfig(depth=2, base_channels=4, input_scale=1.0)
    graph = build_detector(cfg, seed=1)
    shape = (16, 16, 16)
    plain, fwd, step = measured_peaks(graph, shape)
    graph.set_checkpoints(select_checkpoints(graph, "block_boundary"))
    plan = plan_memory(graph, {"volume": (1, *shape), "target": (16, *shape)})
    assert plan.plain_step_peak == plain
    assert plan.checkpointed_step_peak == step


def test_depth4_full_scale_report():
    # the paper-scale configuration: depth 4 on a 160^3 input, reported
    # symbolically (allocating it would need gigabytes)
    cfg = DetectorConfig(depth=4, base_channels=8, input_scale=1.0)
    graph = build_detector(cfg, seed=2)
    graph.set_checkpoints(select_checkpoints(graph, "block_boundary"))
    shape = (160, 160, 160)
    plan = plan_memory(graph, {"volume": (1, *shape), "target": (16, *shape)})
    assert plan.parameter_count > 0
    assert all(b >= 0 for b in plan.node_bytes)
    assert plan.checkpointed_step_peak < plan.plain_step_peak
    reduction = 1 - plan.checkpointed_step_peak / plan.plain_step_peak
    assert reduction > 0.25
    print(
        f"\ndepth-4 @160^3: {plan.parameter_count:,} params, "
        f"plain {plan.plain_step_peak/1e9:.2f} GB -> "
        f"checkpointed {plan.checkpointed_step_peak/1e9:.2f} GB "
        f"({reduction*100:.0f}% less)"
    )
