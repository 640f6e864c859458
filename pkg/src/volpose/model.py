"""The encoder-decoder landmark detector: graph construction, preprocessing,
training, and inference.

The network is a configurable 3-D U-shaped graph: ``depth`` encoder blocks
(convs + pool), a bottleneck block, matching decoder blocks (deconv + skip
concat + convs), and a final 1x1x1 conv producing 16 heatmap channels. Output
spatial shape equals input spatial shape. Training minimizes the mean squared
error between predicted and encoded ground-truth heatmaps with Adam at batch
size 1.

Volumes pass through a fixed preprocessing chain before the network: resample
by ``input_scale``, normalize to zero mean / unit variance, zero-pad to a
multiple of 2^depth. A ``NetFrame`` records the chain so decoded voxel
coordinates map back to original-frame mm exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from volpose import heatmap
from volpose.anatomy import NUM_LANDMARKS
from volpose.graph import Graph, GraphError, select_checkpoints
from volpose.optim import Adam
from volpose.registration import Pose
from volpose.serialize import save_model


@dataclass
class DetectorConfig:
    depth: int = 3
    base_channels: int = 8
    convs_per_block: int = 2
    input_scale: float = 0.5
    sigma_vox: float = 2.0
    in_channels: int = 1
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    dtype: str = "float32"

    def __post_init__(self):
        if self.depth < 1:
            raise GraphError(f"depth must be >= 1, got {self.depth}")
        if self.convs_per_block < 2:
            raise GraphError(f"convs_per_block must be >= 2, got {self.convs_per_block}")
        if not (0.0 < self.input_scale <= 1.0):
            raise GraphError(f"input_scale must be in (0, 1], got {self.input_scale}")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "DetectorConfig":
        return DetectorConfig(**d)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.5          # Adam moment term
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise GraphError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise GraphError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------

def build_detector(cfg: DetectorConfig, seed: int = 0) -> Graph:
    """Assemble the detector graph with seeded He-normal initialization."""
    rng = np.random.default_rng(seed)
    g = Graph(np.dtype(cfg.dtype))
    x = g.add_input("volume")

    def he(cout, cin, k):
        std = np.sqrt(2.0 / (cin * k**3))
        return rng.normal(scale=std, size=(cout, cin, k, k, k)).astype(g.dtype)

    def conv_bn_relu(prev, cin, cout, tag, block_output=False):
        c = g.add(
            "conv3d",
            [prev],
            params={"weight": he(cout, cin, 3), "bias": np.zeros(cout, dtype=g.dtype)},
            attrs={"tag": tag},
        )
        b = g.add(
            "batch_norm",
            [c],
            params={"gamma": np.ones(cout, dtype=g.dtype), "beta": np.zeros(cout, dtype=g.dtype)},
            state={
                "running_mean": np.zeros(cout, dtype=g.dtype),
                "running_var": np.ones(cout, dtype=g.dtype),
            },
            attrs={"eps": cfg.bn_eps, "momentum": cfg.bn_momentum, "tag": f"{tag}.bn"},
        )
        attrs = {"tag": f"{tag}.relu"}
        if block_output:
            attrs["block_output"] = True
        return g.add("relu", [b], attrs=attrs)

    def block(prev, cin, cout, name, mark_last=False):
        h = conv_bn_relu(prev, cin, cout, f"{name}.conv0")
        for i in range(1, cfg.convs_per_block):
            h = conv_bn_relu(
                h, cout, cout, f"{name}.conv{i}",
                block_output=mark_last and i == cfg.convs_per_block - 1,
            )
        return h

    chans = [cfg.base_channels * 2**i for i in range(cfg.depth + 1)]
    skips = []
    h = x
    cin = cfg.in_channels
    for level in range(cfg.depth):
        h = block(h, cin, chans[level], f"enc{level}")
        skips.append(h)
        h = g.add("max_pool3d", [h], attrs={"tag": f"enc{level}.pool", "block_output": True})
        cin = chans[level]
    h = block(h, cin, chans[cfg.depth], "bottleneck", mark_last=True)

    for level in reversed(range(cfg.depth)):
        cup = chans[level + 1]
        cdown = chans[level]
        std = np.sqrt(2.0 / cup)
        up = g.add(
            "deconv3d",
            [h],
            params={
                "weight": rng.normal(scale=std, size=(cup, cdown, 2, 2, 2)).astype(g.dtype),
                "bias": np.zeros(cdown, dtype=g.dtype),
            },
            attrs={"tag": f"dec{level}.up"},
        )
        cat = g.add("channel_concat", [up, skips[level]], attrs={"tag": f"dec{level}.concat"})
        h = block(cat, 2 * cdown, cdown, f"dec{level}", mark_last=True)

    out = g.add(
        "conv3d",
        [h],
        params={
            "weight": he(NUM_LANDMARKS, chans[0], 1),
            "bias": np.zeros(NUM_LANDMARKS, dtype=g.dtype),
        },
        attrs={"tag": "head", "block_output": True},
    )
    t = g.add_input("target")
    loss = g.add("l2_loss", [out, t], attrs={"tag": "loss"})
    g.set_loss(loss)
    return g


def output_node(graph: Graph) -> int:
    """The heatmap head: the prediction-side input of the loss node."""
    return graph.nodes[graph.loss_id].inputs[0]


def validate_input_shape(cfg: DetectorConfig, shape: tuple[int, int, int]) -> None:
    m = 2**cfg.depth
    bad = [n for n in shape if n % m != 0]
    if bad:
        req = [(-n) % m for n in shape]
        raise GraphError(
            f"input extents {shape} not divisible by 2^depth={m}; pad by {req} voxels"
        )


# ---------------------------------------------------------------------------
# preprocessing and the coordinate frame
# ---------------------------------------------------------------------------

@dataclass
class NetFrame:
    """Affine map between original-volume mm and network voxel indices.

    mm = origin + (net_voxel - pad_lo) * net_spacing, per axis (x, y, z).
    """

    orig_shape: tuple[int, int, int]        # (nz, ny, nx)
    orig_spacing: tuple[float, float, float]  # (sx, sy, sz)
    net_shape: tuple[int, int, int]         # padded (nz, ny, nx)
    net_spacing: tuple[float, float, float]
    origin_mm: tuple[float, float, float]
    pad_lo: tuple[int, int, int]            # (x, y, z) voxels

    def mm_to_net_voxel(self, xyz_mm: np.ndarray) -> np.ndarray:
        o = np.asarray(self.origin_mm)
        s = np.asarray(self.net_spacing)
        p = np.asarray(self.pad_lo, dtype=np.float64)
        return (np.asarray(xyz_mm, dtype=np.float64) - o) / s + p

    def net_voxel_to_mm(self, vox: np.ndarray) -> np.ndarray:
        o = np.asarray(self.origin_mm)
        s = np.asarray(self.net_spacing)
        p = np.asarray(self.pad_lo, dtype=np.float64)
        return o + (np.asarray(vox, dtype=np.float64) - p) * s


def _resample(volume: np.ndarray, scale: float) -> np.ndarray:
    """Downscale a (z, y, x) volume; box-average for integer factors,
    trilinear otherwise. Uses the half-voxel-center convention throughout."""
    if scale == 1.0:
        return volume.astype(np.float32)
    inv = 1.0 / scale
    if abs(inv - round(inv)) < 1e-9 and all(n % round(inv) == 0 for n in volume.shape):
        f = int(round(inv))
        nz, ny, nx = (n // f for n in volume.shape)
        return (
            volume.reshape(nz, f, ny, f, nx, f)
            .mean(axis=(1, 3, 5))
            .astype(np.float32)
        )
    new_shape = tuple(max(1, int(round(n * scale))) for n in volume.shape)
    grids = []
    for axis, n_new in enumerate(new_shape):
        n_old = volume.shape[axis]
        ratio = n_old / n_new
        coords = (np.arange(n_new) + 0.5) * ratio - 0.5
        grids.append(np.clip(coords, 0.0, n_old - 1.0))
    out = volume.astype(np.float64)
    for axis, coords in enumerate(grids):
        lo = np.floor(coords).astype(int)
        hi = np.minimum(lo + 1, volume.shape[axis] - 1)
        frac = coords - lo
        a = np.take(out, lo, axis=axis)
        b = np.take(out, hi, axis=axis)
        shape = [1, 1, 1]
        shape[axis] = len(coords)
        out = a + (b - a) * frac.reshape(shape)
    return out.astype(np.float32)


def prepare_volume(
    volume: np.ndarray, spacing, cfg: DetectorConfig
) -> tuple[np.ndarray, NetFrame]:
    """Resample, normalize (zero mean, unit variance), pad to divisibility.

    Returns the (1, D, H, W) network input and the frame for coordinate
    round trips. Padding uses zeros, which equal the post-normalization mean.
    """
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,)).copy()  # (sx, sy, sz)
    scaled = _resample(volume, cfg.input_scale)
    ratios = [volume.shape[i] / scaled.shape[i] for i in range(3)]  # (z, y, x) order
    net_spacing = (spacing[0] * ratios[2], spacing[1] * ratios[1], spacing[2] * ratios[0])
    origin = tuple(
        (0.5 * r - 0.5) * s for r, s in zip((ratios[2], ratios[1], ratios[0]), spacing)
    )
    std = float(scaled.std())
    normalized = (scaled - scaled.mean()) / (std if std > 0 else 1.0)
    m = 2**cfg.depth
    pads = [(-n) % m for n in normalized.shape]  # (z, y, x)
    pad_lo = [p // 2 for p in pads]
    pad_hi = [p - lo for p, lo in zip(pads, pad_lo)]
    padded = np.pad(normalized, tuple(zip(pad_lo, pad_hi)))
    frame = NetFrame(
        orig_shape=tuple(volume.shape),
        orig_spacing=tuple(float(v) for v in spacing),
        net_shape=tuple(padded.shape),
        net_spacing=tuple(float(v) for v in net_spacing),
        origin_mm=tuple(float(v) for v in origin),
        pad_lo=(pad_lo[2], pad_lo[1], pad_lo[0]),  # reorder to (x, y, z)
    )
    return padded[None].astype(np.float32), frame


def encode_targets(pose: Pose, frame: NetFrame, sigma_vox: float) -> np.ndarray:
    """Ground-truth heatmaps in the network frame."""
    stack = np.zeros((NUM_LANDMARKS,) + frame.net_shape, dtype=np.float32)
    nz, ny, nx = frame.net_shape
    bounds = np.array([nx - 1, ny - 1, nz - 1], dtype=np.float64)
    for j in range(NUM_LANDMARKS):
        if not pose.present[j]:
            continue
        vox = frame.mm_to_net_voxel(pose.xyz_mm[j])
        if np.any(vox < 0) or np.any(vox > bounds):
            raise GraphError(
                f"landmark {j + 1} maps to net voxel {vox.round(2)}, outside {frame.net_shape}"
            )
        heatmap.encode_channel(vox, frame.net_shape, sigma_vox, out=stack[j])
    return stack


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def infer(graph: Graph, volume: np.ndarray, spacing, cfg: DetectorConfig) -> tuple[np.ndarray, NetFrame]:
    """Predicted 16-channel heatmap stack in the network frame."""
    net_in, frame = prepare_volume(volume, spacing, cfg)
    validate_input_shape(cfg, net_in.shape[1:])
    out = output_node(graph)
    graph.forward({"volume": net_in}, to_node=out)
    return graph.value(out).copy(), frame


def decode_prediction(
    stack: np.ndarray, frame: NetFrame, window: int = 5, confidence_floor: float = 0.1
) -> heatmap.DecodedPose:
    """Decode network-frame heatmaps into original-frame mm coordinates."""
    dec = heatmap.decode_voxels(stack, window=window, confidence_floor=confidence_floor)
    dec.xyz_mm = frame.net_voxel_to_mm(dec.voxels)
    return dec


def predict_pose(
    graph: Graph, volume: np.ndarray, spacing, cfg: DetectorConfig,
    window: int = 5, confidence_floor: float = 0.1,
) -> heatmap.DecodedPose:
    stack, frame = infer(graph, volume, spacing, cfg)
    return decode_prediction(stack, frame, window, confidence_floor)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    loss_curve: list[tuple[int, int, float]] = field(default_factory=list)  # (epoch, step, loss)
    epoch_means: list[float] = field(default_factory=list)


def _prepare_dataset(dataset, cfg: DetectorConfig):
    prepared = []
    for idx, (volume, pose, spacing) in enumerate(dataset):
        net_in, frame = prepare_volume(volume, spacing, cfg)
        validate_input_shape(cfg, net_in.shape[1:])
        try:
            target = encode_targets(pose, frame, cfg.sigma_vox)
        except GraphError as e:
            raise GraphError(f"case {idx}: {e}") from e
        prepared.append((net_in, target))
    return prepared


def train(
    graph: Graph,
    dataset: list[tuple[np.ndarray, Pose, np.ndarray]],
    train_cfg: TrainConfig,
    detector_cfg: DetectorConfig,
    ckpt_policy: str = "off",
    every_k: int = 8,
    out_dir: str | Path | None = None,
    save_note: dict | None = None,
) -> TrainResult:
    """Optimize the detector on (volume, pose, spacing) cases.

    ``ckpt_policy``: 'off' (plain backward), 'block_boundary', or 'every_k'.
    Per-epoch parameter checkpoints land in ``out_dir`` when given. The loss
    curve records every step; training aborts on a non-finite loss.
    """
    if not dataset:
        raise GraphError("training dataset is empty")
    prepared = _prepare_dataset(dataset, detector_cfg)
    use_ckpt = ckpt_policy != "off"
    if use_ckpt:
        graph.set_checkpoints(select_checkpoints(graph, ckpt_policy, k=every_k))
    adam = Adam(
        graph.parameters(),
        lr=train_cfg.lr,
        beta1=train_cfg.beta1,
        beta2=train_cfg.beta2,
        eps=train_cfg.eps,
    )
    rng = np.random.default_rng(train_cfg.seed)
    result = TrainResult()
    accum: dict[str, np.ndarray] | None = None
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(len(prepared))
        epoch_losses = []
        for step, case_idx in enumerate(order):
            net_in, target = prepared[case_idx]
            feeds = {"volume": net_in, "target": target}
            try:
                loss = graph.forward(feeds, discard=use_ckpt, update_stats=True)
                grads = graph.backward_checkpointed() if use_ckpt else graph.backward_plain()
            except GraphError as e:
                raise GraphError(f"epoch {epoch} step {step}: {e}") from e
            if not np.isfinite(loss):
                raise GraphError(f"epoch {epoch} step {step}: non-finite loss {loss}")
            if train_cfg.batch_size == 1:
                adam.step(grads)
            else:
                if accum is None:
                    accum = {k: g.copy() for k, g in grads.items()}
                else:
                    for k, g in grads.items():
                        accum[k] += g
                if (step + 1) % train_cfg.batch_size == 0 or step == len(order) - 1:
                    count = (step % train_cfg.batch_size) + 1
                    adam.step({k: g / count for k, g in accum.items()})
                    accum = None
            result.loss_curve.append((epoch, step, float(loss)))
            epoch_losses.append(loss)
        result.epoch_means.append(float(np.mean(epoch_losses)))
        if out_dir is not None:
            save_model(
                Path(out_dir) / f"epoch_{epoch:03d}",
                graph,
                extras={"detector_config.json": detector_cfg.to_dict()},
                note=save_note,
            )
    return result


def write_loss_curve(path: str | Path, result: TrainResult, header_comment: str = "") -> None:
    with open(path, "w", newline="") as f:
        if header_comment:
            f.write(f"# {header_comment}\n")
        writer = csv.writer(f)
        writer.writerow(["epoch", "step", "loss"])
        for epoch, step, loss in result.loss_curve:
            writer.writerow([epoch, step, f"{loss:.9e}"])
