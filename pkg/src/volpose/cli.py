"""Command-line surface tying the toolkit into reproducible runs.

Subcommands: phantom-gen, build-library, train, infer, refine, eval. Every
command is a pure function of its resolved configuration and input files;
rerunning with the same inputs yields byte-identical artifacts. Exit codes:
0 on success, 1 on runtime failure, 2 on usage or configuration errors.
Set VOLPOSE_LOG=debug|info|warning to control verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from volpose import fileio
from volpose.anatomy import LANDMARKS
from volpose.config import RunConfig
from volpose.graph import GraphError
from volpose.heatmap import DecodedPose
from volpose.metrics import build_report, write_report
from volpose.model import (
    DetectorConfig,
    TrainConfig,
    build_detector,
    decode_prediction,
    infer,
    train,
    write_loss_curve,
)
from volpose.phantom import PhantomSpec, augment, make_dataset, sample_case
from volpose.refine import RefineConfig, refine_batch
from volpose.registration import Pose, PoseLibrary
from volpose.serialize import load_model, save_model

log = logging.getLogger("volpose")


class UsageError(RuntimeError):
    """Configuration or input-path problems: exit code 2."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _load_manifest_cases(data_dir: Path, split: str) -> list[dict]:
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise UsageError(f"dataset manifest not found: {manifest_path}")
    manifest = fileio.load_manifest(manifest_path)
    cases = [c for c in manifest["cases"] if c["split"] == split]
    if not cases:
        raise UsageError(f"manifest has no '{split}' cases")
    return cases


def _decoded_to_pose(dec: DecodedPose) -> Pose:
    return Pose(dec.xyz_mm, dec.valid.copy())


def _load_detector(model_dir: Path):
    if not (model_dir / "graph.json").exists():
        raise UsageError(f"model directory not found or incomplete: {model_dir}")
    graph = load_model(model_dir)
    cfg = DetectorConfig.from_dict(
        json.loads((model_dir / "detector_config.json").read_text())
    )
    return graph, cfg


# ---------------------------------------------------------------------------
# phantom-gen
# ---------------------------------------------------------------------------

def cmd_phantom_gen(args) -> int:
    spec = PhantomSpec(
        shape=(args.size, args.size, args.size),
        spacing_mm=args.spacing,
        left_intensity_offset=args.left_offset,
        noise_multiplicative=args.noise_mult,
        noise_additive=args.noise_add,
        shadow_probability=args.shadow_prob,
    )
    cfg = RunConfig(
        "phantom-gen",
        {
            "spec": spec.to_dict(),
            "n_train": args.n_train,
            "n_test": args.n_test,
            "seed": args.seed,
        },
    )
    out = Path(args.out)
    manifest = make_dataset(
        spec, args.n_train, args.n_test, out, seed=args.seed, stamp=cfg.note()
    )
    manifest.update(cfg.note())
    fileio.save_manifest(out / "manifest.json", manifest)
    cfg.save(out / "run_config.json")
    log.info("wrote %d cases under %s", len(manifest["cases"]), out)
    return 0


# ---------------------------------------------------------------------------
# build-library
# ---------------------------------------------------------------------------

def cmd_build_library(args) -> int:
    data_dir = Path(args.data)
    cases = _load_manifest_cases(data_dir, args.split)
    cfg = RunConfig("build-library", {"data": str(data_dir), "split": args.split})
    ids, poses, sources = [], [], []
    for case in cases:
        pose, _ = fileio.load_pose(data_dir / case["pose"])
        ids.append(case["id"])
        poses.append(pose)
        sources.append(args.split)
    library = PoseLibrary(ids, poses, sources)
    library.save(args.out)
    doc = json.loads(Path(args.out).read_text())
    doc.update(cfg.note())
    Path(args.out).write_text(json.dumps(doc, sort_keys=True, indent=1))
    log.info("library of %d poses -> %s", len(ids), args.out)
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    data_dir = Path(args.data)
    cases = _load_manifest_cases(data_dir, "train")
    det_cfg = DetectorConfig(
        depth=args.depth,
        base_channels=args.base_channels,
        convs_per_block=args.convs_per_block,
        input_scale=args.input_scale,
        sigma_vox=args.sigma,
    )
    train_cfg = TrainConfig(
        lr=args.lr, beta1=args.beta1, epochs=args.epochs, seed=args.seed,
        batch_size=args.batch_size,
    )
    run_cfg = RunConfig(
        "train",
        {
            "data": str(data_dir),
            "detector": det_cfg.to_dict(),
            "train": train_cfg.to_dict(),
            "gcp": args.gcp,
            "every_k": args.every_k,
            "augment": args.augment,
            "model_seed": args.model_seed,
        },
    )
    dataset = []
    for case in cases:
        volume, spacing = fileio.load_volume(data_dir / case["volume"])
        pose, _ = fileio.load_pose(data_dir / case["pose"])
        dataset.append((volume, pose, spacing))
    aug_chains = {
        "none": (),
        "flips": (("flip_x",),),
        # mirrors the reference protocol's flip/rotation expansion (x8)
        "flips-rotations": (
            ("flip_x",), ("flip_y",), ("flip_z",),
            ("rot90_x",), ("rot90_y",), ("rot90_z",),
            ("rot90_z", "rot90_z"),
        ),
    }[args.augment]
    if aug_chains:
        from volpose.phantom import PhantomCase

        extra = []
        for chain in aug_chains:
            for volume, pose, spacing in dataset[: len(cases)]:
                case = PhantomCase(volume, pose, float(spacing[0]))
                for op in chain:
                    case = augment(case, op)
                extra.append((case.volume, case.pose, spacing))
        dataset.extend(extra)

    graph = build_detector(det_cfg, seed=args.model_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(
        graph,
        dataset,
        train_cfg,
        det_cfg,
        ckpt_policy=args.gcp,
        every_k=args.every_k,
        out_dir=out / "epochs" if args.save_epochs else None,
        save_note=run_cfg.note(),
    )
    save_model(
        out / "model",
        graph,
        extras={
            "detector_config.json": det_cfg.to_dict(),
            "train_config.json": {**train_cfg.to_dict(), **run_cfg.note()},
        },
        note=run_cfg.note(),
    )
    write_loss_curve(out / "loss_curve.csv", result, header_comment=json.dumps(run_cfg.note(), sort_keys=True))
    run_cfg.save(out / "run_config.json")
    log.info(
        "trained %d epochs on %d cases; final epoch mean loss %.3e",
        train_cfg.epochs, len(dataset), result.epoch_means[-1],
    )
    return 0


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def _input_volumes(args) -> list[tuple[str, Path]]:
    if args.volumes:
        return [(Path(v).stem, Path(v).with_suffix("")) for v in args.volumes]
    if not args.data:
        raise UsageError("provide either --data with --split, or --volumes")
    data_dir = Path(args.data)
    cases = _load_manifest_cases(data_dir, args.split)
    return [(c["id"], data_dir / c["volume"]) for c in cases]


def cmd_infer(args) -> int:
    graph, det_cfg = _load_detector(Path(args.model))
    run_cfg = RunConfig(
        "infer",
        {
            "model": str(args.model),
            "window": args.window,
            "confidence_floor": args.floor,
            "detector": det_cfg.to_dict(),
        },
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for case_id, vol_path in _input_volumes(args):
        volume, spacing = fileio.load_volume(vol_path)
        stack, frame = infer(graph, volume, spacing, det_cfg)
        dec = decode_prediction(stack, frame, window=args.window, confidence_floor=args.floor)
        fileio.save_pose(
            out / f"{case_id}_pose.json",
            _decoded_to_pose(dec),
            spacing=spacing,
            extra={
                **run_cfg.note(),
                "confidence": [float(v) for v in dec.confidence],
            },
        )
        if args.dump_heatmaps:
            for j in range(stack.shape[0]):
                fileio.save_volume(
                    out / f"{case_id}_ch{j:02d}",
                    stack[j],
                    frame.net_spacing,
                    extra=run_cfg.note(),
                )
        log.info("inferred %s", case_id)
    run_cfg.save(out / "run_config.json")
    return 0


# ---------------------------------------------------------------------------
# refine
# ---------------------------------------------------------------------------

def cmd_refine(args) -> int:
    graph, det_cfg = _load_detector(Path(args.model))
    if not Path(args.library).exists():
        raise UsageError(f"pose library not found: {args.library}")
    library = PoseLibrary.load(args.library)
    if args.k > len(library):
        raise UsageError(f"--k {args.k} exceeds library size {len(library)}")
    refine_cfg = RefineConfig(
        iterations=args.iterations,
        lr=args.lr,
        k_support=args.k,
        window=args.window,
        confidence_floor=args.floor,
        snapshot_each_iter=args.snapshot_each_iter,
    )
    run_cfg = RunConfig(
        "refine",
        {
            "model": str(args.model),
            "library": str(args.library),
            "refine": refine_cfg.to_dict(),
            "detector": det_cfg.to_dict(),
        },
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cases = []
    for case_id, vol_path in _input_volumes(args):
        volume, spacing = fileio.load_volume(vol_path)
        cases.append((case_id, volume, spacing))
    results, summary = refine_batch(
        graph, cases, library, det_cfg, refine_cfg,
        out_dir=out if refine_cfg.snapshot_each_iter else None,
        stamp=run_cfg.note(),
    )
    for case_id, res in results.items():
        fileio.save_pose(
            out / f"{case_id}_pose.json",
            _decoded_to_pose(res.pose),
            extra={
                **run_cfg.note(),
                "declined": res.declined,
                "aborted": res.aborted,
                "note": res.note,
                "confidence": [float(v) for v in res.pose.confidence],
            },
        )
    summary_doc = {
        **run_cfg.note(),
        "n_cases": summary.n_cases,
        "n_declined": summary.n_declined,
        "n_aborted": summary.n_aborted,
        "mean_final_proxy_loss": summary.mean_final_proxy_loss,
    }
    (out / "refine_summary.json").write_text(json.dumps(summary_doc, sort_keys=True, indent=1))
    run_cfg.save(out / "run_config.json")
    log.info("refined %d cases (%d declined)", summary.n_cases, summary.n_declined)
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _collect_poses(directory: Path) -> dict[str, tuple[Pose, dict]]:
    out = {}
    for path in sorted(directory.glob("*_pose.json")):
        case_id = path.name[: -len("_pose.json")]
        out[case_id] = fileio.load_pose(path)
    return out


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    if not pred_dir.is_dir():
        raise UsageError(f"prediction directory not found: {pred_dir}")
    if not gt_dir.is_dir():
        raise UsageError(f"ground-truth directory not found: {gt_dir}")
    preds = _collect_poses(pred_dir)
    gts = _collect_poses(gt_dir)
    common = sorted(set(preds) & set(gts))
    if not common:
        raise UsageError("no case ids shared between prediction and ground-truth dirs")
    thresholds = np.arange(0.0, args.grid_max + 1e-9, args.grid_step)
    run_cfg = RunConfig(
        "eval",
        {
            "pred": str(pred_dir),
            "gt": str(gt_dir),
            "grid_max": args.grid_max,
            "grid_step": args.grid_step,
        },
    )
    # spacing agreement guard, where both sides carry metadata
    for cid in common:
        ps = preds[cid][1].get("spacing_mm")
        gs = gts[cid][1].get("spacing_mm")
        if ps is not None and gs is not None and not np.allclose(ps, gs):
            raise UsageError(f"case {cid}: spacing metadata disagrees ({ps} vs {gs})")
    report = build_report(
        {cid: preds[cid][0] for cid in common},
        {cid: gts[cid][0] for cid in common},
        thresholds,
    )
    write_report(report, args.out, config_note=run_cfg.note())
    run_cfg.save(Path(args.out) / "run_config.json")
    log.info(
        "evaluated %d cases: mean %.3f mm, AUC %.2f%%",
        report.case_count, report.mean_mm, report.mean_auc,
    )
    return 0


# ---------------------------------------------------------------------------
# landmark table
# ---------------------------------------------------------------------------

def cmd_landmarks(args) -> int:
    rows = [
        {
            "index": ld.index,
            "name": ld.name,
            "side": ld.side,
            "swap_with": ld.swap_with,
            "registration_subset": ld.in_registration_subset,
        }
        for ld in LANDMARKS
    ]
    print(json.dumps(rows, indent=1))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="volpose", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("phantom-gen", help="generate a synthetic phantom dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, default=50)
    g.add_argument("--n-test", type=int, default=10)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--spacing", type=float, default=1.0)
    g.add_argument("--left-offset", type=float, default=0.0,
                   help="left-limb intensity offset; 0 is the hardest symmetry")
    g.add_argument("--noise-mult", type=float, default=0.08)
    g.add_argument("--noise-add", type=float, default=0.02)
    g.add_argument("--shadow-prob", type=float, default=0.08)
    g.set_defaults(func=cmd_phantom_gen)

    b = sub.add_parser("build-library", help="collect poses into a library file")
    b.add_argument("--data", required=True)
    b.add_argument("--split", default="train")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build_library)

    t = sub.add_parser("train", help="train the landmark detector")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--beta1", type=float, default=0.5)
    t.add_argument("--batch-size", type=int, default=1)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--model-seed", type=int, default=0)
    t.add_argument("--depth", type=int, default=3)
    t.add_argument("--base-channels", type=int, default=8)
    t.add_argument("--convs-per-block", type=int, default=2)
    t.add_argument("--input-scale", type=float, default=0.5)
    t.add_argument("--sigma", type=float, default=2.0)
    t.add_argument("--gcp", choices=("off", "block_boundary", "every_k"), default="off")
    t.add_argument("--every-k", type=int, default=8)
    t.add_argument("--augment", choices=("none", "flips", "flips-rotations"),
                   default="none", help="expand the training set with label-consistent"
                   " flips and quarter rotations")
    t.add_argument("--save-epochs", action="store_true", default=True)
    t.add_argument("--no-save-epochs", dest="save_epochs", action="store_false")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict poses for volumes")
    i.add_argument("--model", required=True)
    i.add_argument("--data")
    i.add_argument("--split", default="test")
    i.add_argument("--volumes", nargs="*")
    i.add_argument("--out", required=True)
    i.add_argument("--window", type=int, default=5)
    i.add_argument("--floor", type=float, default=0.1)
    i.add_argument("--dump-heatmaps", action="store_true")
    i.set_defaults(func=cmd_infer)

    r = sub.add_parser("refine", help="test-time refinement against a pose library")
    r.add_argument("--model", required=True)
    r.add_argument("--data")
    r.add_argument("--split", default="test")
    r.add_argument("--volumes", nargs="*")
    r.add_argument("--library", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--iterations", type=int, default=6)
    r.add_argument("--lr", type=float, default=5e-4)
    r.add_argument("--k", type=int, default=10)
    r.add_argument("--window", type=int, default=5)
    r.add_argument("--floor", type=float, default=0.1)
    r.add_argument("--snapshot-each-iter", action="store_true")
    r.set_defaults(func=cmd_refine)

    e = sub.add_parser("eval", help="compare predicted poses against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--grid-max", type=float, default=30.0)
    e.add_argument("--grid-step", type=float, default=0.5)
    e.set_defaults(func=cmd_eval)

    lm = sub.add_parser("landmarks", help="print the canonical landmark table")
    lm.set_defaults(func=cmd_landmarks)
    return p


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("VOLPOSE_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (GraphError, ValueError, OSError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
