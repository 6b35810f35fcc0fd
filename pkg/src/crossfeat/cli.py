"""Command-line front end.

Subcommands: ``train``, ``eval``, ``sweep-lambda``, ``make-synthetic``,
``match``. Exit codes: 0 success, 2 usage/configuration error, 1 runtime
failure. Every command echoes its fully resolved configuration into the
output directory so runs are reproducible from the echo plus the seed.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .datasets import (
    DatasetError,
    SyntheticParams,
    load_dataset,
    make_synthetic_dataset,
    split_dataset,
)
from .evaluation import (
    DEFAULT_EPSILON,
    DEFAULT_KS,
    EvaluationError,
    evaluate_dataset,
    evaluate_external_pair,
    evaluate_keypoint_sets,
    MetricsReport,
    mutual_nn_match,
    plot_sweep,
    sweep_lambda,
    write_keypoints_file,
)
from .losses import LossError
from .model import CheckpointError, ModelError, extract_keypoints, load_model
from .trainer import TrainingError, train
from .transforms import TransformConfigError

USAGE_ERROR = 2
RUNTIME_ERROR = 1

_CONFIG_ERRORS = (ConfigError, DatasetError, TrainingError, ModelError,
                  TransformConfigError, EvaluationError, LossError, ValueError)


def _load_run_config(args) -> RunConfig:
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    config.merge_overrides(args.set or [])
    return config


def _split_from_args(manifest, args):
    if getattr(args, "test_fraction", None) is not None:
        return split_dataset(manifest, test_fraction=args.test_fraction,
                             seed=args.split_seed)
    if getattr(args, "per_scene_count", None) is not None:
        return split_dataset(manifest, per_scene_count=args.per_scene_count,
                             seed=args.split_seed)
    return manifest, manifest


def cmd_train(args) -> int:
    config = _load_run_config(args)
    out_dir = Path(args.out)
    overrides = {}
    if args.preset:
        overrides["preset"] = args.preset.replace("-", "_")
    if args.lam is not None:
        overrides["lambda"] = args.lam
    if args.max_steps is not None:
        overrides["max_steps"] = args.max_steps
    if args.seed is not None:
        overrides["seed"] = args.seed
    for key, value in overrides.items():
        config.set("trainer", key, value)
    train_config = config.train_config(
        checkpoint_path=str(out_dir / "model.ckpt"),
        log_path=str(out_dir / "train_log.tsv"))
    if train_config.max_steps is None and train_config.epochs is None:
        train_config = replace(train_config, max_steps=500)
    model_config = config.model_config()
    manifest = load_dataset(args.data, args.layout)
    train_manifest, _ = _split_from_args(manifest, args)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.write_echo(out_dir, {"trainer": train_config, "model": model_config})
    result = train(train_config, train_manifest, model_config)
    print(f"trained {train_config.resolve_max_steps(len(train_manifest))} steps; "
          f"checkpoint: {result.checkpoint_path}; log: {result.log_path}")
    return 0


def cmd_eval(args) -> int:
    config = _load_run_config(args)
    ks = tuple(args.k) if args.k else tuple(config.eval_option("ks", DEFAULT_KS))
    epsilon = args.epsilon if args.epsilon is not None else config.eval_option(
        "epsilon", DEFAULT_EPSILON)
    nms_radius = config.eval_option("nms_radius", None)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_dataset(args.data, args.layout)
    _, test_manifest = _split_from_args(manifest, args)
    if args.external:
        from .transforms import CorrespondenceMap

        rows = []
        for i in range(len(test_manifest)):
            pair = test_manifest.load_pair(i)
            safe_id = pair.pair_id.replace("/", "_")
            rows.extend(evaluate_external_pair(
                Path(args.external) / f"{safe_id}.a.txt",
                Path(args.external) / f"{safe_id}.b.txt",
                pair.correspondence, ks, epsilon, pair_id=pair.pair_id))
        report = MetricsReport(rows=tuple(rows), epsilon=epsilon)
    else:
        report = evaluate_dataset(args.checkpoint, test_manifest, ks, epsilon, nms_radius)
    config.write_echo(out_dir)
    tsv, js = report.save(out_dir / "metrics")
    for agg in report.aggregate():
        cmr = "n/a" if agg["mean_CMR"] is None else f"{agg['mean_CMR']:.2f}%"
        print(f"K={agg['K']}: NC={agg['mean_NC']:.1f} NCM={agg['mean_NCM']:.1f} CMR={cmr}")
    print(f"report: {tsv} {js}")
    return 0


def cmd_sweep(args) -> int:
    config = _load_run_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.seed is not None:
        config.set("trainer", "seed", args.seed)
    if args.max_steps is not None:
        config.set("trainer", "max_steps", args.max_steps)
    train_config = config.train_config()
    if train_config.max_steps is None and train_config.epochs is None:
        train_config = replace(train_config, max_steps=500)
    model_config = config.model_config()
    ks = tuple(args.k) if args.k else tuple(config.eval_option("ks", DEFAULT_KS))
    epsilon = config.eval_option("epsilon", DEFAULT_EPSILON)
    manifest = load_dataset(args.data, args.layout)
    train_manifest, test_manifest = _split_from_args(manifest, args)
    config.write_echo(out_dir, {"trainer": train_config, "model": model_config})
    lambdas = tuple(args.lambdas)
    seeds = tuple(args.seeds)

    def progress(lam, seed, report):
        agg = report.aggregate()[0]
        print(f"lambda={lam:g} seed={seed}: mean NCM (K={agg['K']}) = {agg['mean_NCM']:.2f}",
              flush=True)

    result = sweep_lambda(train_config, model_config, train_manifest, test_manifest,
                          lambdas, seeds, ks, epsilon, out_dir=out_dir,
                          progress=progress)
    print(f"sweep table: {out_dir / 'sweep.tsv'}; plot: {out_dir / 'sweep.png'}")
    return 0


def cmd_synth(args) -> int:
    params = SyntheticParams(size=(args.size, args.size))
    manifest = make_synthetic_dataset(args.out, args.n, params=params, seed=args.seed,
                                      source_dir=args.source)
    manifest.save(Path(args.out) / "manifest.tsv")
    print(f"wrote {len(manifest)} pairs under {args.out}")
    return 0


def cmd_match(args) -> int:
    model, _ = load_model(args.checkpoint)
    from .datasets import read_image_gray

    image_a = read_image_gray(args.image_a)
    image_b = read_image_gray(args.image_b)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    radius = args.nms_radius if args.nms_radius is not None else model.config.nms_radius
    kps_a = extract_keypoints(model(image_a), args.k, radius)
    kps_b = extract_keypoints(model(image_b), args.k, radius)
    write_keypoints_file(out_dir / "keypoints_a.txt", kps_a)
    write_keypoints_file(out_dir / "keypoints_b.txt", kps_b)
    corr = None
    if args.identity_gt:
        from .transforms import CorrespondenceMap

        corr = CorrespondenceMap.identity(image_b.shape)
    if corr is not None:
        nc, ncm, ratio, matches = evaluate_keypoint_sets(kps_a, kps_b, corr, args.epsilon)
        cmr_text = "n/a" if ratio is None else f"{ratio:.2f}%"
        print(f"NC={nc} NCM={ncm} CMR={cmr_text} over {len(matches)} matches")
    else:
        matches = mutual_nn_match(kps_a.descriptors, kps_b.descriptors)
        print(f"{len(matches)} mutual-NN matches")
    _draw_matches(image_a, image_b, kps_a, kps_b, matches, out_dir / "matches.png")
    print(f"keypoints + visualization written under {out_dir}")
    return 0


def _draw_matches(image_a, image_b, kps_a, kps_b, matches, path) -> None:
    """Side-by-side image with match lines; green correct, red incorrect,
    yellow when no ground truth is available."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ha, wa = image_a.shape
    hb, wb = image_b.shape
    canvas = np.zeros((max(ha, hb), wa + wb))
    canvas[:ha, :wa] = image_a
    canvas[:hb, wa:] = image_b
    fig, ax = plt.subplots(figsize=(10, 5))
    ax.imshow(canvas, cmap="gray", vmin=0, vmax=1)
    for m_idx, (i, j) in enumerate(matches.pairs):
        xa, ya = kps_a.points[i]
        xb, yb = kps_b.points[j]
        if matches.correct is None:
            color = "yellow"
        else:
            color = "lime" if matches.correct[m_idx] else "red"
        ax.plot([xa, xb + wa], [ya, yb], color=color, linewidth=0.6, alpha=0.8)
    ax.scatter(kps_a.points[:, 0], kps_a.points[:, 1], s=4, c="cyan")
    ax.scatter(kps_b.points[:, 0] + wa, kps_b.points[:, 1], s=4, c="cyan")
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossfeat",
        description="Cross-modality local feature learning and matching.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="flat key-value config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="config override (repeatable)")

    def add_data(p):
        p.add_argument("--data", required=True, help="dataset root directory")
        p.add_argument("--layout", default="generic",
                       choices=["generic", "roadscene", "rgbnir"])
        p.add_argument("--test-fraction", type=float, dest="test_fraction")
        p.add_argument("--per-scene-count", type=int, dest="per_scene_count")
        p.add_argument("--split-seed", type=int, default=0, dest="split_seed")

    p = sub.add_parser("train", help="train a model")
    add_common(p)
    add_data(p)
    p.add_argument("--out", default="runs/train", help="output directory")
    p.add_argument("--preset", choices=["d2-style", "r2d2-style"])
    p.add_argument("--lambda", type=float, dest="lam", help="SSL weight")
    p.add_argument("--max-steps", type=int, dest="max_steps")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test set")
    add_common(p)
    add_data(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default="runs/eval")
    p.add_argument("--k", type=int, action="append",
                   help="points to extract (repeatable; default 1024,2048,4096)")
    p.add_argument("--epsilon", type=float, help="correctness threshold in px")
    p.add_argument("--external",
                   help="directory of external keypoint files <pair>.a.txt/<pair>.b.txt")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-lambda", help="train/evaluate across SSL weights")
    add_common(p)
    add_data(p)
    p.add_argument("--out", default="runs/sweep")
    p.add_argument("--lambdas", type=lambda s: [float(v) for v in s.split(",")],
                   default=[0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    p.add_argument("--seeds", type=lambda s: [int(v) for v in s.split(",")],
                   default=[1])
    p.add_argument("--k", type=int, action="append")
    p.add_argument("--max-steps", type=int, dest="max_steps")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("make-synthetic", help="generate a synthetic pair dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True, help="number of pairs")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--source", help="directory of PNGs to use as visible images")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("match", help="match two images with a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--out", default="runs/match")
    p.add_argument("--k", type=int, default=512)
    p.add_argument("--nms-radius", type=int, dest="nms_radius")
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    p.add_argument("--identity-gt", action="store_true",
                   help="score matches against the identity correspondence "
                        "(for co-registered image pairs)")
    p.set_defaults(func=cmd_match)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (_CONFIG_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except Exception as exc:  # noqa: BLE001 - single-line diagnostic contract
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
