"""Command-line entry point.

Subcommands: build, synth, train, score, eval. Exit codes: 0 success,
1 runtime or data error, 2 usage error. Progress goes to stderr; artifacts
go to files and machine-readable summaries to stdout.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, hl, metrics, nn, optim, synth
from .errors import HighlightError, UsageError
from .tensor import dtype_for

log = logging.getLogger("crowdhl")

DEFAULT_SEED = 42
ARCHITECTURES = {
    "default": nn.default_architecture,
    "synthetic": nn.synthetic_architecture,
    "tiny": nn.tiny_architecture,
}


class CliUsageError(Exception):
    """Bad arguments detected before any work starts (exit code 2)."""


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except HighlightError as exc:
        raise type(exc)(f"{name}: {exc}") from exc


def _require_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise CliUsageError(f"{what} {path} does not exist")
    return path


def _require_dir(path: Path, what: str) -> Path:
    if not path.is_dir():
        raise CliUsageError(f"{what} {path} is not a directory")
    return path


def parse_dims(text: str) -> tuple[int, int, int, int]:
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must be C,H,W,T integers, got {text!r}") from None
    if len(dims) != 4 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"dims must be four positive integers C,H,W,T, got {text!r}")
    return dims


def load_architecture(spec: str, channels: int | None = None) -> dict:
    """A named architecture ('default', 'synthetic', 'tiny') or a JSON config path."""
    if spec in ARCHITECTURES:
        if spec == "default" and channels is not None:
            return nn.default_architecture(channels)
        return ARCHITECTURES[spec]()
    path = Path(spec)
    if not path.is_file():
        raise CliUsageError(f"architecture {spec!r} is neither a known name nor a file")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CliUsageError(f"architecture file {path}: {exc}") from exc


# --------------------------------------------------------------------------- pipeline steps


def load_video(frames_dir, manifest_path, dst_fps: float):
    with stage("read"):
        seq = data.read_frames(frames_dir)
        manifest = data.read_manifest(manifest_path)
    if abs(manifest.fps - seq.fps) > 1e-9:
        log.warning("manifest fps %s differs from frame metadata fps %s; using the latter", manifest.fps, seq.fps)
    with stage("downsample"):
        seq = data.downsample(seq, dst_fps)
    return seq, manifest


def build_dataset(
    frames_dir,
    manifest_path,
    out_path,
    dst_fps: float = 3.0,
    window: int = 100,
    stride: int = 50,
    depth: int = 30,
    hop: int = 30,
    positive_window_s: float = 10.0,
    guard_s: float = 30.0,
    augment: bool = True,
    seed: int = DEFAULT_SEED,
) -> dict:
    """read -> downsample -> grid -> extract -> label -> augment -> balance -> write."""
    seq, manifest = load_video(frames_dir, manifest_path, dst_fps)
    with stage("grid"):
        spec = data.GridSpec(manifest.roi, window, stride, depth, hop)
        origins = data.grid_positions(spec)
    starts = data.hop_starts(len(seq), spec)
    if not starts:
        raise UsageError(f"extract: {len(seq)} frames at {dst_fps} fps cannot hold a {depth}-frame cuboid")
    samples = []
    crops_per_hop = []
    discarded = 0
    for t0 in starts:
        with stage("extract"):
            cuboids = data.extract_cuboids(seq, spec, t0)
        crops_per_hop.append(len(cuboids))
        with stage("label"):
            labeled = data.label_samples(cuboids, manifest, seq.fps, positive_window_s, guard_s)
        discarded += len(cuboids) - len(labeled)
        samples.extend(labeled)
    if augment:
        samples = samples + [data.augment_flip(s) for s in samples]
    n_pos = sum(s.label for s in samples)
    stats = {
        "hops": len(starts),
        "crops_per_hop": len(origins),
        "positive": n_pos,
        "negative": len(samples) - n_pos,
        "discarded": discarded,
    }
    with stage("balance"):
        balanced = data.balance(samples, seed)
    with stage("write"):
        data.write_dataset(out_path, balanced, (seq.channels, window, window, depth))
    stats["written"] = len(balanced)
    return stats


def train_from_dataset(
    dataset_path, arch: dict, config: optim.TrainConfig, out_checkpoint, dtype=np.float32
) -> tuple[nn.ModelParams, optim.TrainHistory]:
    with stage("read"):
        samples = data.read_dataset(dataset_path)
    if not samples:
        raise UsageError(f"dataset {dataset_path} is empty")
    with stage("split"):
        train_set, val_set = data.balance_and_split(samples, 1.0 - config.validation_fraction, config.seed)
    log.info("training on %d samples, validating on %d", len(train_set), len(val_set))
    with stage("train"):
        return optim.train(arch, config, train_set, val_set, out_checkpoint, dtype)


def score_video(
    frames_dir,
    manifest_path,
    checkpoint_path,
    out_prefix,
    dst_fps: float = 3.0,
    stride: int = 50,
    hop: int = 30,
    slice_s: float = 10.0,
    top_k: int = 10,
    threads: int = 1,
    dtype=np.float32,
) -> dict:
    """Score every crop at every hop, write timeline and per-crop CSVs, return the ranking."""
    with stage("checkpoint"):
        params = nn.read_checkpoint(checkpoint_path, dtype)
    c, h, w, t = params.input_shape
    if h != w:
        raise UsageError(f"checkpoint input {params.input_shape} is not square in space")
    seq, manifest = load_video(frames_dir, manifest_path, dst_fps)
    with stage("grid"):
        spec = data.GridSpec(manifest.roi, h, stride, t, hop)
    scores = []
    starts = data.hop_starts(len(seq), spec)
    for t0 in starts:
        with stage("extract"):
            cuboids = data.extract_cuboids(seq, spec, t0)
        with stage("score"):
            scores.extend(hl.score_crops(params, cuboids, threads))
    if not scores:
        raise UsageError(f"score: {len(seq)} frames cannot hold a {t}-frame cuboid")
    timeline = hl.hl_accumulate(scores, seq.fps)
    slices = hl.slice_aggregate(timeline, slice_s)
    prefix = str(out_prefix)
    hl.write_timeline_csv(prefix + "_timeline.csv", slices)
    hl.write_crops_csv(prefix + "_crops.csv", scores, seq.fps)
    return {"hops": len(starts), "steps": len(timeline), "ranking": hl.rank_slices(slices, top_k)}


def evaluate_samples(samples, scorer, threshold: float = 0.5) -> tuple[metrics.RocCurve, float, metrics.BinaryMetrics]:
    scores = [float(scorer(s.cuboid.data)) for s in samples]
    labels = [s.label for s in samples]
    with stage("roc"):
        curve = metrics.roc_curve(scores, labels)
    return curve, metrics.auc(curve), metrics.binary_metrics(scores, labels, threshold)


# --------------------------------------------------------------------------- commands


def cmd_build(args) -> int:
    _require_dir(args.frames_dir, "frame directory")
    _require_file(args.manifest, "manifest")
    stats = build_dataset(
        args.frames_dir,
        args.manifest,
        args.out,
        dst_fps=args.fps,
        window=args.window,
        stride=args.stride,
        depth=args.depth,
        hop=args.hop,
        positive_window_s=args.positive_window,
        guard_s=args.guard,
        augment=not args.no_augment,
        seed=args.seed,
    )
    print(json.dumps(stats))
    return 0


def cmd_synth(args) -> int:
    if args.n_pos < 1 or args.n_neg < 1:
        raise CliUsageError("--n-pos and --n-neg must be >= 1")
    Path(args.out).write_bytes(synth.gen_dataset(args.n_pos, args.n_neg, args.seed, args.dims))
    log.info("wrote %d samples to %s", args.n_pos + args.n_neg, args.out)
    print(json.dumps({"samples": args.n_pos + args.n_neg, "positive": args.n_pos, "negative": args.n_neg}))
    return 0


def cmd_train(args) -> int:
    _require_file(args.dataset, "dataset")
    if args.epochs < 1:
        raise CliUsageError("--epochs must be >= 1")
    if args.batch_size < 1:
        raise CliUsageError("--batch-size must be >= 1")
    if not 0.0 < args.val_fraction < 1.0:
        raise CliUsageError("--val-fraction must be in (0, 1)")
    if args.channels is not None and args.channels < 1:
        raise CliUsageError("--channels must be >= 1")
    arch = load_architecture(args.arch, args.channels)
    config = optim.TrainConfig(
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        seed=args.seed,
        dropout=args.dropout,
        learning_rate=args.lr,
        validation_fraction=args.val_fraction,
        threads=args.threads,
    )
    _, history = train_from_dataset(args.dataset, arch, config, args.out, dtype_for(args.precision))
    last = history.epochs[-1]
    print(json.dumps({"epochs": len(history.epochs), "train_loss": last.train_loss,
                      "val_loss": last.val_loss, "val_acc": last.val_acc}))
    return 0


def cmd_score(args) -> int:
    _require_dir(args.frames_dir, "frame directory")
    _require_file(args.manifest, "manifest")
    _require_file(args.checkpoint, "checkpoint")
    if args.top_k < 1:
        raise CliUsageError("--top-k must be >= 1")
    result = score_video(
        args.frames_dir,
        args.manifest,
        args.checkpoint,
        args.out_prefix,
        dst_fps=args.fps,
        stride=args.stride,
        hop=args.hop,
        slice_s=args.slice,
        top_k=args.top_k,
        threads=args.threads,
        dtype=dtype_for(args.precision),
    )
    print("rank,slice_start_s,aggregate")
    for i, s in enumerate(result["ranking"], 1):
        print(f"{i},{s.slice_start_s!r},{s.aggregate!r}")
    return 0


def cmd_eval(args) -> int:
    _require_file(args.dataset, "dataset")
    _require_file(args.checkpoint, "checkpoint")
    with stage("checkpoint"):
        params = nn.read_checkpoint(args.checkpoint, dtype_for(args.precision))
    with stage("read"):
        samples = data.read_dataset(args.dataset)
    if samples and tuple(samples[0].cuboid.data.shape) != params.input_shape:
        raise UsageError(f"dataset cuboids {samples[0].cuboid.data.shape} != model input {params.input_shape}")
    curve, auc_value, m = evaluate_samples(samples, lambda x: nn.predict(params, x)[1])
    out = Path(args.out)
    metrics.write_report(out, auc_value, m)
    metrics.write_roc_csv(out.with_suffix(".roc.csv"), curve)
    print(json.dumps(metrics.report(auc_value, m)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"random seed (default {DEFAULT_SEED})")
    common.add_argument("--threads", type=int, default=1, help="worker threads for scoring/training (default 1)")
    common.add_argument("--precision", choices=("f32", "f64"), default="f32")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="crowdhl", description="Audience-based highlight detection.")
    sub = parser.add_subparsers(dest="command", required=True)

    def grid_flags(p, window=True):
        p.add_argument("--fps", type=float, default=3.0, help="downsampled frame rate (default 3)")
        if window:
            p.add_argument("--window", type=int, default=100)
            p.add_argument("--depth", type=int, default=30)
        p.add_argument("--stride", type=int, default=50)
        p.add_argument("--hop", type=int, default=30, help="frames between cuboid starts (default 30)")

    p = sub.add_parser("build", parents=[common], help="build a labeled CUB1 dataset from frames")
    p.add_argument("frames_dir", type=Path)
    p.add_argument("manifest", type=Path)
    p.add_argument("out", type=Path)
    grid_flags(p)
    p.add_argument("--positive-window", type=float, default=10.0)
    p.add_argument("--guard", type=float, default=30.0)
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic CUB1 dataset")
    p.add_argument("out", type=Path)
    p.add_argument("--n-pos", type=int, default=100)
    p.add_argument("--n-neg", type=int, default=100)
    p.add_argument("--dims", type=parse_dims, default=synth.DEFAULT_DIMS, help="C,H,W,T (default 1,32,32,10)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train the network on a CUB1 dataset")
    p.add_argument("dataset", type=Path)
    p.add_argument("out", type=Path, help="checkpoint path; history CSV is written beside it")
    p.add_argument("--arch", default="default", help="default | synthetic | tiny | path to JSON config")
    p.add_argument("--channels", type=int, default=None, help="input channels for --arch default (default 3)")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--val-fraction", type=float, default=0.3)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", parents=[common], help="score a video and rank its time slices")
    p.add_argument("frames_dir", type=Path)
    p.add_argument("manifest", type=Path)
    p.add_argument("checkpoint", type=Path)
    p.add_argument("out_prefix")
    grid_flags(p, window=False)
    p.add_argument("--slice", type=float, default=10.0, help="slice length in seconds (default 10)")
    p.add_argument("--top-k", type=int, default=10)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", parents=[common], help="ROC/AUC and thresholded metrics on a dataset")
    p.add_argument("dataset", type=Path)
    p.add_argument("checkpoint", type=Path)
    p.add_argument("out", type=Path, help="metrics JSON path; ROC CSV is written beside it")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except CliUsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (HighlightError, OSError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
