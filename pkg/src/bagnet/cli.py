"""Command-line entry point: dataset tools, training, evaluation,
analyses and a throughput benchmark.

Every subcommand writes a manifest (resolved flags, seeds, input
hashes, tool version) before any other output; identical flags, seeds,
inputs and worker count give byte-identical artifacts.

Exit codes: 0 success, 2 usage error, 3 data-format error,
4 precondition violation, 5 numerical divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import NumericalError, Tensor
from .data import (
    DataFormatError,
    Dataset,
    convert_cifar10,
    load_dataset,
    save_dataset,
    synth_texture_dataset,
)
from .model import (
    ConfigError,
    SHIPPED_CONFIGS,
    build_model,
    forward_evidence,
    image_logits,
)
from .train import (
    CheckpointFormatError,
    TrainConfig,
    evaluate,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    train,
)
from . import interpret as itp

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_PRECONDITION = 4
EXIT_DIVERGED = 5


def _hash_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, subcommand: str, args: argparse.Namespace,
                   input_paths: list) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {k: (str(v) if isinstance(v, Path) else v)
                for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "tool_version": __version__,
        "subcommand": subcommand,
        "config": resolved,
        "inputs": {str(p): _hash_file(p) for p in input_paths},
    }
    text = json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    (out_dir / "manifest.json").write_text(text)


def _load(path, split="val") -> Dataset:
    return load_dataset(path, split=split)


# ---------------------------------------------------------------------------
# dataset subcommands

def cmd_dataset_synth(args) -> int:
    ds = synth_texture_dataset(args.classes, args.per_class, args.size,
                               args.texture_scale, args.seed, split=args.split)
    out = Path(args.out)
    write_manifest(out.parent, "dataset synth", args, [])
    save_dataset(ds, out)
    print(f"wrote {ds.count} images ({ds.num_classes} classes, {ds.size}px) to {out}")
    return EXIT_OK


def cmd_dataset_convert(args) -> int:
    ds = convert_cifar10(args.cifar, split=args.split)
    out = Path(args.out)
    write_manifest(out.parent, "dataset convert", args, args.cifar)
    save_dataset(ds, out)
    print(f"converted {ds.count} images to {out}")
    return EXIT_OK


def cmd_dataset_inspect(args) -> int:
    ds = _load(args.path)
    print(f"file: {args.path}")
    print(f"count: {ds.count}")
    print(f"size: {ds.size}")
    print(f"num_classes: {ds.num_classes}")
    for c, name in enumerate(ds.class_names):
        print(f"  class {c} {name!r}: {int((ds.labels == c).sum())} images")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / eval

def cmd_train(args) -> int:
    train_set = _load(args.data, split="train")
    val_set = _load(args.val, split="val") if args.val else train_set
    config = SHIPPED_CONFIGS[args.config](num_classes=train_set.num_classes)
    tc = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr0=args.lr0,
                     momentum=args.momentum, decay_factor=args.decay_factor,
                     decay_every_epochs=args.decay_every, seed=args.seed)
    out = Path(args.out)
    write_manifest(out, "train", args, [args.data] + ([args.val] if args.val else []))
    model = build_model(config, seed=args.seed)
    rows = []

    def sink(row):
        rows.append(row)
        print("epoch %d lr %.5g loss %.5g val_top1 %.4f" %
              (row["epoch"], row["lr"], row["train_loss"], row["val_top1"]))

    ckpt = train(model, train_set, val_set, tc, sink=sink)
    from .train import history_to_csv
    (out / "metrics.csv").write_text(history_to_csv(ckpt.history))
    save_checkpoint(ckpt, out / "model.bagc")
    if ckpt.diverged:
        print("training diverged; kept the last good checkpoint", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    ds = _load(args.data)
    result = evaluate(model, ds, k=args.topk)
    out = Path(args.out)
    write_manifest(out, "eval", args, [args.checkpoint, args.data])
    lines = ["metric,value", "top%d_accuracy,%.9g" % (args.topk, result.topk_accuracy)]
    for c, acc in enumerate(result.per_class):
        lines.append("class%d_accuracy,%.9g" % (c, acc))
    (out / "eval.csv").write_text("\n".join(lines) + "\n")
    np.save(out / "logits.npy", result.logits)
    print("top-%d accuracy: %.4f" % (args.topk, result.topk_accuracy))
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyses

def _model_and_data(args) -> tuple:
    ckpt = load_checkpoint(args.checkpoint)
    return model_from_checkpoint(ckpt), _load(args.data)


def cmd_analyze_heatmap(args) -> int:
    model, ds = _model_and_data(args)
    out = Path(args.out)
    write_manifest(out, "analyze heatmap", args, [args.checkpoint, args.data])
    img = itp.norm_images(model, ds, [args.image])[0]
    em = forward_evidence(model, img)
    if args.cls == "pred":
        cls = int(np.argmax(image_logits(em)))
    else:
        cls = int(args.cls)
    itp.export_heatmap(em, cls, out / f"heatmap_img{args.image}_class{cls}.ppm")
    print(f"heatmap for image {args.image}, class {cls} -> {out}")
    return EXIT_OK


def cmd_analyze_patches(args) -> int:
    model, ds = _model_and_data(args)
    out = Path(args.out)
    write_manifest(out, "analyze patches", args, [args.checkpoint, args.data])
    result = itp.top_patches(model, ds, args.cls, args.k, limit=args.limit)
    patch_dir = out / "patches"
    patch_dir.mkdir(parents=True, exist_ok=True)
    for kind, records in (("same", result.same_label), ("other", result.other_label)):
        for rank, rec in enumerate(records):
            rgb = rec.pixels.transpose(1, 2, 0)
            itp.write_ppm(patch_dir / f"{args.cls}_{rank}_{kind}.ppm", rgb)
    if result.truncated:
        print("fewer candidates than requested; wrote all available", file=sys.stderr)
    print(f"wrote {len(result.same_label)} same-label and "
          f"{len(result.other_label)} other-label patches to {patch_dir}")
    return EXIT_OK


def cmd_analyze_interaction(args) -> int:
    model, ds = _model_and_data(args)
    out = Path(args.out)
    write_manifest(out, "analyze interaction", args, [args.checkpoint, args.data])
    result = itp.interaction_experiment(model, ds, args.p, limit=args.limit,
                                        class_mode=args.class_mode)
    (out / "interaction.csv").write_text(itp.interaction_csv(result))
    r_text = "degenerate" if result.degenerate else "%.6f" % result.r
    print(f"p={args.p}: pearson r = {r_text}, "
          f"max relative gap = {result.max_relative_gap():.3g}")
    return EXIT_OK


def cmd_analyze_sensitivity(args) -> int:
    model, ds = _model_and_data(args)
    out = Path(args.out)
    write_manifest(out, "analyze sensitivity", args, [args.checkpoint, args.data])
    sources = args.sources.split(",")
    curves = itp.masking_sensitivity(model, sources, ds, p=args.p, n_max=args.n_max,
                                     seed=args.seed, limit=args.limit)
    (out / "sensitivity.csv").write_text(itp.sensitivity_csv(curves))
    for s, curve in curves.items():
        print(f"{s}: prob {curve.mean_prob[0]:.4f} -> {curve.mean_prob[-1]:.4f} "
              f"at n={curve.n_masked[-1]}")
    return EXIT_OK


def cmd_analyze_threshold(args) -> int:
    model, ds = _model_and_data(args)
    out = Path(args.out)
    write_manifest(out, "analyze threshold", args, [args.checkpoint, args.data])
    thresholds = [float(t) for t in args.thresholds.split(",")]
    modes = ["clamp", "binarize"] if args.mode == "both" else [args.mode]
    rows = []
    for mode in modes:
        rows.extend(itp.threshold_sweep(model, ds, thresholds, mode, k=args.topk,
                                        limit=args.limit))
    (out / "threshold.csv").write_text(itp.threshold_csv(rows))
    for mode, t, k, acc in rows:
        print("%s t=%g: top-%d %.4f" % (mode, t, k, acc))
    return EXIT_OK


def cmd_analyze_scramble(args) -> int:
    model, ds = _model_and_data(args)
    out = Path(args.out)
    write_manifest(out, "analyze scramble", args, [args.checkpoint, args.data])
    result = itp.scramble_test(model, ds, seed=args.seed, limit=args.limit)
    text = ("metric,value\nclean_accuracy,%.9g\nscrambled_accuracy,%.9g\n"
            "max_logit_delta,%.9g\nn_images,%d\n" %
            (result.clean_accuracy, result.scrambled_accuracy,
             result.max_logit_delta, result.n_images))
    (out / "scramble.csv").write_text(text)
    print("clean %.4f scrambled %.4f max logit delta %.3g" %
          (result.clean_accuracy, result.scrambled_accuracy, result.max_logit_delta))
    return EXIT_OK


def cmd_analyze_scatter(args) -> int:
    model_a = model_from_checkpoint(load_checkpoint(args.checkpoint_a))
    model_b = model_from_checkpoint(load_checkpoint(args.checkpoint_b))
    ds = _load(args.data)
    out = Path(args.out)
    write_manifest(out, "analyze scatter", args,
                   [args.checkpoint_a, args.checkpoint_b, args.data])
    eval_a = evaluate(model_a, ds, k=args.topk)
    eval_b = evaluate(model_b, ds, k=args.topk)
    result = itp.per_class_scatter(eval_a.per_class, eval_b.per_class)
    (out / "class_scatter.csv").write_text(itp.scatter_csv(result))
    print("per-class r =", "degenerate" if result.degenerate else "%.4f" % result.r)
    return EXIT_OK


def cmd_analyze_logitcorr(args) -> int:
    model_a = model_from_checkpoint(load_checkpoint(args.checkpoint_a))
    model_b = model_from_checkpoint(load_checkpoint(args.checkpoint_b))
    ds = _load(args.data)
    out = Path(args.out)
    write_manifest(out, "analyze logitcorr", args,
                   [args.checkpoint_a, args.checkpoint_b, args.data])
    eval_a = evaluate(model_a, ds, k=1)
    eval_b = evaluate(model_b, ds, k=1)
    r = itp.logit_correlation(eval_a.logits, eval_b.logits)
    text = "metric,value\npearson_r,%s\n" % ("degenerate" if r is None else "%.9g" % r)
    (out / "logitcorr.csv").write_text(text)
    print("logit correlation:", "degenerate" if r is None else "%.4f" % r)
    return EXIT_OK


# ---------------------------------------------------------------------------
# benchmark

def cmd_bench(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    size = args.size or model.config.input_size
    rng = np.random.default_rng(0)
    batch = rng.standard_normal((args.batch, 3, size, size)).astype(np.float32)
    from .model import forward_features
    forward_features(model, Tensor(batch))  # warmup
    rates = []
    for _ in range(args.iters):
        t0 = time.perf_counter()
        forward_features(model, Tensor(batch))
        rates.append(args.batch / (time.perf_counter() - t0))
    rates = np.array(rates)
    print("throughput: %.2f images/s (std %.2f) at batch %d, %dpx" %
          (rates.mean(), rates.std(), args.batch, size))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bagnet")
    parser.add_argument("--workers", type=int,
                        default=int(os.environ.get("BAGNET_WORKERS", "1")),
                        help="internal parallelism cap (default 1, or BAGNET_WORKERS)")
    sub = parser.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset").add_subparsers(dest="action", required=True)
    p = ds.add_parser("synth")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, dest="per_class", default=2000)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--texture-scale", type=int, dest="texture_scale", default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_dataset_synth)
    p = ds.add_parser("convert")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("cifar", nargs="+")
    p.set_defaults(func=cmd_dataset_convert)
    p = ds.add_parser("inspect")
    p.add_argument("path")
    p.set_defaults(func=cmd_dataset_inspect)

    p = sub.add_parser("train")
    p.add_argument("--config", choices=sorted(SHIPPED_CONFIGS), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, dest="batch_size", default=64)
    p.add_argument("--lr0", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--decay-factor", type=float, dest="decay_factor", default=10.0)
    p.add_argument("--decay-every", type=int, dest="decay_every", default=8)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--topk", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    an = sub.add_parser("analyze").add_subparsers(dest="analysis", required=True)

    def common(p, two_models=False):
        if two_models:
            p.add_argument("--checkpoint-a", dest="checkpoint_a", required=True)
            p.add_argument("--checkpoint-b", dest="checkpoint_b", required=True)
        else:
            p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--limit", type=int, default=None)
        p.add_argument("--seed", type=int, default=0)

    p = an.add_parser("heatmap")
    common(p)
    p.add_argument("--image", type=int, default=0)
    p.add_argument("--class", dest="cls", default="pred")
    p.set_defaults(func=cmd_analyze_heatmap)
    p = an.add_parser("patches")
    common(p)
    p.add_argument("--class", dest="cls", type=int, required=True)
    p.add_argument("--k", type=int, default=7)
    p.set_defaults(func=cmd_analyze_patches)
    p = an.add_parser("interaction")
    common(p)
    p.add_argument("--p", type=int, default=8)
    p.add_argument("--class-mode", dest="class_mode", choices=["label", "pred"],
                   default="label")
    p.set_defaults(func=cmd_analyze_interaction)
    p = an.add_parser("sensitivity")
    common(p)
    p.add_argument("--sources", default="bagnet,saliency,ig,random")
    p.add_argument("--p", type=int, default=8)
    p.add_argument("--n-max", type=int, dest="n_max", default=8)
    p.set_defaults(func=cmd_analyze_sensitivity)
    p = an.add_parser("threshold")
    common(p)
    p.add_argument("--mode", choices=["clamp", "binarize", "both"], default="both")
    p.add_argument("--thresholds", required=True)
    p.add_argument("--topk", type=int, default=1)
    p.set_defaults(func=cmd_analyze_threshold)
    p = an.add_parser("scramble")
    common(p)
    p.set_defaults(func=cmd_analyze_scramble)
    p = an.add_parser("scatter")
    common(p, two_models=True)
    p.add_argument("--topk", type=int, default=1)
    p.set_defaults(func=cmd_analyze_scatter)
    p = an.add_parser("logitcorr")
    common(p, two_models=True)
    p.set_defaults(func=cmd_analyze_logitcorr)

    p = sub.add_parser("bench")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--size", type=int, default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataFormatError, CheckpointFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (itp.PreconditionError, ConfigError, ValueError) as exc:
        print(f"precondition violation: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except NumericalError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
