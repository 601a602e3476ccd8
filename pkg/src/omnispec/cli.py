"""Batch command-line surface.

Subcommands: gen-data, train, pretrain, probe, flops, eval. Every command
snapshots its merged configuration and input hashes into the output
directory before doing work, logs delimited reports, and renders matching
figures next to them.

Exit codes: 0 ok, 2 validation error, 3 I/O or format error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import figures
from . import model as M
from . import ssl as S
from . import train as TR
from .camera import read_bank
from .config import RunConfig, hash_paths
from .dataio import read_manifest
from .datagen import build_variant_corpora
from .errors import FormatError, NumericError, ValidationError
from .evalprobe import (confusion_matrix, knn_probe, linear_probe, miou,
                        overall_accuracy)
from .rng import stream


def _write_run_info(out_dir: Path, command: str, cfg: RunConfig | None,
                    inputs) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    info = {"command": command, "inputs": sorted(str(p) for p in inputs)}
    if cfg is not None:
        cfg.snapshot(out_dir / "config.ini")
        info["config_digest"] = cfg.digest()
    if inputs:
        info["input_digest"] = hash_paths(inputs)
    (out_dir / "run.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def cmd_gen_data(args) -> int:
    out_dir = Path(args.out)
    cfg = RunConfig.load(None, {"run.seed": str(args.seed)})
    _write_run_info(out_dir, "gen-data", cfg, [])
    summary = build_variant_corpora(
        out_dir, seed=args.seed, n_subjects=args.subjects, n_variants=args.variants,
        images_per_subject=args.images, size=args.size, n_classes=args.classes,
        workers=args.threads)
    banks = [(name.replace(".txt", ""), read_bank(out_dir / name))
             for name in summary["cameras"]]
    figures.camera_banks(banks, out_dir / "camera_banks.png")
    print(f"wrote {summary['n_images']} images, {len(summary['manifests'])} "
          f"variant manifests, {len(banks)} cameras to {out_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config, _overrides(args))
    out_dir = Path(args.out)
    _write_run_info(out_dir, "train", cfg, [args.data] + ([args.config] if args.config else []))
    corpus = read_manifest(args.data)
    steps = cfg.get_int("train", "steps")
    if args.resume:
        state = TR.load_train_checkpoint(args.resume)
    else:
        model_cfg = cfg.model_config()
        if model_cfg.n_classes is None:
            raise ValidationError("train needs model.n_classes")
        state = TR.new_train_state(model_cfg, cfg.get_int("run", "seed"), steps)
    TR.run_training(
        state, corpus, out_dir, steps,
        batch=cfg.get_int("train", "batch"),
        lr0=cfg.get_float("train", "lr"),
        lr_final=cfg.get_float("train", "lr_final"),
        weight_decay=cfg.get_float("train", "weight_decay"),
        max_channels=cfg.get_int("train", "max_channels"),
        use_dice=cfg.get_bool("train", "dice"),
        log_every=cfg.get_int("train", "log_every"),
        checkpoint_every=cfg.get_int("train", "checkpoint_every"))
    figures.loss_curve(out_dir / "loss.csv", out_dir / "loss_curve.png")
    print(f"trained to step {state.step}; checkpoint in {out_dir}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = RunConfig.load(args.config, _overrides(args))
    out_dir = Path(args.out)
    _write_run_info(out_dir, "pretrain", cfg, [args.data] + ([args.config] if args.config else []))
    corpus = read_manifest(args.data)
    steps = cfg.get_int("pretrain", "steps")
    if args.resume:
        state = TR.load_pretrain_checkpoint(args.resume)
    else:
        model_cfg = cfg.model_config()
        state = S.new_pretrain_state(model_cfg, cfg.get_int("run", "seed"), steps,
                                     mask_style=cfg.get("pretrain", "mask_style"))
    TR.run_pretraining(
        state, corpus, out_dir, steps,
        batch=cfg.get_int("pretrain", "batch"),
        lr0=cfg.get_float("pretrain", "lr"),
        lr_final=cfg.get_float("pretrain", "lr_final"),
        weight_decay=cfg.get_float("pretrain", "weight_decay"),
        log_every=cfg.get_int("pretrain", "log_every"),
        checkpoint_every=cfg.get_int("pretrain", "checkpoint_every"))
    figures.pretrain_curves(out_dir / "pretrain.csv", out_dir / "pretrain_curves.png")
    print(f"pretrained to step {state.step}; checkpoint in {out_dir}")
    return 0


def cmd_probe(args) -> int:
    out_dir = Path(args.out)
    _write_run_info(out_dir, "probe", None, [args.checkpoint, args.data])
    model_cfg, params = TR.load_any_params(args.checkpoint)
    corpus = read_manifest(args.data)
    train_entries = corpus.split("train")
    eval_entries = corpus.split(args.split)
    if not train_entries or not eval_entries:
        raise ValidationError("probe needs train entries and eval entries")
    tf, tl, _ = TR.corpus_features(params, model_cfg, corpus, train_entries,
                                   layer=args.layer, seed=args.seed)
    ef, el, _ = TR.corpus_features(params, model_cfg, corpus, eval_entries,
                                   layer=args.layer, seed=args.seed)
    keep_t = tl != 0xFFFF
    keep_e = el != 0xFFFF
    if args.mode == "knn":
        acc = knn_probe(tf[keep_t], tl[keep_t], ef[keep_e], el[keep_e], k=args.k)
    else:
        acc = linear_probe(tf[keep_t], tl[keep_t], ef[keep_e], el[keep_e],
                           epochs=args.epochs, seed=args.seed)
    report = out_dir / "probe.csv"
    with open(report, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "layer", "k", "epochs", "seed", "checkpoint",
                         "overall_accuracy"])
        writer.writerow([args.mode, args.layer, args.k, args.epochs, args.seed,
                         args.checkpoint, repr(acc)])
    print(f"{args.mode} probe ({args.layer}) overall accuracy: {acc:.4f}")
    return 0


def cmd_flops(args) -> int:
    cfg = RunConfig.load(args.config, _overrides(args))
    out_dir = Path(args.out)
    _write_run_info(out_dir, "flops", cfg, [args.config] if args.config else [])
    model_cfg = cfg.model_config()
    channels = [int(c) for c in args.channels.split(",")]
    hw = args.grid * args.grid
    keys = ["projection", "spectral_self_attn", "spectral_cross_attn",
            "transition", "spatial", "total"]
    table = {k: [] for k in keys}
    with open(out_dir / "flops.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["channels"] + keys)
        for c in channels:
            counts = M.flop_estimate(model_cfg, c, hw)
            writer.writerow([c] + [repr(counts[k]) for k in keys])
            for k in keys:
                table[k].append(counts[k])
    figures.flops_scaling(channels, table, out_dir / "flops_scaling.png")
    for c, total in zip(channels, table["total"]):
        print(f"C={c:4d}  total MACs {total:.3e}")
    if args.fit and len(channels) >= 3:
        quad = np.polyfit(channels, table["spectral_self_attn"], 2, full=True)
        lin = np.polyfit(channels, table["spectral_cross_attn"], 1, full=True)
        r2q = _fit_r2(channels, table["spectral_self_attn"], 2)
        r2l = _fit_r2(channels, table["spectral_cross_attn"], 1)
        print(f"self-attn quadratic fit R^2 = {r2q:.6f}")
        print(f"cross-attn linear fit R^2 = {r2l:.6f}")
        del quad, lin
    return 0


def _fit_r2(x, y, degree: int) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    coeffs = np.polyfit(x, y, degree)
    resid = y - np.polyval(coeffs, x)
    ss_tot = ((y - y.mean()) ** 2).sum()
    return 1.0 - float((resid ** 2).sum() / ss_tot)


def cmd_eval(args) -> int:
    out_dir = Path(args.out)
    _write_run_info(out_dir, "eval", None, [args.checkpoint, args.data])
    model_cfg, params = TR.load_any_params(args.checkpoint)
    if model_cfg.n_classes is None:
        raise ValidationError("checkpoint has no classifier head")
    corpus = read_manifest(args.data)
    entries = corpus.split(args.split)
    if not entries:
        raise ValidationError(f"no {args.split} entries in manifest")
    predictions, truths = [], []
    for i, entry in enumerate(entries):
        img = corpus.load(entry)
        data, wl = M.channel_subsample(img.data, img.wavelengths_nm,
                                       args.max_channels,
                                       stream(args.seed, "eval-subsample", i))
        from .tensor import no_grad
        with no_grad():
            logits = M.forward(params, model_cfg, data, wl, head="patch_logits").data
        from .evalprobe import patch_majority_labels
        predictions.append(logits.argmax(axis=1))
        truths.append(patch_majority_labels(img.labels, model_cfg.patch))
    conf = confusion_matrix(np.concatenate(predictions), np.concatenate(truths),
                            model_cfg.n_classes)
    per_class, mean_iou = miou(conf)
    oa = overall_accuracy(conf)
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "iou"])
        for k, v in per_class.items():
            writer.writerow([k, repr(v)])
        writer.writerow(["mean", repr(mean_iou)])
        writer.writerow(["overall_accuracy", repr(oa)])
    figures.per_class_bars(list(per_class), list(per_class.values()), "IoU",
                           out_dir / "per_class_iou.png")
    figures.confusion_heatmap(conf, out_dir / "confusion.png")
    print(f"patch OA {oa:.4f}  mIoU {mean_iou:.4f}  over {len(entries)} images")
    return 0


def _overrides(args) -> dict[str, str]:
    overrides = dict(kv.split("=", 1) for kv in (args.set or []))
    if getattr(args, "seed", None) is not None:
        overrides["run.seed"] = str(args.seed)
    if getattr(args, "steps", None) is not None:
        section = "pretrain" if args.command == "pretrain" else "train"
        overrides[f"{section}.steps"] = str(args.steps)
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="omnispec",
                                     description="camera-agnostic spectral imaging toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="emit a toy corpus and its camera-variant ladder")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=12)
    p.add_argument("--variants", type=int, default=6)
    p.add_argument("--images", type=int, default=4, help="images per subject")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1,
                   help="rendering worker cap; output bytes are unaffected")
    p.set_defaults(func=cmd_gen_data)

    for name, fn in (("train", cmd_train), ("pretrain", cmd_pretrain)):
        p = sub.add_parser(name, help=f"run {name}ing on a manifest")
        p.add_argument("--config", default=None)
        p.add_argument("--data", required=True, help="manifest path")
        p.add_argument("--out", required=True)
        p.add_argument("--resume", default=None, help="checkpoint to resume from")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
        p.set_defaults(func=fn)

    p = sub.add_parser("probe", help="frozen-feature probe from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("knn", "linear"), default="knn")
    p.add_argument("--layer", choices=("spatial", "spectral"), default="spatial")
    p.add_argument("--split", default="test")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("flops", help="analytic operation counts per channel count")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--channels", default="8,16,32,64,116")
    p.add_argument("--grid", type=int, default=16, help="patch-grid edge")
    p.add_argument("--fit", action="store_true", help="report scaling-fit R^2")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("eval", help="confusion-matrix metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--max-channels", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
