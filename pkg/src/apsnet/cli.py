"""Command-line entry point: ``apsnet <command> [flags]`` (or ``python -m apsnet``).

Exit status is 0 on success, 1 on usage errors and 2 on runtime failures.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import dataset as ds
from .evaluation import confusion, metrics, per_class_report, write_report_json
from .explainability import EmbeddingTable, export_features, grad_cam, project_2d, save_heatmap, write_projection
from .model import fuse_predictions
from .prior import PRIOR_KINDS, corpus_entropy_report, write_entropy_report
from .training import (
    ImageCache, TrainConfig, head_accuracies, load_checkpoint, predict_logits, restore_best, train,
)

log = logging.getLogger("apsnet")

DESK_DEFAULTS = {"image_size": 128, "backbone": "tiny"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# config files

def _to_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_float(text: str):
    return None if text.strip().lower() in ("", "none") else float(text)


def _converter(f: dataclasses.Field):
    if f.name == "cutoff_radius":
        return _optional_float
    kind = type(f.default)
    return _to_bool if kind is bool else kind


def parse_config(path=None, desk: bool = False, overrides: dict | None = None) -> TrainConfig:
    """Read a flat ``key=value`` file into a :class:`TrainConfig`.

    Blank lines and ``#`` comments are ignored; unknown keys and badly typed
    values raise ``ValueError`` naming the key. Missing keys take the
    defaults, with ``--desk`` switching to a 128 px tiny-backbone setup.
    """
    known = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values: dict = dict(DESK_DEFAULTS) if desk else {}
    lines = Path(path).read_text().splitlines() if path else []
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ValueError(f"line {lineno}: expected key=value")
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        try:
            values[key] = _converter(known[key])(value.strip())
        except ValueError as exc:
            raise ValueError(f"bad value for {key!r}: {exc}") from None
    values.update(overrides or {})
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise ValueError(f"invalid config: {exc}") from None


# --------------------------------------------------------------------------
# commands

def _manifest(data: str) -> ds.DatasetManifest:
    root = Path(data)
    if (root / ds.MANIFEST_NAME).exists():
        return ds.read_manifest(root / ds.MANIFEST_NAME)
    return ds.build_manifest(root)


def _kinds(text: str) -> list[str]:
    if text == "all":
        return list(PRIOR_KINDS)
    kinds = [k.strip() for k in text.split(",") if k.strip()]
    bad = [k for k in kinds if k not in PRIOR_KINDS]
    if bad:
        raise UsageError(f"unknown prior kinds: {','.join(bad)}")
    return kinds


def cmd_synth(args):
    if args.preset == "size-only":
        cfg = ds.size_only_config(args.per_class, args.image_size, args.seed)
    else:
        cfg = ds.long_tail_config(args.classes, args.head, args.tail, args.image_size, args.seed)
    manifest = ds.synth_generate(cfg, args.out)
    ds.write_histogram(manifest, Path(args.out) / "histogram.csv")
    print(f"wrote {len(manifest.samples)} images in {manifest.num_classes} classes to {args.out}")


def cmd_manifest(args):
    manifest = ds.build_manifest(args.data, args.ratio, args.seed, persist=False)
    path = manifest.write(args.out)
    if args.histogram:
        ds.write_histogram(manifest, args.histogram)
    print(f"{len(manifest.samples)} samples, {manifest.num_classes} classes, {manifest.skipped} skipped -> {path}")


def cmd_entropy(args):
    manifest = _manifest(args.data)
    report = corpus_entropy_report(manifest, _kinds(args.kinds), args.n, args.seed, args.image_size, args.bins)
    write_entropy_report(report, args.out, args.n, args.seed)
    for kind, bits in report.items():
        print(f"{kind:6s} {bits:.4f} bits")


def evaluate_model(model, manifest, split: str, image_size: int, out_dir: Path, extra=None):
    data = ImageCache(manifest, manifest.ids(split), image_size)
    logits = predict_logits(model, data)
    truth = data.labels.numpy()
    cm = confusion(fuse_predictions(logits["fused"]), truth, manifest.num_classes)
    report = metrics(cm, manifest.class_names)
    out_dir.mkdir(parents=True, exist_ok=True)
    per_class_report(cm, manifest.class_names, out_dir / "per_class.csv")
    write_report_json(report, out_dir / "metrics.json", split=split,
                      head_accuracy=head_accuracies(logits, truth), confusion=cm.tolist(), **(extra or {}))
    return report


def _train_config(args) -> TrainConfig:
    overrides = {"rng_seed": args.seed} if args.seed is not None else {}
    try:
        return parse_config(args.config, args.desk, overrides)
    except ValueError as exc:  # a bad config is the caller's mistake
        raise UsageError(str(exc)) from None


def run_training(cfg: TrainConfig, manifest, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.snapshot").write_text(cfg.to_text())
    run = train(cfg, manifest, out)
    model = restore_best(cfg, run, manifest.num_classes)
    report = evaluate_model(model, manifest, "test", cfg.image_size, out, {
        "best_epoch": run.best_epoch, "stop_epoch": run.stop_epoch, "wall_time": run.wall_time,
    })
    return run, report


def cmd_train(args):
    cfg = _train_config(args)
    run, report = run_training(cfg, _manifest(args.data), Path(args.out))
    print(f"best epoch {run.best_epoch} accuracy {report.accuracy:.4f} macro-F1 {report.macro_f1:.4f}")


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    manifest = _manifest(args.data)
    if ckpt.classes != manifest.class_names:
        raise ValueError("checkpoint classes do not match the corpus")
    size = args.image_size or ckpt.train_config.get("image_size") or manifest.image_size or 512
    report = evaluate_model(ckpt.model, manifest, args.split, size, Path(args.out), {"epoch": ckpt.epoch})
    print(f"accuracy {report.accuracy:.4f} macro-F1 {report.macro_f1:.4f}")


def cmd_ablate(args):
    base = _train_config(args)
    manifest = _manifest(args.data)
    out = Path(args.out)
    kinds = _kinds(args.kinds)
    n = min(args.entropy_n, len(manifest.samples))
    entropy = corpus_entropy_report(manifest, kinds, n, base.rng_seed, base.image_size)
    rows = []
    for kind in kinds:
        cfg = dataclasses.replace(base, prior_kind=kind)
        run, report = run_training(cfg, manifest, out / kind)
        rows.append([kind, entropy[kind], report.accuracy, report.macro_precision, report.macro_recall,
                     report.macro_f1])
        print(f"{kind:6s} acc {report.accuracy:.4f} f1 {report.macro_f1:.4f}")
    with open(out / "ablation.csv", "w") as fh:
        fh.write("kind,entropy_bits,accuracy,precision,recall,f1\n")
        for row in rows:
            fh.write(f"{row[0]}," + ",".join(f"{v:.6f}" for v in row[1:]) + "\n")


def cmd_gradcam(args):
    ckpt = load_checkpoint(args.checkpoint)
    manifest = _manifest(args.data)
    size = args.image_size or ckpt.train_config.get("image_size") or manifest.image_size or 512
    ids = args.ids.split(",") if args.ids else manifest.ids(args.split)
    if not args.ids:
        rng = np.random.default_rng(args.seed)
        ids = [ids[i] for i in sorted(rng.choice(len(ids), min(args.n, len(ids)), replace=False))]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for sid in ids:
        images, labels = ds.load_batch(manifest, [sid], size)
        target = args.target if args.target is not None else int(labels[0])
        hm = grad_cam(ckpt.model, images[0], target, args.layer, args.head)
        stem = sid.replace("/", "__").rsplit(".", 1)[0]
        save_heatmap(hm, images[0], out / f"{stem}_cam.png", out / f"{stem}_cam.csv")
    print(f"wrote {len(ids)} heatmaps to {out}")


def cmd_export(args):
    ckpt = load_checkpoint(args.checkpoint)
    manifest = _manifest(args.data)
    size = args.image_size or ckpt.train_config.get("image_size") or manifest.image_size or 512
    split = None if args.split == "all" else args.split
    table = export_features(ckpt.model, manifest, split, size, path=args.out)
    print(f"wrote {len(table.ids)} x {table.features.shape[1]} features to {args.out}")


def cmd_project(args):
    table = EmbeddingTable.read_csv(args.features)
    write_projection(table, project_2d(table), args.out)
    print(f"wrote {len(table.ids)} points to {args.out}")


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="apsnet", description="Size-prior seed classifier toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        sp.set_defaults(fn=fn)
        return sp

    def train_flags(sp):
        sp.add_argument("--data", required=True, help="corpus root (class subdirectories + manifest.tsv)")
        sp.add_argument("--out", required=True, help="run directory")
        sp.add_argument("--config", help="key=value training config file")
        sp.add_argument("--desk", action="store_true", help="desk-scale defaults (128 px, tiny backbone)")
        sp.add_argument("--seed", type=int, default=None, help="override rng_seed from the config")

    sp = add("synth", cmd_synth, "generate a synthetic seed corpus")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--preset", choices=["size-only", "long-tail"], default="size-only")
    sp.add_argument("--image-size", type=int, default=128)
    sp.add_argument("--per-class", type=int, default=140, help="images per class (size-only)")
    sp.add_argument("--classes", type=int, default=8, help="number of classes (long-tail)")
    sp.add_argument("--head", type=int, default=600, help="largest class count (long-tail)")
    sp.add_argument("--tail", type=int, default=25, help="smallest class count (long-tail)")
    sp.add_argument("--seed", type=int, default=0)

    sp = add("manifest", cmd_manifest, "index a corpus and split it per class")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ratio", type=float, default=0.7, help="train fraction per class")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="manifest path (default DATA/manifest.tsv)")
    sp.add_argument("--histogram", help="write class,train,test CSV here")

    sp = add("entropy", cmd_entropy, "mean Shannon entropy of each prior kind")
    sp.add_argument("--data", required=True)
    sp.add_argument("--kinds", default="all", help="'all' or comma list of " + ",".join(PRIOR_KINDS))
    sp.add_argument("--n", type=int, default=10, help="number of sampled images")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--image-size", type=int, default=None)
    sp.add_argument("--bins", type=int, default=256)
    sp.add_argument("--out", required=True, help="CSV output path")

    train_flags(add("train", cmd_train, "train APSNet and evaluate the best checkpoint"))

    sp = add("eval", cmd_eval, "evaluate a checkpoint on a split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="directory for metrics.json and per_class.csv")
    sp.add_argument("--split", choices=ds.SPLITS, default="test")
    sp.add_argument("--image-size", type=int, default=None)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("ablate-prior", cmd_ablate, "train one model per prior kind and compare")
    train_flags(sp)
    sp.add_argument("--kinds", default="all", help="'all' or comma list of " + ",".join(PRIOR_KINDS))
    sp.add_argument("--entropy-n", type=int, default=10, help="images sampled for the entropy column")

    sp = add("gradcam", cmd_gradcam, "Grad-CAM overlays for test images")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--ids", help="comma-separated sample ids (default: random sample of --split)")
    sp.add_argument("--split", choices=ds.SPLITS, default="test")
    sp.add_argument("--n", type=int, default=4)
    sp.add_argument("--target", type=int, default=None, help="class index (default: true label)")
    sp.add_argument("--layer", choices=["c2", "c3", "c4", "c5"], default="c5")
    sp.add_argument("--head", choices=["fused", "1", "2", "dc", "con"], default="fused")
    sp.add_argument("--image-size", type=int, default=None)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("export-features", cmd_export, "write Head_Con input vectors as CSV")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", choices=[*ds.SPLITS, "all"], default="test")
    sp.add_argument("--image-size", type=int, default=None)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("project", cmd_project, "2-D principal-component projection of exported features")
    sp.add_argument("--features", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.seed is not None:
        torch.manual_seed(args.seed)
    try:
        args.fn(args)
    except UsageError as exc:
        print(f"apsnet {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"apsnet {args.command}: error: {msg}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())
