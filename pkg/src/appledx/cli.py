"""Command-line entry point: ``appledx {split,train,eval,predict,metrics}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, data, metrics, ops, trainer
from .config import RunConfig, load_config_file
from .errors import AppleDxError, ValidationError
from .model import ModelSpec, build_resnet34

log = logging.getLogger("appledx")


def _out(text=""):
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


def cmd_split(args) -> int:
    classes = [c for c in args.classes.split(",") if c] if args.classes else None
    classes, records = data.scan_directory(args.data_dir, classes)
    manifest = data.split_dataset(records, args.ratio, args.seed, classes)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.write_manifest(manifest, out)
    _out(f"seed: {args.seed}")
    _out(f"ratio: {args.ratio}")
    _out(f"{'Class':<16}{'Images':>8}{'Train':>8}{'Val':>8}")
    total = [0, 0]
    for label, (n_train, n_val) in manifest.counts().items():
        _out(f"{label:<16}{n_train + n_val:>8}{n_train:>8}{n_val:>8}")
        total[0] += n_train
        total[1] += n_val
    _out(f"{'Total':<16}{sum(total):>8}{total[0]:>8}{total[1]:>8}")
    _out(f"manifest written to {out}")
    return 0


def _train_overrides(args) -> dict:
    return {
        "manifest": args.manifest, "out_dir": args.out, "pretrained": args.pretrained, "classes": args.classes,
        "seed": args.seed, "learning_rate": args.lr, "batch_size": args.batch_size, "max_epochs": args.epochs,
        "freeze_backbone": True if args.freeze_backbone else None, "input_size": args.input_size,
        "stem_stride": args.stem_stride, "augment": False if args.no_augment else None,
        "checkpoint_every": args.checkpoint_every, "precision": args.precision,
        "cache_images": True if args.cache_images else None,
    }


def cmd_train(args) -> int:
    file_values = load_config_file(args.config) if args.config else {}
    cfg = RunConfig.resolve(file_values, _train_overrides(args))
    if cfg.manifest is None or cfg.out_dir is None:
        raise ValidationError("train needs --manifest and --out (or manifest/out_dir in the config file)")
    cfg.check_paths()
    manifest = data.read_manifest(cfg.manifest)
    n_classes = len(manifest.classes)
    if cfg.pretrained:
        replace = cfg.classes is not None
        if replace and cfg.classes != n_classes:
            raise ValidationError(f"--classes {cfg.classes} does not match the manifest's {n_classes} classes")
        model = checkpoint.load_checkpoint(cfg.pretrained, num_classes=n_classes, replace=replace,
                                           head_seed=cfg.seed)
    else:
        spec = ModelSpec(num_classes=n_classes, input_size=cfg.train.input_size, stem_stride=cfg.train.stem_stride)
        model = build_resnet34(spec, seed=cfg.seed)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    effective = cfg.to_text()
    (out_dir / "run_config.txt").write_text(effective, encoding="utf-8")
    _out("effective configuration:")
    _out(effective)

    def report(entry):
        _out(f"epoch {entry.epoch:>3}  train_loss {entry.train_loss:.4f}  train_acc {entry.train_accuracy:6.2f}%  "
             f"val_loss {entry.val_loss:.4f}  val_acc {entry.val_accuracy:6.2f}%")

    result = trainer.train(model, manifest, cfg.train, out_dir, cfg.augment, resume=args.resume, on_epoch=report)
    if result.logs:
        best = max(result.logs, key=lambda e: e.val_accuracy)
        _out(f"final val accuracy {result.logs[-1].val_accuracy:.2f}% (epoch {result.logs[-1].epoch}); "
             f"best {best.val_accuracy:.2f}% (epoch {best.epoch})")
    _out(f"checkpoints: {out_dir / 'final.ckpt'}" + (f", {result.best_checkpoint}" if result.best_checkpoint else ""))
    return 0


def cmd_eval(args) -> int:
    manifest = data.read_manifest(args.manifest)
    model = checkpoint.load_checkpoint(args.checkpoint)
    _out(f"seed: {model.seed}")
    cm, loss = trainer.evaluate(model, manifest, args.split, args.batch_size)
    report = metrics.compute_report(cm)
    _out(f"split: {args.split} ({cm.total} images), mean loss {loss:.6f}")
    _out(metrics.dumps_cm(cm))
    _out(metrics.emit_report(report, "text").decode())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "cm.csv").write_text(metrics.dumps_cm(cm), encoding="utf-8")
        (out / "report.txt").write_bytes(metrics.emit_report(report, "text"))
        (out / "report.json").write_bytes(metrics.emit_report(report, "json"))
    return 0


def _class_names(model) -> list:
    names = model.metadata.get("classes")
    if names and len(names) == model.num_classes:
        return list(names)
    if model.num_classes == len(data.CLASSES):
        return list(data.CLASSES)
    return [f"class{i}" for i in range(model.num_classes)]


def cmd_predict(args) -> int:
    model = checkpoint.load_checkpoint(args.checkpoint)
    names = _class_names(model)
    _out(f"seed: {model.seed}")
    failures, rows = 0, []
    for path in args.image:
        try:
            image = data.load_image_array(path, model.spec.input_size)
        except AppleDxError as exc:
            failures += 1
            print(f"error: {exc}", file=sys.stderr)
            continue
        probs = ops.softmax(model.predict_logits(image[None]).astype(np.float64))[0]
        rows.append((path, names[int(probs.argmax())], probs))
    if args.format == "json":
        payload = [{"image": str(p), "top1": top, "probabilities": dict(zip(names, map(float, pr)))}
                   for p, top, pr in rows]
        _out(json.dumps(payload, indent=2))
    else:
        _out("\t".join(["image", "top1", *names]))
        for path, top, probs in rows:
            _out("\t".join([str(path), top, *(f"{p:.8f}" for p in probs)]))
    return 1 if failures else 0


def cmd_metrics(args) -> int:
    cm = metrics.parse_cm(args.cm)
    report = metrics.compute_report(cm)
    payload = metrics.emit_report(report, args.format)
    if args.out:
        Path(args.out).write_bytes(payload)
    sys.stdout.write(payload.decode())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="appledx", description="Apple leaf disease classification pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="build a stratified train/val manifest from class directories")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--ratio", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--classes", help="comma-separated class list (default: sub-directories found)")
    p.add_argument("--out", required=True, help="manifest file to write")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="fine-tune ResNet-34 with plain SGD")
    p.add_argument("--manifest")
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--pretrained", help="checkpoint to initialise from")
    p.add_argument("--classes", type=int, help="replace the pretrained head with this many classes")
    p.add_argument("--out", help="output directory")
    p.add_argument("--resume", help="continue from a checkpoint written by an earlier run")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--freeze-backbone", action="store_true")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--input-size", type=int)
    p.add_argument("--stem-stride", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--precision", choices=["float32", "float64"])
    p.add_argument("--cache-images", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="confusion matrix and metrics of a checkpoint on one split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=data.SPLITS, default="val")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--out", help="directory for cm.csv, report.txt and report.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify individual images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, nargs="+")
    p.add_argument("--format", choices=["text", "json"], default="text")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("metrics", help="metrics report from a confusion-matrix CSV")
    p.add_argument("--cm", required=True)
    p.add_argument("--format", choices=["text", "json"], default="text")
    p.add_argument("--out")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (AppleDxError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
