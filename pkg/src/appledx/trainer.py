"""Plain SGD fine-tuning loop with per-epoch validation and checkpointing.

Runs are deterministic given (seed, data): shuffling and augmentation use
generators derived from ``(seed, epoch, sample index)``, so a run resumed
from an epoch-N checkpoint replays exactly what a straight run would do.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Mapping, NamedTuple, Optional

import numpy as np

from . import ops
from .checkpoint import read_checkpoint, save_checkpoint
from .data import AugmentConfig, DatasetManifest, batch_iterator
from .errors import GraphError, NumericalError, ValidationError
from .metrics import ConfusionMatrix
from .model import Model, load_state
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

VELOCITY_PREFIX = "optim.velocity."
LOG_COLUMNS = ("epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy", "wall_time_s")


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 8
    max_epochs: int = 100
    seed: int = 42
    freeze_backbone: bool = False
    checkpoint_every: int = 0
    precision: str = "float32"
    momentum: float = 0.0
    weight_decay: float = 0.0
    augment: bool = True
    input_size: int = 224
    stem_stride: int = 2
    cache_images: bool = False
    skip_bad_images: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ValidationError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.checkpoint_every < 0:
            raise ValidationError("checkpoint_every must be >= 0")
        if self.precision not in ("float32", "float64"):
            raise ValidationError(f"precision must be float32 or float64, got {self.precision!r}")
        if not 0 <= self.momentum < 1:
            raise ValidationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float
    wall_time_s: float

    def __post_init__(self):
        for name in ("train_loss", "val_loss"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise NumericalError(f"epoch {self.epoch}: {name} is {value}")

    def key(self) -> tuple:
        """Everything except wall time, for run-to-run comparison."""
        return self.epoch, self.train_loss, self.train_accuracy, self.val_loss, self.val_accuracy


class TrainResult(NamedTuple):
    model: Model
    logs: list
    best_checkpoint: Optional[Path]


def sgd_step(params: Mapping[str, Tensor], learning_rate: float, momentum: float = 0.0,
             weight_decay: float = 0.0, velocity: Optional[dict] = None):
    """``w <- w - lr * g`` for every tensor in ``params``, then clear grads.

    Only pass trainable tensors; anything left out is untouched.  With
    momentum, ``velocity`` holds the per-tensor buffers between calls.
    """
    if momentum and velocity is None:
        raise ValidationError("momentum needs a velocity dict")
    for name, tensor in params.items():
        if tensor.grad is None:
            raise GraphError(f"trainable tensor {name!r} received no gradient")
    for name, tensor in params.items():
        grad = tensor.grad
        if weight_decay:
            grad = grad + weight_decay * tensor.data
        if momentum:
            buf = velocity.get(name)
            buf = grad.copy() if buf is None else momentum * buf + grad
            velocity[name] = buf
            grad = buf
        tensor.data -= learning_rate * grad
        tensor.grad = None


def evaluate(model: Model, manifest: DatasetManifest, split: str = "val", batch_size: int = 8,
             cache: Optional[dict] = None, skip_errors: bool = False):
    """Eval-mode confusion matrix and mean loss over one split.

    Prediction is the argmax of the logits, lowest class index on ties.
    Neither weights nor batchnorm statistics are modified.
    """
    if model.num_classes != len(manifest.classes):
        raise ValidationError(
            f"model has {model.num_classes} outputs but manifest lists {len(manifest.classes)} classes")
    k = len(manifest.classes)
    counts = np.zeros((k, k), dtype=np.int64)
    loss_sum, n = 0.0, 0
    with no_grad():
        for images, labels in batch_iterator(manifest, split, batch_size, shuffle=False,
                                             size=model.spec.input_size, cache=cache, skip_errors=skip_errors):
            logits = model.forward(images, "eval")
            loss_sum += float(ops.softmax_cross_entropy(logits, labels).data) * len(labels)
            n += len(labels)
            np.add.at(counts, (labels, logits.data.argmax(axis=1)), 1)
    return ConfusionMatrix(manifest.classes, counts), (loss_sum / n if n else math.nan)


def _cast_model(model: Model, dtype):
    for tensor in model.state().values():
        if tensor.dtype != dtype:
            tensor.data = tensor.data.astype(dtype)


def _append_log(path: Path, entry: EpochLog):
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(LOG_COLUMNS)
        writer.writerow([entry.epoch, f"{entry.train_loss:.6f}", f"{entry.train_accuracy:.4f}",
                         f"{entry.val_loss:.6f}", f"{entry.val_accuracy:.4f}", f"{entry.wall_time_s:.3f}"])


def read_epoch_log(path) -> list:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [EpochLog(int(r["epoch"]), *(float(r[c]) for c in LOG_COLUMNS[1:])) for r in rows]


def train(model: Model, manifest: DatasetManifest, config: TrainConfig, out_dir,
          augment_config: Optional[AugmentConfig] = None, resume=None,
          on_epoch: Optional[Callable[[EpochLog], None]] = None) -> TrainResult:
    """Fine-tune ``model`` on the train split, validating after every epoch.

    Writes ``best.ckpt`` whenever validation accuracy improves,
    ``epoch_NNN.ckpt`` every ``checkpoint_every`` epochs, ``final.ckpt`` at
    the end and appends one row per epoch to ``epoch_log.csv``.  ``resume``
    names a checkpoint written by a previous call; training continues from
    the epoch after the one stored in it.
    """
    config.validate()
    if model.num_classes != len(manifest.classes):
        raise ValidationError(
            f"model has {model.num_classes} outputs but manifest lists {len(manifest.classes)} classes")
    for split in ("train", "val"):
        if not manifest.split_records(split):
            raise ValidationError(f"manifest has no {split} records")
    if augment_config is None:
        augment_config = AugmentConfig(seed=config.seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _cast_model(model, np.dtype(config.precision))
    model.metadata["classes"] = list(manifest.classes)

    trainable = model.head_parameters() if config.freeze_backbone else model.parameters()
    velocity: dict = {}
    start_epoch, best_acc = 1, -1.0
    if resume is not None:
        meta, tensors = read_checkpoint(resume)
        load_state(model, tensors)
        start_epoch = int(meta.get("epoch", 0)) + 1
        best_acc = float(meta.get("best_val_accuracy", -1.0))
        if meta.get("train_seed") not in (None, config.seed):
            log.warning("resuming with seed %s, checkpoint was trained with %s", config.seed, meta["train_seed"])
        velocity = {k[len(VELOCITY_PREFIX):]: v.astype(model.dtype) for k, v in tensors.items()
                    if k.startswith(VELOCITY_PREFIX)}

    cache = {} if config.cache_images else None
    log_path = out_dir / "epoch_log.csv"
    if resume is None and log_path.exists():
        log_path.unlink()
    logs = []
    best_path = out_dir / "best.ckpt" if resume is not None and (out_dir / "best.ckpt").exists() else None

    def resume_state(epoch):
        meta = {"epoch": epoch, "best_val_accuracy": best_acc, "train_seed": config.seed}
        extra = {VELOCITY_PREFIX + k: v for k, v in velocity.items()}
        return meta, extra

    for epoch in range(start_epoch, config.max_epochs + 1):
        started = time.perf_counter()
        loss_sum, correct, seen = 0.0, 0, 0
        batches = batch_iterator(manifest, "train", config.batch_size, config.seed, epoch,
                                 augment_config if config.augment else None, size=model.spec.input_size,
                                 skip_errors=config.skip_bad_images, cache=cache)
        for index, (images, labels) in enumerate(batches):
            try:
                if config.freeze_backbone:
                    with no_grad():
                        features = model.features(images, training=False)
                    logits = model.head(Tensor(features.data))
                else:
                    logits = model.forward(images, "train")
                loss = ops.softmax_cross_entropy(logits, labels)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}, batch {index}: {exc}") from None
            backward(loss)
            sgd_step(trainable, config.learning_rate, config.momentum, config.weight_decay, velocity)
            loss_sum += float(loss.data) * len(labels)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
            seen += len(labels)
        cm, val_loss = evaluate(model, manifest, "val", config.batch_size, cache, config.skip_bad_images)
        entry = EpochLog(epoch, loss_sum / seen, 100.0 * correct / seen, val_loss,
                         100.0 * cm.correct / cm.total, time.perf_counter() - started)
        logs.append(entry)
        _append_log(log_path, entry)
        log.info("epoch %d: train loss %.4f, val loss %.4f, val acc %.2f%%",
                 epoch, entry.train_loss, entry.val_loss, entry.val_accuracy)
        if entry.val_accuracy > best_acc:
            best_acc = entry.val_accuracy
            best_path = out_dir / "best.ckpt"
            save_checkpoint(model, best_path, *resume_state(epoch))
        if config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_checkpoint(model, out_dir / f"epoch_{epoch:03d}.ckpt", *resume_state(epoch))
        if on_epoch is not None:
            on_epoch(entry)

    save_checkpoint(model, out_dir / "final.ckpt", *resume_state(config.max_epochs))
    return TrainResult(model, logs, best_path)


def config_fields() -> dict:
    return {f.name: f.type for f in fields(TrainConfig)}


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
