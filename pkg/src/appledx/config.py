"""Run configuration file: ``key = value`` lines, ``#`` comments.

Recognised keys::

    manifest, out_dir, pretrained          paths
    classes                                int, replace a pretrained head with this many outputs
    seed                                   int, default 42
    learning_rate, batch_size, max_epochs, freeze_backbone, checkpoint_every,
    precision, momentum, weight_decay, augment, input_size, stem_stride,
    cache_images, skip_bad_images          training options
    augment.rotation_max_deg, augment.translate_max_frac, augment.reflect,
    augment.scale_range (two numbers, "0.8, 1.2"), augment.seed

Values resolve as defaults < config file < command-line flags.  The
effective configuration renders back into the same format.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .data import AugmentConfig
from .errors import ParseError, ValidationError
from .trainer import TrainConfig

DEFAULT_SEED = 42
PATH_KEYS = ("manifest", "out_dir", "pretrained")


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _pair(text: str) -> tuple:
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 2:
        raise ValueError(f"expected two numbers, got {text!r}")
    return float(parts[0]), float(parts[1])


_CASTS = {int: int, float: float, bool: _bool, str: str, tuple: _pair}


def _schema() -> dict:
    schema = {"manifest": str, "out_dir": str, "pretrained": str, "classes": int}
    defaults_train, defaults_aug = TrainConfig(), AugmentConfig()
    for f in fields(TrainConfig):
        schema[f.name] = type(getattr(defaults_train, f.name))
    for f in fields(AugmentConfig):
        schema[f"augment.{f.name}"] = type(getattr(defaults_aug, f.name))
    return schema


SCHEMA = _schema()


def parse_config_text(text: str, source=None) -> dict:
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ParseError("expected 'key = value'", line=lineno, source=source)
        if key not in SCHEMA:
            raise ParseError(f"unknown key {key!r}", line=lineno, source=source)
        if key in values:
            raise ParseError(f"duplicate key {key!r} (first set on line {lines[key]})", line=lineno, source=source)
        try:
            values[key] = _CASTS[SCHEMA[key]](value)
        except ValueError as exc:
            raise ParseError(f"bad value for {key!r}: {exc}", line=lineno, source=source) from None
        lines[key] = lineno
    return values


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read config: {exc}", source=path) from None
    return parse_config_text(text, source=path)


@dataclass
class RunConfig:
    manifest: Optional[str] = None
    out_dir: Optional[str] = None
    pretrained: Optional[str] = None
    classes: Optional[int] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    @property
    def seed(self) -> int:
        return self.train.seed

    @classmethod
    def resolve(cls, file_values: Optional[dict] = None, overrides: Optional[dict] = None) -> "RunConfig":
        """Merge defaults, config-file values and flag overrides (None means unset)."""
        merged = dict(file_values or {})
        merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
        unknown = set(merged) - set(SCHEMA)
        if unknown:
            raise ValidationError(f"unknown configuration keys: {sorted(unknown)}")
        merged.setdefault("seed", DEFAULT_SEED)
        merged.setdefault("augment.seed", merged["seed"])
        train = TrainConfig(**{f.name: merged[f.name] for f in fields(TrainConfig) if f.name in merged})
        augment = AugmentConfig(**{f.name: merged[f"augment.{f.name}"] for f in fields(AugmentConfig)
                                   if f"augment.{f.name}" in merged})
        return cls(merged.get("manifest"), merged.get("out_dir"), merged.get("pretrained"),
                   merged.get("classes"), train, augment)

    def check_paths(self):
        for key in ("manifest", "pretrained"):
            value = getattr(self, key)
            if value is not None and not Path(value).is_file():
                raise ValidationError(f"{key} file does not exist: {value}")

    def to_text(self) -> str:
        lines = []
        for key in PATH_KEYS + ("classes",):
            value = getattr(self, key)
            if value is not None:
                lines.append(f"{key} = {value}")
        for f in fields(TrainConfig):
            lines.append(f"{f.name} = {_fmt(getattr(self.train, f.name))}")
        for f in fields(AugmentConfig):
            lines.append(f"augment.{f.name} = {_fmt(getattr(self.augment, f.name))}")
        return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    return str(value)
