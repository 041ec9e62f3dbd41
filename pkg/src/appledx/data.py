"""Image ingestion, augmentation, stratified splitting and batching.

Images are decoded with Pillow, converted to RGB (greyscale is replicated,
palette images are expanded, alpha is dropped without compositing), scaled
to [0, 1], bilinearly resized and normalised with the ImageNet per-channel
mean/std below.  Every random choice derives from an explicit seed.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import IngestionError, ParseError, ValidationError
from .tensor import Tensor

log = logging.getLogger(__name__)

CLASSES = ("Scab", "Alternaria", "AppleMosaic", "MLB", "PowderyMildew", "Healthy")
IMAGE_SIZE = 224
MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)
IMAGE_SUFFIXES = (".ppm", ".pgm", ".pnm", ".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
MANIFEST_MAGIC = "# appledx manifest v1"
SPLITS = ("train", "val")


# ---------------------------------------------------------------------------
# decoding and resizing


def decode_image(path) -> np.ndarray:
    """Read ``path`` into a uint8 array [H, W, 3]."""
    from PIL import Image, ImageOps, UnidentifiedImageError

    try:
        with Image.open(path) as img:
            img = ImageOps.exif_transpose(img)
            img.load()
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise IngestionError(path, "file not found") from None
    except (UnidentifiedImageError, OSError, ValueError, SyntaxError) as exc:
        raise IngestionError(path, f"cannot decode image ({exc})") from None


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a [C, H, W] array with half-pixel-centred bilinear interpolation.

    Source coordinates outside the image are clamped to the border pixels.
    """
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis(h, out_h)
    x0, x1, wx = axis(w, out_w)
    img = image.astype(np.float64)
    rows = img[:, y0, :] * (1 - wy)[None, :, None] + img[:, y1, :] * wy[None, :, None]
    out = rows[:, :, x0] * (1 - wx) + rows[:, :, x1] * wx
    return out.astype(image.dtype if image.dtype.kind == "f" else np.float32)


def normalize(image: np.ndarray) -> np.ndarray:
    return ((image - MEAN[:, None, None]) / STD[:, None, None]).astype(np.float32)


def load_image_array(path, size: int = IMAGE_SIZE) -> np.ndarray:
    pixels = decode_image(path).astype(np.float32) / 255.0
    resized = bilinear_resize(np.ascontiguousarray(pixels.transpose(2, 0, 1)), size, size)
    out = normalize(resized)
    if not np.isfinite(out).all():
        raise IngestionError(path, "decoded image contains non-finite values")
    return out


def load_and_resize(path, size: int = IMAGE_SIZE) -> Tensor:
    """Decoded, resized and normalised image as a Tensor [3, size, size]."""
    return Tensor(load_image_array(path, size))


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    rotation_max_deg: float = 30.0
    translate_max_frac: float = 0.10
    reflect: float = 0.5
    scale_range: tuple = (0.8, 1.2)
    seed: int = 42

    def __post_init__(self):
        self.scale_range = tuple(float(v) for v in self.scale_range)
        self.validate()

    def validate(self):
        lo, hi = self.scale_range if len(self.scale_range) == 2 else (None, None)
        if lo is None or not (0 < lo <= hi):
            raise ValidationError(f"scale_range must be two positive numbers lo <= hi, got {self.scale_range}")
        if not 0 <= self.rotation_max_deg <= 180:
            raise ValidationError(f"rotation_max_deg must lie in [0, 180], got {self.rotation_max_deg}")
        if not 0 <= self.translate_max_frac <= 0.5:
            raise ValidationError(f"translate_max_frac must lie in [0, 0.5], got {self.translate_max_frac}")
        if not 0 <= self.reflect <= 1:
            raise ValidationError(f"reflect probability must lie in [0, 1], got {self.reflect}")

    @classmethod
    def identity(cls, seed: int = 42) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, (1.0, 1.0), seed)


@dataclass(frozen=True)
class AffineParams:
    scale: float = 1.0
    angle_deg: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    flip: bool = False


def _cos_sin(angle_deg: float):
    # exact values at multiples of 90 degrees keep axis-aligned rotations lossless
    quarter, rem = divmod(angle_deg, 90.0)
    if rem == 0:
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][int(quarter) % 4]
    rad = math.radians(angle_deg)
    return math.cos(rad), math.sin(rad)


def _bilinear_sample(image: np.ndarray, sy: np.ndarray, sx: np.ndarray, fill: float) -> np.ndarray:
    c, h, w = image.shape
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy, fx = sy - y0, sx - x0
    img = image.astype(np.float64)
    out = np.zeros((c,) + sy.shape)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = img[:, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            vals = np.where(inside, vals, fill)
            out += vals * (wy * wx)
    return out.astype(image.dtype)


def apply_affine(image: np.ndarray, params: AffineParams, fill: float = 0.0) -> np.ndarray:
    """Scale, rotate (counter-clockwise as displayed), translate and optionally
    mirror a [C, H, W] image about its centre, resampling bilinearly."""
    c, h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    oy, ox = np.mgrid[0:h, 0:w].astype(np.float64)
    if params.flip:
        ox = (w - 1) - ox
    qy = oy - params.ty - cy
    qx = ox - params.tx - cx
    cos, sin = _cos_sin(params.angle_deg)
    sx = (cos * qx - sin * qy) / params.scale + cx
    sy = (sin * qx + cos * qy) / params.scale + cy
    return _bilinear_sample(image, sy, sx, fill)


def sample_affine(config: AugmentConfig, rng: np.random.Generator, h: int, w: int) -> AffineParams:
    lo, hi = config.scale_range
    u = rng.random(5)
    return AffineParams(
        scale=lo + (hi - lo) * u[0],
        angle_deg=config.rotation_max_deg * (2 * u[1] - 1),
        tx=config.translate_max_frac * w * (2 * u[2] - 1),
        ty=config.translate_max_frac * h * (2 * u[3] - 1),
        flip=bool(u[4] < config.reflect),
    )


def augment(image, config: AugmentConfig, rng: np.random.Generator):
    """Random scale, rotation, translation and horizontal reflection.

    Accepts a [3, H, W] array or Tensor and returns the same kind.  Pixels
    pulled from outside the frame become 0, the per-channel mean after
    normalisation.
    """
    is_tensor = isinstance(image, Tensor)
    data = image.data if is_tensor else np.asarray(image)
    params = sample_affine(config, rng, data.shape[1], data.shape[2])
    if params == AffineParams():
        out = data.copy()
    else:
        out = apply_affine(data, params)
    return Tensor(out) if is_tensor else out


# ---------------------------------------------------------------------------
# manifests and splitting


@dataclass(frozen=True)
class SampleRecord:
    path: str
    label: str
    split: Optional[str] = None


@dataclass
class DatasetManifest:
    classes: tuple
    seed: int
    ratio: float
    records: list = field(default_factory=list)

    def __post_init__(self):
        self.classes = tuple(self.classes)
        self.validate()

    def validate(self):
        if len(set(self.classes)) != len(self.classes) or not self.classes:
            raise ValidationError(f"class list must be non-empty and unique: {self.classes}")
        seen = set()
        for rec in self.records:
            if rec.label not in self.classes:
                raise ValidationError(f"record {rec.path} has unknown label {rec.label!r}")
            if rec.split not in SPLITS:
                raise ValidationError(f"record {rec.path} has invalid split {rec.split!r}")
            if rec.path in seen:
                raise ValidationError(f"duplicate path in manifest: {rec.path}")
            seen.add(rec.path)

    def class_index(self, label: str) -> int:
        return self.classes.index(label)

    def split_records(self, split: str) -> list:
        if split not in SPLITS:
            raise ValidationError(f"split must be one of {SPLITS}, got {split!r}")
        return [r for r in self.records if r.split == split]

    def counts(self) -> dict:
        """{class: (train, val)} in class order."""
        c = Counter((r.label, r.split) for r in self.records)
        return {k: (c[(k, "train")], c[(k, "val")]) for k in self.classes}


def train_count(n: int, ratio: float) -> int:
    """floor(ratio * n) evaluated on the decimal ratio, so 0.7 * 1550 is 1085."""
    return math.floor(Fraction(str(ratio)) * n)


def split_dataset(records: Sequence[SampleRecord], ratio: float = 0.70, seed: int = 42,
                  classes: Optional[Sequence[str]] = None) -> DatasetManifest:
    """Stratified split: per class, a seeded permutation puts the first
    floor(ratio * n) samples in train and the rest in val."""
    if not 0 < ratio < 1:
        raise ValidationError(f"ratio must lie in (0, 1), got {ratio}")
    classes = tuple(classes) if classes is not None else CLASSES
    by_class = {k: [] for k in classes}
    for rec in records:
        if rec.label not in by_class:
            raise ValidationError(f"record {rec.path} has unknown label {rec.label!r}")
        by_class[rec.label].append(rec.path)
    rng = np.random.default_rng(seed)
    out = []
    for label in classes:
        paths = sorted(by_class[label])
        if not paths:
            raise ValidationError(f"class {label!r} has no samples")
        if len(set(paths)) != len(paths):
            raise ValidationError(f"class {label!r} contains duplicate paths")
        order = rng.permutation(len(paths))
        n_train = train_count(len(paths), ratio)
        for rank, idx in enumerate(order):
            out.append(SampleRecord(paths[idx], label, "train" if rank < n_train else "val"))
    return DatasetManifest(classes, seed, ratio, out)


def _order_classes(names):
    known = [c for c in CLASSES if c in names]
    return tuple(known + sorted(n for n in names if n not in CLASSES))


def scan_directory(data_dir, classes: Optional[Sequence[str]] = None) -> tuple:
    """Collect ``(classes, records)`` from one sub-directory per class.

    Without ``classes`` the sub-directories found are used: the six disease
    classes first in their canonical order, then any others alphabetically.
    """
    root = Path(data_dir)
    if not root.is_dir():
        raise ValidationError(f"data directory does not exist: {root}")
    if classes is None:
        classes = _order_classes([p.name for p in root.iterdir() if p.is_dir() and not p.name.startswith(".")])
        if not classes:
            raise ValidationError(f"{root} contains no class sub-directories")
    records = []
    for label in classes:
        folder = root / label
        if not folder.is_dir():
            raise ValidationError(f"class {label!r} has no directory under {root}")
        files = sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise ValidationError(f"class {label!r} has no images in {folder}")
        records += [SampleRecord(str(p.resolve()), label) for p in files]
    return tuple(classes), records


def dumps_manifest(manifest: DatasetManifest, base_dir=None) -> str:
    buf = io.StringIO()
    buf.write(f"{MANIFEST_MAGIC}\n# classes: {','.join(manifest.classes)}\n")
    buf.write(f"# seed: {manifest.seed}\n# ratio: {manifest.ratio}\n")
    writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
    writer.writerow(["path", "label", "split"])
    for rec in manifest.records:
        path = rec.path
        if base_dir is not None:
            try:
                path = Path(path).resolve().relative_to(Path(base_dir).resolve()).as_posix()
            except ValueError:
                pass
        writer.writerow([path, rec.label, rec.split])
    return buf.getvalue()


def write_manifest(manifest: DatasetManifest, path) -> Path:
    """Write ``manifest`` as tab-separated text; paths below the manifest's
    directory are stored relative to it."""
    path = Path(path)
    path.write_text(dumps_manifest(manifest, path.parent), encoding="utf-8")
    return path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ParseError(f"cannot read manifest: {exc}", source=path) from None
    if not lines or lines[0].strip() != MANIFEST_MAGIC:
        raise ParseError(f"missing header {MANIFEST_MAGIC!r}", line=1, source=path)
    header, lineno = {}, 1
    while lineno < len(lines) and lines[lineno].startswith("#"):
        key, sep, value = lines[lineno][1:].partition(":")
        if not sep:
            raise ParseError("header lines must read '# key: value'", line=lineno + 1, source=path)
        header[key.strip()] = value.strip()
        lineno += 1
    try:
        classes = tuple(c for c in header["classes"].split(",") if c)
        seed, ratio = int(header["seed"]), float(header["ratio"])
    except (KeyError, ValueError) as exc:
        raise ParseError(f"incomplete manifest header: {exc}", line=lineno, source=path) from None
    if lineno >= len(lines) or lines[lineno].split("\t") != ["path", "label", "split"]:
        raise ParseError("expected column row 'path<TAB>label<TAB>split'", line=lineno + 1, source=path)
    records = []
    for offset, row in enumerate(csv.reader(lines[lineno + 1:], delimiter="\t"), start=lineno + 2):
        if not row:
            continue
        if len(row) != 3:
            raise ParseError(f"expected 3 fields, got {len(row)}", line=offset, source=path)
        rec_path, label, split = row
        if label not in classes:
            raise ParseError(f"unknown class {label!r}", line=offset, source=path)
        if split not in SPLITS:
            raise ParseError(f"unknown split {split!r}", line=offset, source=path)
        full = Path(rec_path)
        if not full.is_absolute():
            full = path.parent / full
        records.append(SampleRecord(str(full), label, split))
    try:
        return DatasetManifest(classes, seed, ratio, records)
    except ValidationError as exc:
        raise ParseError(str(exc), source=path) from None


# ---------------------------------------------------------------------------
# batching


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Augmentation stream of one sample in one epoch, independent of batch layout."""
    return np.random.default_rng([seed, epoch, index, 0xA6])


def batch_iterator(manifest: DatasetManifest, split: str, batch_size: int, shuffle_seed: int = 42,
                   epoch: int = 0, augment_config: Optional[AugmentConfig] = None, size: int = IMAGE_SIZE,
                   shuffle: bool = True, skip_errors: bool = False, cache: Optional[dict] = None,
                   workers: int = 0) -> Iterator:
    """Yield ``(Tensor [B, 3, size, size], int64 labels [B])`` covering ``split`` once.

    Order is a seeded permutation of the split for ``(shuffle_seed, epoch)``;
    the last batch may be short.  Augmentation is only ever applied to the
    train split.  Unreadable images raise IngestionError unless
    ``skip_errors`` is set, in which case they are logged and dropped.
    """
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    records = manifest.split_records(split)
    order = epoch_permutation(len(records), shuffle_seed, epoch) if shuffle else np.arange(len(records))
    aug = augment_config if split == "train" else None
    pool = ThreadPoolExecutor(workers) if workers > 0 else None

    def load(idx):
        rec = records[idx]
        try:
            if cache is not None and rec.path in cache:
                image = cache[rec.path]
            else:
                image = load_image_array(rec.path, size)
                if cache is not None:
                    cache[rec.path] = image
        except IngestionError:
            if not skip_errors:
                raise
            log.warning("skipping unreadable image %s", rec.path)
            return None
        if aug is not None:
            image = augment(image, aug, sample_rng(aug.seed, epoch, int(idx)))
        return image, manifest.class_index(rec.label)

    try:
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            loaded = list(pool.map(load, chunk)) if pool else [load(i) for i in chunk]
            loaded = [item for item in loaded if item is not None]
            if not loaded:
                continue
            images = np.stack([item[0] for item in loaded]).astype(np.float32)
            labels = np.array([item[1] for item in loaded], dtype=np.int64)
            yield Tensor(images), labels
    finally:
        if pool:
            pool.shutdown()


def augment_config_dict(config: AugmentConfig) -> dict:
    d = asdict(config)
    d["scale_range"] = list(config.scale_range)
    return d
