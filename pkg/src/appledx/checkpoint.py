"""Named-tensor checkpoint files.

Layout (all integers little-endian uint32)::

    magic      8 bytes   b"APDXCKPT"
    version    u32       currently 1
    meta_len   u32       length of the metadata block
    metadata   bytes     UTF-8 JSON object, keys sorted
    count      u32       number of tensors
    count x:
        name_len u32, name bytes (UTF-8)
        rank     u32, rank x u32 extents
        data     product(extents) little-endian float32, row-major
    crc32      u32       zlib.crc32 of every preceding byte

Files are written to a temporary sibling and renamed into place, so a failed
write never leaves a partial checkpoint behind.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CheckpointFormatError, IncompatibleCheckpointError
from .model import HEAD_WEIGHT, Model, ModelSpec, build_resnet34, load_state, replace_head

MAGIC = b"APDXCKPT"
VERSION = 1
_U32 = struct.Struct("<I")


def encode(metadata: dict, tensors: "OrderedDict[str, np.ndarray]") -> bytes:
    parts = [MAGIC, _U32.pack(VERSION)]
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts += [_U32.pack(len(meta)), meta, _U32.pack(len(tensors))]
    for name, array in tensors.items():
        raw = name.encode("utf-8")
        array = np.asarray(array)
        parts += [_U32.pack(len(raw)), raw, _U32.pack(array.ndim)]
        parts += [_U32.pack(d) for d in array.shape]
        parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def decode(buf: bytes):
    """Parse checkpoint bytes into ``(metadata, OrderedDict[name, float32 array])``."""
    if len(buf) < len(MAGIC) + 8 or buf[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("bad magic: not a checkpoint file")
    body, trailer = buf[:-4], buf[-4:]
    r = _Reader(body)
    r.take(len(MAGIC))
    version = r.u32()
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if zlib.crc32(body) != _U32.unpack(trailer)[0]:
        raise CheckpointFormatError("checksum mismatch: checkpoint is truncated or corrupt")
    try:
        metadata = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable metadata: {exc}") from None
    tensors = OrderedDict()
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8", errors="strict")
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
        if name in tensors:
            raise CheckpointFormatError(f"duplicate tensor name {name!r}")
        tensors[name] = data
    if r.pos != len(body):
        raise CheckpointFormatError("trailing bytes after last tensor")
    return metadata, tensors


def write_checkpoint(path, metadata: dict, tensors) -> Path:
    path = Path(path)
    data = encode(metadata, tensors)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_checkpoint(path):
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {exc}") from None
    return decode(buf)


def model_metadata(model: Model) -> dict:
    meta = {"format": "appledx-resnet34", "spec": model.spec.as_dict(), "num_classes": model.num_classes,
            "seed": model.seed}
    meta.update(model.metadata)
    return meta


def save_checkpoint(model: Model, path, extra_metadata: Optional[dict] = None, extra_tensors=None) -> Path:
    """Write every model tensor (plus optional ``extra_tensors``) to ``path``."""
    tensors = OrderedDict((k, v.data) for k, v in model.state().items())
    for name, array in (extra_tensors or {}).items():
        tensors[name] = array
    meta = model_metadata(model)
    meta.update(extra_metadata or {})
    return write_checkpoint(path, meta, tensors)


def model_from_tensors(metadata: dict, tensors, num_classes: Optional[int] = None,
                       replace: bool = False, head_seed: int = 0, dtype=np.float32) -> Model:
    try:
        spec = ModelSpec.from_dict(metadata["spec"])
    except (KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"metadata lacks a valid model spec: {exc}") from None
    if HEAD_WEIGHT in tensors and tensors[HEAD_WEIGHT].shape[0] != spec.num_classes:
        raise IncompatibleCheckpointError(
            f"tensor {HEAD_WEIGHT!r} has {tensors[HEAD_WEIGHT].shape[0]} rows, metadata says {spec.num_classes}",
            HEAD_WEIGHT)
    model = build_resnet34(spec, seed=0, dtype=dtype)
    load_state(model, tensors)
    model.seed = metadata.get("seed")
    if "classes" in metadata:
        model.metadata["classes"] = list(metadata["classes"])
    if num_classes is not None and num_classes != spec.num_classes:
        if not replace:
            raise IncompatibleCheckpointError(
                f"checkpoint head {HEAD_WEIGHT!r} is {spec.num_classes}-way but {num_classes} classes were "
                f"requested; enable head replacement to load it", HEAD_WEIGHT)
        model = replace_head(model, num_classes, seed=head_seed)
    return model


def load_checkpoint(path, num_classes: Optional[int] = None, replace: bool = False,
                    head_seed: int = 0, dtype=np.float32) -> Model:
    """Rebuild a model from ``path``.

    When ``num_classes`` differs from the stored head, ``replace=True`` swaps in
    a fresh head; otherwise IncompatibleCheckpointError names the head tensor.
    """
    metadata, tensors = read_checkpoint(path)
    return model_from_tensors(metadata, tensors, num_classes, replace, head_seed, dtype)
