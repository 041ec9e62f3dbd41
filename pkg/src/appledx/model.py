"""ResNet-34 classifier with a replaceable fully connected head.

Parameter names follow ``<stage>.<block>.<layer>.<tensor>``::

    stem.conv.weight                    [64, 3, 7, 7]
    stem.bn.{gamma,beta,running_mean,running_var}
    stage{1..4}.block{i}.conv1.weight   3x3
    stage{1..4}.block{i}.bn1.*
    stage{1..4}.block{i}.conv2.weight   3x3
    stage{1..4}.block{i}.bn2.*
    stage{2..4}.block0.proj.conv.weight 1x1 stride-2 projection
    stage{2..4}.block0.proj.bn.*
    head.weight                         [num_classes, 512]
    head.bias                           [num_classes]

Running statistics are buffers: they travel with checkpoints but are not
trainable.
"""

from __future__ import annotations

import copy
import dataclasses
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .errors import DimensionError, ValidationError
from .tensor import Tensor, no_grad

HEAD_WEIGHT = "head.weight"
HEAD_BIAS = "head.bias"
BN_BUFFERS = ("running_mean", "running_var")


@dataclass(frozen=True)
class ModelSpec:
    stage_block_counts: tuple = (3, 4, 6, 3)
    stage_channels: tuple = (64, 128, 256, 512)
    num_classes: int = 6
    input_size: int = 224
    in_channels: int = 3
    stem_stride: int = 2

    def validate(self):
        if len(self.stage_block_counts) != len(self.stage_channels):
            raise ValidationError("stage_block_counts and stage_channels must have equal length")
        if any(b < 1 for b in self.stage_block_counts) or any(c < 1 for c in self.stage_channels):
            raise ValidationError("stage block counts and widths must be positive")
        if self.num_classes < 1:
            raise ValidationError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.stem_stride not in (1, 2):
            raise ValidationError(f"stem_stride must be 1 or 2, got {self.stem_stride}")
        if self.input_size < 1:
            raise ValidationError("input_size must be positive")
        size = self.input_size
        for _, _, s in _spatial_steps(self):
            size = ops.conv_output_size(size, *s)
            if size < 1:
                raise ValidationError(f"input_size {self.input_size} collapses to nothing inside the network")

    @property
    def feature_dim(self) -> int:
        return self.stage_channels[-1]

    def as_dict(self) -> dict:
        return {
            "stage_block_counts": list(self.stage_block_counts),
            "stage_channels": list(self.stage_channels),
            "num_classes": self.num_classes,
            "input_size": self.input_size,
            "in_channels": self.in_channels,
            "stem_stride": self.stem_stride,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["stage_block_counts"] = tuple(d["stage_block_counts"])
        d["stage_channels"] = tuple(d["stage_channels"])
        return cls(**d)


def _spatial_steps(spec: ModelSpec):
    """(name, kind, (kernel, stride, padding)) for every spatial reduction."""
    yield "stem.conv", "conv", (7, spec.stem_stride, 3)
    yield "stem.pool", "pool", (3, 2, 1)
    for i in range(1, len(spec.stage_channels)):
        yield f"stage{i + 1}.block0.conv1", "conv", (3, 2, 1)


@dataclass(frozen=True)
class ResidualBlockSpec:
    in_channels: int
    out_channels: int
    stride: int

    @property
    def projection(self) -> bool:
        return self.stride != 1 or self.in_channels != self.out_channels


def block_specs(spec: ModelSpec) -> list:
    """Per stage, the list of residual block layouts."""
    stages, prev = [], spec.stage_channels[0]
    for s, (count, width) in enumerate(zip(spec.stage_block_counts, spec.stage_channels)):
        blocks = []
        for b in range(count):
            stride = 2 if (b == 0 and s > 0) else 1
            blocks.append(ResidualBlockSpec(prev, width, stride))
            prev = width
        stages.append(blocks)
    return stages


@dataclass
class ResidualBlock:
    conv1: ops.ConvParams
    bn1: ops.BatchNormParams
    conv2: ops.ConvParams
    bn2: ops.BatchNormParams
    proj_conv: Optional[ops.ConvParams] = None
    proj_bn: Optional[ops.BatchNormParams] = None

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        out = ops.relu(ops.batchnorm2d(ops.conv2d(x, self.conv1), self.bn1, training))
        out = ops.batchnorm2d(ops.conv2d(out, self.conv2), self.bn2, training)
        shortcut = x
        if self.proj_conv is not None:
            shortcut = ops.batchnorm2d(ops.conv2d(x, self.proj_conv), self.proj_bn, training)
        return ops.relu(ops.add(out, shortcut))


@dataclass
class Model:
    spec: ModelSpec
    stem_conv: ops.ConvParams
    stem_bn: ops.BatchNormParams
    stages: list
    head_weight: Tensor
    head_bias: Tensor
    seed: Optional[int] = None
    metadata: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.head_weight.shape[0]

    @property
    def dtype(self):
        return self.head_weight.dtype

    # -- state -------------------------------------------------------------

    def _layers(self):
        yield "stem.conv", self.stem_conv
        yield "stem.bn", self.stem_bn
        for s, blocks in enumerate(self.stages, start=1):
            for b, block in enumerate(blocks):
                prefix = f"stage{s}.block{b}"
                yield f"{prefix}.conv1", block.conv1
                yield f"{prefix}.bn1", block.bn1
                yield f"{prefix}.conv2", block.conv2
                yield f"{prefix}.bn2", block.bn2
                if block.proj_conv is not None:
                    yield f"{prefix}.proj.conv", block.proj_conv
                    yield f"{prefix}.proj.bn", block.proj_bn

    def state(self) -> "OrderedDict[str, Tensor]":
        """Every named tensor (parameters and batchnorm buffers) in a fixed order."""
        out = OrderedDict()
        for name, layer in self._layers():
            if isinstance(layer, ops.ConvParams):
                out[f"{name}.weight"] = layer.weight
                if layer.bias is not None:
                    out[f"{name}.bias"] = layer.bias
            else:
                out[f"{name}.gamma"] = layer.gamma
                out[f"{name}.beta"] = layer.beta
                out[f"{name}.running_mean"] = layer.running_mean
                out[f"{name}.running_var"] = layer.running_var
        out[HEAD_WEIGHT] = self.head_weight
        out[HEAD_BIAS] = self.head_bias
        return out

    def parameters(self) -> "OrderedDict[str, Tensor]":
        """Trainable tensors only."""
        return OrderedDict((k, v) for k, v in self.state().items() if not k.endswith(BN_BUFFERS))

    def backbone_parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((k, v) for k, v in self.parameters().items() if not k.startswith("head."))

    def head_parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict([(HEAD_WEIGHT, self.head_weight), (HEAD_BIAS, self.head_bias)])

    def weighted_layer_count(self) -> int:
        """Convolutions on the main path plus the FC head (projections excluded)."""
        main = sum(1 for name, layer in self._layers()
                   if isinstance(layer, ops.ConvParams) and ".proj." not in name)
        return main + 1

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.parameters().values()))

    def zero_grad(self):
        for t in self.parameters().values():
            t.grad = None

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    # -- forward -----------------------------------------------------------

    def _check_input(self, x: Tensor):
        size = self.spec.input_size
        expected = (self.spec.in_channels, size, size)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise DimensionError(f"model input must be [N, {expected[0]}, {size}, {size}], got {x.shape}")

    def stages_forward(self, x: Tensor, training: bool = False) -> list:
        """Outputs of the stem and of every stage, in order."""
        self._check_input(x)
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype), requires_grad=x.requires_grad)
        out = ops.relu(ops.batchnorm2d(ops.conv2d(x, self.stem_conv), self.stem_bn, training))
        out = ops.maxpool2d(out, 3, 2, 1)
        outputs = [out]
        for blocks in self.stages:
            for block in blocks:
                out = block(out, training)
            outputs.append(out)
        return outputs

    def features(self, x: Tensor, training: bool = False) -> Tensor:
        """Globally pooled backbone features [N, 512]."""
        return ops.global_avg_pool(self.stages_forward(x, training)[-1])

    def head(self, features: Tensor) -> Tensor:
        return ops.linear(features, self.head_weight, self.head_bias)

    def forward(self, x: Tensor, mode: str = "eval") -> Tensor:
        if mode not in ("train", "eval"):
            raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
        return self.head(self.features(x, training=mode == "train"))

    __call__ = forward

    def predict_logits(self, batch: np.ndarray) -> np.ndarray:
        """Eval-mode logits for a plain array, without recording a graph."""
        with no_grad():
            return self.forward(Tensor(np.asarray(batch, dtype=self.dtype)), "eval").data


# ---------------------------------------------------------------------------
# construction


def _he_conv(rng, out_c, in_c, k, stride, padding, dtype):
    std = np.sqrt(2.0 / (in_c * k * k))
    w = (rng.standard_normal((out_c, in_c, k, k)) * std).astype(dtype)
    return ops.ConvParams(Tensor(w, requires_grad=True), None, stride, padding)


def _head(rng, num_classes, features, dtype):
    bound = 1.0 / np.sqrt(features)
    w = rng.uniform(-bound, bound, (num_classes, features)).astype(dtype)
    b = rng.uniform(-bound, bound, num_classes).astype(dtype)
    return Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)


def build_resnet34(spec: ModelSpec = ModelSpec(), seed: int = 0, dtype=np.float32) -> Model:
    """Fresh ResNet-34 with He-normal convolutions, unit batchnorm and a
    small uniform head, all drawn from ``seed``."""
    spec.validate()
    dtype = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    width0 = spec.stage_channels[0]
    stem_conv = _he_conv(rng, width0, spec.in_channels, 7, spec.stem_stride, 3, dtype)
    stem_bn = ops.BatchNormParams.fresh(width0, dtype)
    stages = []
    for layout in block_specs(spec):
        blocks = []
        for b in layout:
            block = ResidualBlock(
                conv1=_he_conv(rng, b.out_channels, b.in_channels, 3, b.stride, 1, dtype),
                bn1=ops.BatchNormParams.fresh(b.out_channels, dtype),
                conv2=_he_conv(rng, b.out_channels, b.out_channels, 3, 1, 1, dtype),
                bn2=ops.BatchNormParams.fresh(b.out_channels, dtype),
            )
            if b.projection:
                block.proj_conv = _he_conv(rng, b.out_channels, b.in_channels, 1, b.stride, 0, dtype)
                block.proj_bn = ops.BatchNormParams.fresh(b.out_channels, dtype)
            blocks.append(block)
        stages.append(blocks)
    head_w, head_b = _head(rng, spec.num_classes, spec.feature_dim, dtype)
    return Model(spec, stem_conv, stem_bn, stages, head_w, head_b, seed=seed)


def replace_head(model: Model, new_classes: int, seed: int = 0, zero: bool = False) -> Model:
    """Copy of ``model`` with a freshly initialised ``new_classes``-way head.

    Every backbone tensor of the copy is bit-identical to the original.
    ``zero=True`` gives an all-zero head (uniform softmax).
    """
    if new_classes < 1:
        raise ValidationError(f"new_classes must be >= 1, got {new_classes}")
    new = model.copy()
    features = model.spec.feature_dim
    if zero:
        w = Tensor(np.zeros((new_classes, features), model.dtype), requires_grad=True)
        b = Tensor(np.zeros(new_classes, model.dtype), requires_grad=True)
    else:
        w, b = _head(np.random.default_rng(seed), new_classes, features, model.dtype)
    new.head_weight, new.head_bias = w, b
    new.spec = dataclasses.replace(model.spec, num_classes=new_classes)
    new.metadata = {k: v for k, v in model.metadata.items() if k != "classes"}
    return new


def load_state(model: Model, tensors: dict, strict: bool = True):
    """Copy arrays from ``tensors`` into ``model`` by name, checking shapes."""
    from .errors import IncompatibleCheckpointError

    state = model.state()
    if strict:
        missing = [k for k in state if k not in tensors]
        if missing:
            raise IncompatibleCheckpointError(f"missing tensor {missing[0]!r}", missing[0])
        unexpected = [k for k in tensors if k not in state and not k.startswith("optim.")]
        if unexpected:
            raise IncompatibleCheckpointError(f"unexpected tensor {unexpected[0]!r}", unexpected[0])
    for name, target in state.items():
        if name not in tensors:
            continue
        array = np.asarray(tensors[name])
        if array.shape != target.shape:
            raise IncompatibleCheckpointError(
                f"tensor {name!r} has shape {array.shape} in checkpoint but {target.shape} in model", name)
        target.data = array.astype(target.dtype, copy=True)
