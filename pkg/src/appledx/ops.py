"""Differentiable operators used by the ResNet-34 classifier.

Layout is always [batch, channel, height, width].  Every op checks its
output for NaN/Inf and raises :class:`NumericalError` instead of letting a
non-finite value propagate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericalError, ValidationError
from .tensor import GraphNode, Tensor, is_grad_enabled


def _finish(op, out, inputs, backward_fn):
    if not np.isfinite(out).all():
        raise NumericalError(f"{op} produced a non-finite value")
    result = Tensor(out)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result._node = GraphNode(op, inputs, backward_fn)
    return result


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check_rank(x: Tensor, rank: int, op: str):
    if x.ndim != rank:
        raise DimensionError(f"{op}: expected a rank-{rank} tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution


@dataclass
class ConvParams:
    weight: Tensor  # [out, in, kh, kw]
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise DimensionError(f"conv weight must be [out, in, kh, kw], got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.out_channels,):
            raise DimensionError(f"conv bias shape {self.bias.shape} != ({self.out_channels},)")
        if self.stride < 1 or self.padding < 0:
            raise ValidationError(f"invalid stride={self.stride} / padding={self.padding}")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_h(self) -> int:
        return self.weight.shape[2]

    @property
    def kernel_w(self) -> int:
        return self.weight.shape[3]

    def output_hw(self, h: int, w: int) -> tuple:
        return (conv_output_size(h, self.kernel_h, self.stride, self.padding),
                conv_output_size(w, self.kernel_w, self.stride, self.padding))


def _windows(xp, kh, kw, stride, oh, ow):
    # (N, C, oh, ow, kh, kw) strided view, no copy
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]


def _im2col(xp, kh, kw, stride, oh, ow):
    n, c = xp.shape[:2]
    win = _windows(xp, kh, kw, stride, oh, ow)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """2-D cross-correlation (no kernel flip) with zero padding."""
    _check_rank(x, 4, "conv2d")
    n, c, h, w = x.shape
    if c != params.in_channels:
        raise DimensionError(
            f"conv2d: input channel axis (1) has {c} channels but weight in-channel axis (1) expects {params.in_channels}")
    oh, ow = params.output_hw(h, w)
    if oh < 1 or ow < 1:
        raise DimensionError(
            f"conv2d: kernel {params.kernel_h}x{params.kernel_w} does not fit spatial axes (2, 3) of size {h}x{w} "
            f"with padding {params.padding}")
    kh, kw, s, p = params.kernel_h, params.kernel_w, params.stride, params.padding
    o = params.out_channels
    weight, bias = params.weight, params.bias

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    wmat = weight.data.reshape(o, -1)
    out = _im2col(xp, kh, kw, s, oh, ow) @ wmat.T
    out = np.ascontiguousarray(out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    def backward_fn(g, needs):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = gw = gb = None
        if needs[1]:
            # columns are rebuilt instead of cached to bound peak memory
            gw = (g2.T @ _im2col(xp, kh, kw, s, oh, ow)).reshape(weight.shape)
        if needs[0]:
            dcols = (g2 @ wmat).reshape(n, oh, ow, c, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        if bias is not None and needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _finish("conv2d", out, inputs, backward_fn)


# ---------------------------------------------------------------------------
# batch normalisation


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"

    def __post_init__(self):
        c = self.gamma.shape
        if len(c) != 1 or any(t.shape != c for t in (self.beta, self.running_mean, self.running_var)):
            raise DimensionError("batchnorm parameters must all be 1-D of the same length")
        if not self.eps > 0:
            raise ValidationError("batchnorm eps must be positive")
        if not 0 < self.momentum < 1:
            raise ValidationError("batchnorm momentum must lie in (0, 1)")
        if not (self.running_var.data > 0).all():
            raise ValidationError("batchnorm running_var must be strictly positive")
        if self.mode not in ("train", "eval"):
            raise ValidationError(f"batchnorm mode must be 'train' or 'eval', got {self.mode!r}")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @classmethod
    def fresh(cls, channels: int, dtype=None, **kwargs) -> "BatchNormParams":
        def make(value, grad):
            return Tensor(np.full(channels, value, dtype=dtype or np.float32), requires_grad=grad)

        return cls(make(1.0, True), make(0.0, True), make(0.0, False), make(1.0, False), **kwargs)


def batchnorm2d(x: Tensor, params: BatchNormParams, training: Optional[bool] = None) -> Tensor:
    """Per-channel batch normalisation.

    In training mode the batch statistics normalise the input and the running
    statistics are updated in place (unbiased variance, as is conventional).
    ``training`` overrides ``params.mode`` when given.
    """
    _check_rank(x, 4, "batchnorm2d")
    n, c, h, w = x.shape
    if c != params.channels:
        raise DimensionError(f"batchnorm2d: channel axis (1) has {c} channels, parameters have {params.channels}")
    if training is None:
        training = params.mode == "train"
    gamma, beta = params.gamma, params.beta
    shape = (1, c, 1, 1)
    data = x.data
    count = n * h * w

    if training:
        mean = data.mean(axis=(0, 2, 3))
        centered = data - mean.reshape(shape)
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + params.eps)
        xhat = centered * inv_std.reshape(shape)
        m = params.momentum
        unbiased = var * (count / (count - 1)) if count > 1 else var
        rm, rv = params.running_mean, params.running_var
        rm.data = ((1 - m) * rm.data + m * mean).astype(rm.dtype)
        rv.data = ((1 - m) * rv.data + m * unbiased).astype(rv.dtype)
    else:
        inv_std = 1.0 / np.sqrt(params.running_var.data + params.eps)
        xhat = (data - params.running_mean.data.reshape(shape)) * inv_std.reshape(shape)
    inv_std = inv_std.astype(data.dtype)
    xhat = xhat.astype(data.dtype, copy=False)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward_fn(g, needs):
        gx = ggamma = gbeta = None
        if needs[1]:
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
        if needs[2]:
            gbeta = g.sum(axis=(0, 2, 3))
        if needs[0]:
            gxhat = g * gamma.data.reshape(shape)
            if training:
                s1 = gxhat.sum(axis=(0, 2, 3)).reshape(shape)
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
                gx = (inv_std.reshape(shape) / count) * (count * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv_std.reshape(shape)
        return gx, ggamma, gbeta

    return _finish("batchnorm2d", out, (x, gamma, beta), backward_fn)


# ---------------------------------------------------------------------------
# elementwise and pooling


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # NaN is kept (x <= 0 is False) so the finiteness check still fires
    out = np.where(x.data <= 0, 0, x.data).astype(x.dtype)
    return _finish("relu", out, (x,), lambda g, needs: (g * mask,))


def maxpool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Windowed max; padding cells are -inf.  Ties route the gradient to the
    first maximal cell in row-major window order."""
    _check_rank(x, 4, "maxpool2d")
    n, c, h, w = x.shape
    if kernel > h + 2 * padding or kernel > w + 2 * padding:
        raise DimensionError(f"maxpool2d: kernel {kernel} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    oh = conv_output_size(h, kernel, stride, padding)
    ow = conv_output_size(w, kernel, stride, padding)
    data = x.data
    xp = np.pad(data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf) if padding else data
    win = _windows(xp, kernel, kernel, stride, oh, ow).reshape(n, c, oh, ow, kernel * kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g, needs):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kernel):
            for j in range(kernel):
                hit = arg == i * kernel + j
                gxp[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += g * hit
        return (gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp,)

    return _finish("maxpool2d", np.ascontiguousarray(out), (x,), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    _check_rank(x, 4, "global_avg_pool")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward_fn(g, needs):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).copy(),)

    return _finish("global_avg_pool", out, (x,), backward_fn)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for x [N, F], weight [K, F], bias [K]."""
    _check_rank(x, 2, "linear")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise DimensionError(f"linear: input feature axis (1) is {x.shape[1]}, weight shape is {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward_fn(g, needs):
        gx = g @ weight.data if needs[0] else None
        gw = g.T @ x.data if needs[1] else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _finish("linear", out, inputs, backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _finish("add", a.data + b.data, (a, b), lambda g, needs: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _finish("mul", a.data * b.data, (a, b), lambda g, needs: (g * b.data, g * a.data))


def scale(x: Tensor, factor: float, offset: float = 0.0) -> Tensor:
    """``factor * x + offset`` for python scalars."""
    out = (x.data * factor + offset).astype(x.dtype)
    return _finish("scale", out, (x,), lambda g, needs: (g * factor,))


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _finish("sum", out, (x,), lambda g, needs: (np.full(x.shape, g, dtype=x.dtype),))


# ---------------------------------------------------------------------------
# loss


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a plain array (no graph)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    _check_rank(logits, 2, "softmax_cross_entropy")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,) or not np.issubdtype(labels.dtype, np.integer):
        raise ValidationError(f"labels must be {n} integer class indices, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValidationError(f"label out of range [0, {k}): {labels.tolist()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    out = np.asarray((log_norm - z[rows, labels]).mean(), dtype=logits.dtype)

    def backward_fn(g, needs):
        grad = np.exp(z - log_norm[:, None])
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return _finish("softmax_cross_entropy", out, (logits,), backward_fn)
