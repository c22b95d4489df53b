"""Layer operations on NCHW float arrays, forward and backward.

Tensors are plain numpy arrays. Everything here is dtype-preserving so the
same code runs in float32 for training and float64 for gradient checks.
"""
from dataclasses import dataclass, replace

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when tensor extents do not fit an operation."""


@dataclass(frozen=True)
class ConvParams:
    kernel: np.ndarray  # (out_ch, in_ch, 3, 3)
    bias: np.ndarray  # (out_ch,)

    def __post_init__(self):
        if self.kernel.ndim != 4 or self.kernel.shape[2:] != (3, 3):
            raise ShapeError(f"conv kernel must be (out, in, 3, 3), got {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError(f"conv bias must be ({self.kernel.shape[0]},), got {self.bias.shape}")


@dataclass(frozen=True)
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    moving_mean: np.ndarray
    moving_var: np.ndarray
    epsilon: float = 1e-3
    momentum: float = 0.99

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def _check_nchw(x, what):
    if x.ndim != 4:
        raise ShapeError(f"{what} expects an NCHW tensor, got shape {x.shape}")


# -- convolution ----------------------------------------------------------


def conv2d_forward(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """3x3 convolution, stride 1, zero 'same' padding, plus bias."""
    _check_nchw(x, "conv2d")
    n, c, h, w = x.shape
    out_ch, in_ch = params.kernel.shape[:2]
    if c != in_ch:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {in_ch}")
    cols = kernels.im2col3x3(np.ascontiguousarray(x))
    k = params.kernel.reshape(out_ch, in_ch * 9).astype(x.dtype, copy=False)
    y = cols @ k.T
    y += params.bias.astype(x.dtype, copy=False)
    return np.ascontiguousarray(y.reshape(n, h, w, out_ch).transpose(0, 3, 1, 2))


def conv2d_backward(x, params: ConvParams, grad_out):
    """Return ``(grad_input, grad_kernel, grad_bias)``."""
    _check_nchw(x, "conv2d_backward")
    n, c, h, w = x.shape
    out_ch, in_ch = params.kernel.shape[:2]
    if c != in_ch or grad_out.shape != (n, out_ch, h, w):
        raise ShapeError(
            f"conv2d_backward: input {x.shape}, kernel {params.kernel.shape}, grad {grad_out.shape}"
        )
    g = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(n * h * w, out_ch)
    cols = kernels.im2col3x3(np.ascontiguousarray(x))
    grad_kernel = (g.T @ cols).reshape(params.kernel.shape)
    grad_bias = g.sum(axis=0)
    k = params.kernel.reshape(out_ch, in_ch * 9).astype(x.dtype, copy=False)
    grad_cols = np.ascontiguousarray(g @ k)
    grad_input = kernels.col2im3x3(grad_cols, n, c, h, w)
    return grad_input, grad_kernel, grad_bias


# -- batch normalisation --------------------------------------------------


def _bn_check(x, params):
    _check_nchw(x, "batchnorm")
    if x.shape[1] != params.channels:
        raise ShapeError(f"batchnorm: input has {x.shape[1]} channels, params have {params.channels}")


def batchnorm_forward(x, params: BatchNormParams, mode: str = "infer"):
    """Normalise per channel.

    Returns ``(y, params)``. In ``"train"`` mode the batch statistics are
    used and the returned params carry the updated moving statistics;
    ``"infer"`` returns the params untouched.
    """
    _bn_check(x, params)
    dt = x.dtype
    shape = (1, -1, 1, 1)
    gamma = params.gamma.astype(dt, copy=False).reshape(shape)
    beta = params.beta.astype(dt, copy=False).reshape(shape)
    if mode == "infer":
        mean = params.moving_mean.astype(dt, copy=False).reshape(shape)
        var = params.moving_var.astype(dt, copy=False).reshape(shape)
        y = (x - mean) / np.sqrt(var + dt.type(params.epsilon)) * gamma + beta
        return y.astype(dt, copy=False), params
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    xhat = (x - mean.reshape(shape)) / np.sqrt(var.reshape(shape) + dt.type(params.epsilon))
    y = xhat * gamma + beta
    m = params.momentum
    pdt = params.moving_mean.dtype
    updated = replace(
        params,
        moving_mean=(m * params.moving_mean + (1 - m) * mean).astype(pdt),
        moving_var=(m * params.moving_var + (1 - m) * var).astype(pdt),
    )
    return y.astype(dt, copy=False), updated


def batchnorm_backward(x, params: BatchNormParams, grad_out, mode: str = "train"):
    """Return ``(grad_input, grad_gamma, grad_beta)``; statistics recomputed from ``x``."""
    _bn_check(x, params)
    dt = x.dtype
    shape = (1, -1, 1, 1)
    eps = dt.type(params.epsilon)
    gamma = params.gamma.astype(dt, copy=False).reshape(shape)
    if mode == "infer":
        mean = params.moving_mean.astype(dt, copy=False).reshape(shape)
        inv = 1 / np.sqrt(params.moving_var.astype(dt, copy=False).reshape(shape) + eps)
        xhat = (x - mean) * inv
        return grad_out * gamma * inv, (grad_out * xhat).sum(axis=(0, 2, 3)), grad_out.sum(axis=(0, 2, 3))
    m = x.shape[0] * x.shape[2] * x.shape[3]
    mean = x.mean(axis=(0, 2, 3)).reshape(shape)
    inv = 1 / np.sqrt(x.var(axis=(0, 2, 3)).reshape(shape) + eps)
    xhat = (x - mean) * inv
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    gx = grad_out * gamma
    grad_input = inv / m * (
        m * gx - gx.sum(axis=(0, 2, 3), keepdims=True) - xhat * (gx * xhat).sum(axis=(0, 2, 3), keepdims=True)
    )
    return grad_input.astype(dt, copy=False), grad_gamma, grad_beta


# -- elementwise and pooling ----------------------------------------------


def relu(x):
    return np.maximum(x, x.dtype.type(0))


def relu_backward(x, grad_out):
    return np.where(x > 0, grad_out, grad_out.dtype.type(0))


def _check_pool(x, what):
    _check_nchw(x, what)
    if x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError(f"{what}: spatial extent {x.shape[2:]} is below the 2x2 window")


def max_pool2(x):
    """2x2 window, stride 2; an odd trailing row/column is dropped."""
    _check_pool(x, "max_pool2")
    return kernels.maxpool2(np.ascontiguousarray(x))


def max_pool2_backward(x, grad_out):
    _check_pool(x, "max_pool2_backward")
    return kernels.maxpool2_backward(np.ascontiguousarray(x), np.ascontiguousarray(grad_out))


def avg_pool2(x):
    _check_pool(x, "avg_pool2")
    return kernels.avgpool2(np.ascontiguousarray(x))


def avg_pool2_backward(input_shape, grad_out):
    h, w = input_shape[2], input_shape[3]
    if h < 2 or w < 2:
        raise ShapeError(f"avg_pool2_backward: spatial extent {(h, w)} is below the 2x2 window")
    return kernels.avgpool2_backward(np.ascontiguousarray(grad_out), h, w)


# -- dense and softmax ----------------------------------------------------


def dense_forward(x, weights, bias):
    """``x`` is ``(N, F)``; ``weights`` is ``(F, units)``."""
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense: input {x.shape} does not match weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} does not match {weights.shape[1]} units")
    dt = x.dtype
    return x @ weights.astype(dt, copy=False) + bias.astype(dt, copy=False)


def dense_backward(x, weights, grad_out):
    """Return ``(grad_input, grad_weights, grad_bias)``."""
    return grad_out @ weights.astype(x.dtype, copy=False).T, x.T @ grad_out, grad_out.sum(axis=0)


def softmax(logits):
    """Softmax over the last axis with max subtraction."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs, grad_out):
    return probs * (grad_out - (grad_out * probs).sum(axis=-1, keepdims=True))


# -- dropout --------------------------------------------------------------


def dropout(x, rate: float, mode: str = "infer", rng=None):
    """Inverted dropout. Returns ``(y, mask)``; ``mask`` is None in infer mode or at rate 0."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0:
        return x, None
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    if rng is None:
        rng = np.random.default_rng()
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1 - rate)
    return x * mask, mask


def dropout_backward(mask, grad_out):
    return grad_out if mask is None else grad_out * mask
