"""Layer primitives for locally trained CNN layers.

Feature tensors are plain ``numpy`` arrays in ``(n, c, h, w)`` layout.  Training
runs in float32; every primitive is dtype-generic so gradient checks can run in
float64.  Only weight gradients are provided for convolutions: each layer is
trained on its own loss, so nothing ever needs a gradient w.r.t. the layer input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DivergenceError

__all__ = [
    "ConvWeights",
    "BatchNormState",
    "AdamState",
    "check_feature_tensor",
    "conv_output_size",
    "im2col",
    "conv2d_forward",
    "conv2d_backward",
    "relu",
    "relu_backward",
    "batchnorm_forward",
    "maxpool2x2",
    "adam_step",
]


def check_feature_tensor(x: np.ndarray, name: str = "input") -> np.ndarray:
    """Validate that ``x`` is a rank-4 array with all dimensions >= 1."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ConfigError(f"{name} must be rank-4 (n, c, h, w), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ConfigError(f"{name} has an empty dimension: {x.shape}")
    return x


@dataclass
class ConvWeights:
    """Kernels of shape ``(c_out, c_in_per_group, k, k)`` plus a bias per output channel."""

    kernels: np.ndarray
    bias: np.ndarray
    groups: int = 1

    def __post_init__(self):
        if self.kernels.ndim != 4 or self.kernels.shape[2] != self.kernels.shape[3]:
            raise ConfigError(f"kernels must be (c_out, c_in/groups, k, k), got {self.kernels.shape}")
        if self.groups < 1 or self.c_out % self.groups:
            raise ConfigError(f"c_out={self.c_out} is not divisible by groups={self.groups}")
        if self.bias.shape != (self.c_out,):
            raise ConfigError(f"bias shape {self.bias.shape} does not match c_out={self.c_out}")

    @property
    def c_out(self) -> int:
        return self.kernels.shape[0]

    @property
    def c_in_per_group(self) -> int:
        return self.kernels.shape[1]

    @property
    def c_in(self) -> int:
        return self.kernels.shape[1] * self.groups

    @property
    def k(self) -> int:
        return self.kernels.shape[2]


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        return cls(
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self) -> int:
        return self.running_mean.shape[0]


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr: float = 0.01, **kwargs):
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            lr=lr,
            **kwargs,
        )


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def im2col(x: np.ndarray, k: int, stride: int, padding: int, groups: int = 1):
    """Unfold ``x`` into per-group patch matrices.

    Returns ``(cols, h_out, w_out)`` where ``cols`` has shape
    ``(groups, c_in_per_group * k * k, n * h_out * w_out)``; rows are ordered
    ``(channel, u, v)`` to match a reshaped kernel.
    """
    n, c, h, w = x.shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ConfigError(f"spatial dims {(h, w)} collapse under kernel {k}, padding {padding}")
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = x
    else:
        xp = x
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    for u in range(k):
        for v in range(k):
            cols[:, u, v] = xt[:, :, u:u + hs:stride, v:v + ws:stride]
    return cols.reshape(groups, (c // groups) * k * k, n * ho * wo), ho, wo


def _check_conv_shapes(x: np.ndarray, weights: ConvWeights, stride: int, padding: int):
    check_feature_tensor(x)
    if x.shape[1] != weights.c_in:
        raise ConfigError(
            f"input shape {x.shape} has {x.shape[1]} channels but kernels {weights.kernels.shape} "
            f"with groups={weights.groups} expect {weights.c_in}"
        )
    if stride < 1 or padding < 0:
        raise ConfigError(f"invalid stride={stride} / padding={padding}")


def conv_forward_cols(cols: np.ndarray, weights: ConvWeights, n: int, ho: int, wo: int) -> np.ndarray:
    g = weights.groups
    wmat = weights.kernels.reshape(g, weights.c_out // g, -1)
    out = np.matmul(wmat, cols).reshape(weights.c_out, n, ho, wo)
    out += weights.bias[:, None, None, None]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def conv_backward_cols(cols: np.ndarray, weights: ConvWeights, grad_output: np.ndarray):
    g = weights.groups
    gy = grad_output.transpose(1, 0, 2, 3).reshape(g, weights.c_out // g, -1)
    grad_kernels = np.matmul(gy, cols.transpose(0, 2, 1)).reshape(weights.kernels.shape)
    grad_bias = grad_output.sum(axis=(0, 2, 3))
    return grad_kernels, grad_bias


def conv2d_forward(x: np.ndarray, weights: ConvWeights, stride: int = 1, padding: int = 1) -> np.ndarray:
    """Grouped 2-D cross-correlation with zero padding.

    Output channel block ``g`` only reads input channel block ``g``; with
    ``groups == 1`` this is an ordinary convolution.
    """
    _check_conv_shapes(x, weights, stride, padding)
    cols, ho, wo = im2col(x, weights.k, stride, padding, weights.groups)
    return conv_forward_cols(cols, weights, x.shape[0], ho, wo)


def conv2d_backward(x, weights: ConvWeights, grad_output, stride: int = 1, padding: int = 1):
    """Gradients of a scalar loss w.r.t. kernels and bias, given ``dL/d(output)``."""
    _check_conv_shapes(x, weights, stride, padding)
    cols, ho, wo = im2col(x, weights.k, stride, padding, weights.groups)
    expected = (x.shape[0], weights.c_out, ho, wo)
    if grad_output.shape != expected:
        raise ConfigError(f"grad_output shape {grad_output.shape} != conv output shape {expected}")
    return conv_backward_cols(cols, weights, grad_output)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_output: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    if x.shape != grad_output.shape:
        raise ConfigError(f"relu_backward shape mismatch {x.shape} vs {grad_output.shape}")
    return np.multiply(grad_output, x > 0, dtype=grad_output.dtype)


def batchnorm_forward(x: np.ndarray, state: BatchNormState, training: bool) -> np.ndarray:
    """Per-channel batch normalization over ``(n, h, w)``.

    In training mode the batch statistics are used and the running statistics
    are updated in place; otherwise the running statistics are used.
    """
    if x.shape[1] != state.channels:
        raise ConfigError(f"batchnorm expects {state.channels} channels, got input shape {x.shape}")
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        count = x.size // x.shape[1]
        unbiased = var * (count / max(count - 1, 1))
        mom = state.momentum
        state.running_mean[...] = (1 - mom) * state.running_mean + mom * mean
        state.running_var[...] = (1 - mom) * state.running_var + mom * unbiased
    else:
        mean, var = state.running_mean, state.running_var
    scale = (state.gamma / np.sqrt(var + state.eps)).astype(x.dtype)
    shift = (state.beta - mean * scale).astype(x.dtype)
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def _check_pool(x: np.ndarray):
    if x.shape[2] < 2 or x.shape[3] < 2:
        raise ConfigError(f"2x2 max-pool needs h, w >= 2, got shape {x.shape}")
    return x.shape[2] // 2, x.shape[3] // 2


def maxpool_fast(x: np.ndarray) -> np.ndarray:
    """2x2/stride-2 max-pool without argmax bookkeeping; odd trailing row/col dropped."""
    ho, wo = _check_pool(x)
    a = x[:, :, 0:2 * ho:2, 0:2 * wo:2]
    b = x[:, :, 0:2 * ho:2, 1:2 * wo:2]
    c = x[:, :, 1:2 * ho:2, 0:2 * wo:2]
    d = x[:, :, 1:2 * ho:2, 1:2 * wo:2]
    return np.maximum(np.maximum(a, b), np.maximum(c, d))


def maxpool2x2(x: np.ndarray):
    """2x2/stride-2 max-pool.

    Returns ``(output, argmax)`` where ``argmax`` holds the flat position
    (0..3, row-major) of the winner inside each window.
    """
    ho, wo = _check_pool(x)
    n, c = x.shape[:2]
    win = x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, ho, wo, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def adam_step(params: list, grads: list, state: AdamState, name: str = "parameters") -> list:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ConfigError(f"adam: {len(params)} params, {len(grads)} grads, {len(state.m)} moments")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ConfigError(f"adam: param shape {p.shape} != grad shape {g.shape} in {name}")
        # cheap reduction first; an overflowing sum falls through to the exact check
        if not np.isfinite(np.add.reduce(g, axis=None, dtype=np.float64)) and not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    step = state.lr / c1
    for p, g, m, v in zip(params, grads, state.m, state.v):
        tmp = np.multiply(g, 1 - b1, dtype=m.dtype)
        m *= b1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1 - b2
        v *= b2
        v += tmp
        np.sqrt(v, out=tmp)
        tmp *= 1.0 / np.sqrt(c2)
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= step
        p -= tmp.astype(p.dtype, copy=False)
    return params
