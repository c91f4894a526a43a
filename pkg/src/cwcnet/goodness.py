"""Channel-wise goodness and the two layer-local losses (CwC and PvN).

A layer with ``C`` channels and ``J`` classes is read as ``J`` contiguous
blocks of ``S = C // J`` channels; block ``j`` belongs to class ``j``.  The
goodness of block ``j`` for sample ``n`` is the mean of the squared activations
over the block's channels and all spatial positions.

Class indices are 0-based throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DivergenceError

__all__ = [
    "LossOutput",
    "compute_goodness",
    "goodness_backward",
    "label_mask",
    "positive_goodness",
    "negative_goodness",
    "loss_pvn",
    "loss_cwc",
    "softplus",
    "sigmoid",
]


@dataclass
class LossOutput:
    loss: float
    grad_activations: np.ndarray
    goodness: np.ndarray


def softplus(x):
    """``log(1 + exp(x))`` without overflow."""
    return np.logaddexp(0.0, x)


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _block_size(channels: int, j_classes: int) -> int:
    if j_classes < 1 or channels % j_classes:
        raise ConfigError(f"C={channels} channels cannot be split into J={j_classes} equal class subsets")
    return channels // j_classes


def compute_goodness(activations: np.ndarray, j_classes: int) -> np.ndarray:
    """Return the ``(N, J)`` goodness matrix of a layer's activations."""
    n, c, h, w = activations.shape
    s = _block_size(c, j_classes)
    sq = np.square(activations).reshape(n, j_classes, s * h * w)
    return sq.mean(axis=2)


def goodness_backward(activations: np.ndarray, grad_goodness: np.ndarray) -> np.ndarray:
    """Chain ``dL/dG`` back to the activations: ``dG[n,j]/dY = 2Y / (S*H*W)``."""
    n, c, h, w = activations.shape
    j = grad_goodness.shape[1]
    s = _block_size(c, j)
    scale = (2.0 / (s * h * w)) * grad_goodness
    grad = activations.reshape(n, j, s * h * w) * scale[:, :, None].astype(activations.dtype)
    return grad.reshape(n, c, h, w)


def label_mask(targets: np.ndarray, j_classes: int) -> np.ndarray:
    """One-hot ``(N, J)`` mask with a 1 at each sample's target class."""
    targets = np.asarray(targets)
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= j_classes:
        raise ConfigError(f"targets must lie in [0, {j_classes}), got range [{targets.min()}, {targets.max()}]")
    mask = np.zeros((targets.shape[0], j_classes), dtype=np.int8)
    mask[np.arange(targets.shape[0]), targets] = 1
    return mask


def _check_rows(g: np.ndarray, mask: np.ndarray):
    if g.shape != mask.shape:
        raise ConfigError(f"goodness shape {g.shape} != label mask shape {mask.shape}")


def positive_goodness(g: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Goodness of each sample's target block."""
    _check_rows(g, mask)
    return np.where(mask == 1, g, 0).sum(axis=1)


def negative_goodness(g: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Summed goodness of each sample's non-target blocks."""
    _check_rows(g, mask)
    return np.where(mask == 1, 0, g).sum(axis=1)


def _check_input(activations: np.ndarray):
    if activations.ndim != 4 or activations.shape[0] < 1:
        raise ConfigError(f"activations must be a non-empty (n, c, h, w) batch, got {activations.shape}")
    if not np.all(np.isfinite(activations)):
        raise DivergenceError("non-finite activation entering the layer loss")


def loss_pvn(activations: np.ndarray, targets: np.ndarray, theta: float, j_classes: int) -> LossOutput:
    """Sigmoidal positive-vs-negative loss with threshold ``theta``.

    Pushes the target block's goodness above ``theta`` and the mean goodness
    of the other ``J - 1`` blocks below it.
    """
    if theta <= 0:
        raise ConfigError(f"theta must be positive, got {theta}")
    if j_classes < 2:
        raise ConfigError("PvN needs at least two classes")
    _check_input(activations)
    n = activations.shape[0]
    g = compute_goodness(activations, j_classes).astype(np.float64)
    mask = label_mask(targets, j_classes)
    g_pos = positive_goodness(g, mask)
    g_neg = negative_goodness(g, mask) / (j_classes - 1)
    loss = (softplus(theta - g_pos) + softplus(g_neg - theta)).sum() / (2 * n)

    d_pos = -sigmoid(theta - g_pos) / (2 * n)
    d_neg = sigmoid(g_neg - theta) / (2 * n * (j_classes - 1))
    grad_g = np.where(mask == 1, d_pos[:, None], d_neg[:, None])
    grad = goodness_backward(activations, grad_g)
    return LossOutput(float(loss), grad, g)


def loss_cwc(activations: np.ndarray, targets: np.ndarray, j_classes: int) -> LossOutput:
    """Softmax cross-entropy that treats the per-class goodness scores as logits."""
    _check_input(activations)
    n = activations.shape[0]
    g = compute_goodness(activations, j_classes).astype(np.float64)
    mask = label_mask(targets, j_classes)
    shifted = g - g.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - log_z[:, None]
    loss = -(log_p * mask).sum() / n

    grad_g = (np.exp(log_p) - mask) / n
    grad = goodness_backward(activations, grad_g)
    return LossOutput(float(loss), grad, g)
