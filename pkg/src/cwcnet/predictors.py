"""Classification heads on top of the last CFSE block.

* Softmax: one linear layer trained with cross-entropy on the flattened block output.
* Goodness: two dense ReLU layers trained FF-style.  A one-hot label is appended
  to the features; each layer pushes its goodness (mean squared activation)
  above ``theta`` for the true label and below it for a random wrong label.
  Inference tries every label and sums the goodness of both layers.
* GA: argmax of the final layer's per-class goodness; no parameters.

Ties are always broken towards the lowest class index (``np.argmax`` order).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError
from .goodness import compute_goodness, sigmoid, softplus
from .tensor_nn import AdamState, adam_step

__all__ = [
    "Prediction",
    "SoftmaxHead",
    "GoodnessHead",
    "make_head",
    "softmax_head_loss",
    "softmax_head_train_step",
    "softmax_head_predict",
    "goodness_layer_loss",
    "goodness_head_train_step",
    "goodness_head_infer",
    "ga_predict",
]


@dataclass
class Prediction:
    classes: np.ndarray
    scores: np.ndarray


def _predict(scores: np.ndarray) -> Prediction:
    return Prediction(np.argmax(scores, axis=1), scores)


def _check_finite(x, what: str):
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"non-finite {what}")


# ---------------------------------------------------------------------------
# Softmax head


@dataclass
class SoftmaxHead:
    weights: np.ndarray
    bias: np.ndarray
    adam: AdamState

    @classmethod
    def create(cls, in_dim: int, classes: int, lr: float = 0.01, dtype=np.float32):
        w = np.zeros((in_dim, classes), dtype)
        b = np.zeros(classes, dtype)
        return cls(w, b, AdamState.for_params([w, b], lr=lr))

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weights + self.bias


def softmax_head_loss(head: SoftmaxHead, features: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy and its gradients ``(loss, grad_w, grad_b)``."""
    n = features.shape[0]
    z = head.logits(features)
    z = z - z.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -log_p[rows, targets].mean()
    d = np.exp(log_p)
    d[rows, targets] -= 1
    d /= n
    return float(loss), features.T @ d, d.sum(axis=0)


def softmax_head_train_step(head: SoftmaxHead, features: np.ndarray, targets: np.ndarray) -> float:
    _check_finite(features, "softmax head input")
    loss, gw, gb = softmax_head_loss(head, features, targets)
    _check_finite(loss, "softmax head loss")
    adam_step([head.weights, head.bias], [gw.astype(head.weights.dtype), gb.astype(head.bias.dtype)],
              head.adam, name="softmax head")
    return loss


def softmax_head_predict(head: SoftmaxHead, features: np.ndarray) -> Prediction:
    return _predict(head.logits(features))


# ---------------------------------------------------------------------------
# Goodness head


@dataclass
class GoodnessHead:
    """Dense layers ``weights[k]`` of shape ``(fan_in, hidden)``.

    Layer 0 reads ``[normalize(features), one_hot(label)]``; the label occupies
    the last ``classes`` input rows.  Features are length-normalized like every
    later layer input, so the unit-magnitude label is not swamped.
    """

    weights: list
    biases: list
    adams: list
    classes: int
    theta: float = 2.0
    rng: np.random.Generator = None

    @classmethod
    def create(cls, in_dim: int, classes: int, hidden: int = 1024, layers: int = 2, theta: float = 2.0,
               lr: float = 0.01, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        weights, biases, adams = [], [], []
        fan_in = in_dim + classes
        for _ in range(layers):
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, hidden)).astype(dtype)
            b = np.zeros(hidden, dtype)
            weights.append(w)
            biases.append(b)
            adams.append(AdamState.for_params([w, b], lr=lr))
            fan_in = hidden
        return cls(weights, biases, adams, classes, theta, np.random.default_rng(rng.integers(2**63)))

    @property
    def feature_dim(self) -> int:
        return self.weights[0].shape[0] - self.classes


def _normalize(h: np.ndarray) -> np.ndarray:
    norm = np.sqrt(np.square(h).sum(axis=1, keepdims=True))
    return h / (norm + 1e-8)


def _first_layer_pre(head: GoodnessHead, features: np.ndarray, labels: np.ndarray, shared=None):
    """Pre-activation of layer 0 for ``[features, one_hot(labels)]``."""
    w = head.weights[0]
    d = head.feature_dim
    if shared is None:
        shared = features @ w[:d]
    return shared + w[d + labels] + head.biases[0]


def goodness_layer_loss(h_pos: np.ndarray, h_neg: np.ndarray, theta: float):
    """FF layer loss on positive and negative hidden activities.

    Returns ``(loss, dL/dh_pos, dL/dh_neg)`` with goodness ``g = mean(h**2)``
    and loss ``mean over 2N of softplus(theta - g_pos) + softplus(g_neg - theta)``.
    """
    n = h_pos.shape[0]
    hdim = h_pos.shape[1]
    g_pos = np.square(h_pos).mean(axis=1, dtype=np.float64)
    g_neg = np.square(h_neg).mean(axis=1, dtype=np.float64)
    loss = (softplus(theta - g_pos).sum() + softplus(g_neg - theta).sum()) / (2 * n)
    d_pos = -sigmoid(theta - g_pos) / (2 * n)
    d_neg = sigmoid(g_neg - theta) / (2 * n)
    dh_pos = h_pos * (2.0 / hdim * d_pos)[:, None].astype(h_pos.dtype)
    dh_neg = h_neg * (2.0 / hdim * d_neg)[:, None].astype(h_neg.dtype)
    return float(loss), dh_pos, dh_neg


def goodness_head_grads(head: GoodnessHead, features: np.ndarray, pos_labels: np.ndarray,
                        neg_labels: np.ndarray):
    """Local losses and parameter gradients of every dense layer.

    Returns ``(losses, grads)`` where ``grads[k] = (grad_w, grad_b)``.  Each layer
    only sees its own loss; inputs to later layers are length-normalized and
    carry no gradient back.
    """
    d = head.feature_dim
    features = _normalize(features)
    shared = features @ head.weights[0][:d]
    z_pos = _first_layer_pre(head, features, pos_labels, shared)
    z_neg = _first_layer_pre(head, features, neg_labels, shared)
    losses, grads = [], []
    x_pos = x_neg = None
    for k, (w, b) in enumerate(zip(head.weights, head.biases)):
        if k > 0:
            z_pos = x_pos @ w + b
            z_neg = x_neg @ w + b
        h_pos = np.maximum(z_pos, 0)
        h_neg = np.maximum(z_neg, 0)
        loss, dh_pos, dh_neg = goodness_layer_loss(h_pos, h_neg, head.theta)
        dz_pos = np.where(z_pos > 0, dh_pos, 0)
        dz_neg = np.where(z_neg > 0, dh_neg, 0)
        if k == 0:
            gw = np.empty_like(w)
            gw[:d] = features.T @ (dz_pos + dz_neg)
            gw[d:] = 0
            np.add.at(gw[d:], pos_labels, dz_pos)
            np.add.at(gw[d:], neg_labels, dz_neg)
        else:
            gw = x_pos.T @ dz_pos + x_neg.T @ dz_neg
        gb = dz_pos.sum(axis=0) + dz_neg.sum(axis=0)
        losses.append(loss)
        grads.append((gw.astype(w.dtype, copy=False), gb.astype(b.dtype, copy=False)))
        x_pos, x_neg = _normalize(h_pos), _normalize(h_neg)
    return losses, grads


def sample_wrong_labels(rng: np.random.Generator, targets: np.ndarray, classes: int) -> np.ndarray:
    """One label per sample, uniform over the ``classes - 1`` wrong classes."""
    return (targets + rng.integers(1, classes, size=targets.shape[0])) % classes


def goodness_head_train_step(head: GoodnessHead, features: np.ndarray, targets: np.ndarray,
                             neg_labels=None) -> float:
    """One Adam step per dense layer; returns the summed layer losses."""
    _check_finite(features, "goodness head input")
    if neg_labels is None:
        neg_labels = sample_wrong_labels(head.rng, targets, head.classes)
    losses, grads = goodness_head_grads(head, features, targets, neg_labels)
    for k, ((gw, gb), w, b, adam) in enumerate(zip(grads, head.weights, head.biases, head.adams)):
        adam_step([w, b], [gw, gb], adam, name=f"goodness head layer {k}")
    total = float(sum(losses))
    _check_finite(total, "goodness head loss")
    return total


def goodness_head_scores(head: GoodnessHead, features: np.ndarray) -> np.ndarray:
    """Summed goodness over all dense layers for every candidate label, shape ``(N, J)``."""
    d = head.feature_dim
    shared = _normalize(features) @ head.weights[0][:d]
    scores = np.zeros((features.shape[0], head.classes), dtype=np.float64)
    for label in range(head.classes):
        labels = np.full(features.shape[0], label)
        scores[:, label] = _goodness_pass(head, _first_layer_pre(head, features, labels, shared))
    return scores


def _goodness_pass(head: GoodnessHead, z0: np.ndarray) -> np.ndarray:
    total = np.zeros(z0.shape[0], dtype=np.float64)
    z = z0
    for k in range(len(head.weights)):
        if k > 0:
            z = x @ head.weights[k] + head.biases[k]
        h = np.maximum(z, 0)
        total += np.square(h).mean(axis=1, dtype=np.float64)
        x = _normalize(h)
    return total


def goodness_head_infer(head: GoodnessHead, features: np.ndarray) -> Prediction:
    return _predict(goodness_head_scores(head, features))


# ---------------------------------------------------------------------------
# Global-averaging predictor


def ga_predict(final_activations: np.ndarray, j_classes: int) -> Prediction:
    """Predict the class whose channel subset has the largest mean squared activation."""
    return _predict(compute_goodness(final_activations, j_classes))


def make_head(name: str, config, in_dim: int, rng, dtype=np.float32):
    if name == "Softmax":
        return SoftmaxHead.create(in_dim, config.classes, lr=config.lr, dtype=dtype)
    if name == "Goodness":
        return GoodnessHead.create(in_dim, config.classes, hidden=config.goodness_hidden,
                                   layers=config.goodness_layers, theta=config.goodness_theta,
                                   lr=config.lr, rng=rng, dtype=dtype)
    return None
