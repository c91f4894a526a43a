"""Interleaved layer training: schedule discovery, the training loop and evaluation.

Each layer owns its loss and Adam state.  Within a mini-batch the eligible
layers are processed in index order; layer ``i + 1`` consumes the output layer
``i`` produced for that batch before layer ``i`` applied its update.  Nothing
crosses a layer boundary backwards.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .datasets import Dataset, batches, epoch_seed, eval_batches
from .errors import DivergenceError
from .goodness import LossOutput, compute_goodness, loss_cwc, loss_pvn
from .network import Network, NetworkConfig, build_network, layer_activations
from .predictors import (
    ga_predict,
    goodness_head_infer,
    goodness_head_train_step,
    softmax_head_predict,
    softmax_head_train_step,
)
from .schedule import ILTSchedule, detect_plateau, fast_start
from .tensor_nn import conv_backward_cols, relu_backward

log = logging.getLogger(__name__)

METRICS_COLUMNS = [
    "epoch", "layer_id", "train_loss", "layer_goodness_acc",
    "sf_test_err", "gd_test_err", "ga_test_err", "seconds",
]
_ERR_COLUMN = {"Softmax": "sf_test_err", "Goodness": "gd_test_err", "GA": "ga_test_err"}


@dataclass
class EpochMetrics:
    epoch: int
    active: list
    layer_loss: list
    layer_acc: list
    head_loss: dict = field(default_factory=dict)
    test_err: dict = field(default_factory=dict)
    seconds: float = 0.0

    def rows(self):
        errs = {col: self.test_err.get(p) for p, col in _ERR_COLUMN.items()}
        for i, (loss, acc) in enumerate(zip(self.layer_loss, self.layer_acc)):
            yield {
                "epoch": self.epoch,
                "layer_id": i + 1,
                "train_loss": _fmt(loss),
                "layer_goodness_acc": _fmt(acc),
                **{col: _fmt(v) for col, v in errs.items()},
                "seconds": f"{self.seconds:.3f}",
            }


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


class MetricsWriter:
    """Append-only CSV with one row per (epoch, layer)."""

    def __init__(self, path):
        self.path = Path(path)
        new = not self.path.exists() or self.path.stat().st_size == 0
        self._fh = open(self.path, "a", newline="")
        self._writer = csv.DictWriter(self._fh, fieldnames=METRICS_COLUMNS)
        if new:
            self._writer.writeheader()
            self._fh.flush()

    def write(self, metrics: EpochMetrics):
        for row in metrics.rows():
            self._writer.writerow(row)
        self._fh.flush()

    def close(self):
        self._fh.close()


def layer_loss(spec, activations: np.ndarray, targets: np.ndarray, classes: int) -> LossOutput:
    if spec.loss == "CwC":
        return loss_cwc(activations, targets, classes)
    return loss_pvn(activations, targets, spec.theta, classes)


def train_epoch(network: Network, data: Dataset, epoch: int, active, *, batch_size: int = 128,
                seed: int = 0, train_heads: bool = True, upto: Optional[int] = None):
    """One pass over ``data``.  Layers in ``active`` are updated; the others only forward.

    Returns ``(layer_loss, layer_acc, head_loss)``; per-layer entries cover
    the first ``upto`` layers (all layers when the heads are trained).
    """
    active = set(active)
    j = network.classes
    heads = network.heads if train_heads else {}
    if upto is None:
        upto = len(network.layers)
    if heads:
        upto = len(network.layers)
    loss_sum = np.zeros(upto)
    correct = np.zeros(upto)
    head_sum = {name: 0.0 for name in heads}
    seen = 0
    for xb, yb in batches(data, batch_size, seed=epoch_seed(seed, epoch)):
        n = xb.shape[0]
        x = xb
        for i in range(upto):
            layer = network.layers[i]
            acts, cols = layer.conv_relu(x)
            try:
                out = layer_loss(layer.spec, acts, yb, j)
            except DivergenceError as exc:
                raise DivergenceError(f"layer {i + 1}, epoch {epoch}: {exc}") from exc
            loss_sum[i] += out.loss * n
            correct[i] += np.count_nonzero(out.goodness.argmax(axis=1) == yb)
            grads = None
            if i in active:
                grad_z = relu_backward(acts, out.grad_activations)
                grads = conv_backward_cols(cols, layer.weights, grad_z)
            del cols
            if i + 1 < upto or heads:
                x = layer.emit(acts, training=i in active)
            if grads is not None:
                try:
                    layer.apply_gradients(*grads, name=f"layer {i + 1}")
                except DivergenceError as exc:
                    raise DivergenceError(f"epoch {epoch}: {exc}") from exc
        if heads:
            feats = x.reshape(n, -1)
            for name, head in heads.items():
                step = softmax_head_train_step if name == "Softmax" else goodness_head_train_step
                try:
                    head_sum[name] += step(head, feats, yb) * n
                except DivergenceError as exc:
                    raise DivergenceError(f"{name} head, epoch {epoch}: {exc}") from exc
        seen += n
    layer_loss_mean = list(loss_sum / seen)
    layer_acc = list(100.0 * correct / seen)
    return layer_loss_mean, layer_acc, {k: v / seen for k, v in head_sum.items()}


def predict(network: Network, predictor: str, images: np.ndarray):
    acts, final = layer_activations(network, images)
    return _predict_from(network, predictor, acts, final)


def _predict_from(network, predictor, acts, final):
    if predictor == "GA":
        return ga_predict(acts[-1], network.classes)
    feats = final.reshape(final.shape[0], -1)
    if predictor == "Softmax":
        return softmax_head_predict(network.heads["Softmax"], feats)
    if predictor == "Goodness":
        return goodness_head_infer(network.heads["Goodness"], feats)
    raise KeyError(f"unknown predictor {predictor!r}")


def evaluate_many(network: Network, predictors, data: Dataset, batch_size: int = 128) -> dict:
    """Top-1 error (%) of several predictors from a single inference pass."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty split")
    wrong = {p: 0 for p in predictors}
    for xb, yb in eval_batches(data, batch_size):
        acts, final = layer_activations(network, xb)
        for p in predictors:
            wrong[p] += np.count_nonzero(_predict_from(network, p, acts, final).classes != yb)
    return {p: 100.0 * w / len(data) for p, w in wrong.items()}


def evaluate(network: Network, predictor: str, data: Dataset, batch_size: int = 128) -> float:
    """Top-1 test error in percent, inference mode (BatchNorm running statistics)."""
    return evaluate_many(network, [predictor], data, batch_size)[predictor]


def available_predictors(network: Network) -> list:
    return [p for p in network.config.predictors if p == "GA" or p in network.heads]


def run_interleaved_training(network: Network, schedule: ILTSchedule, train: Dataset,
                             test: Optional[Dataset] = None, *, epochs: Optional[int] = None,
                             batch_size: int = 128, seed: int = 0, eval_every: int = 1,
                             callbacks=(), metrics_path=None) -> list:
    """Train every layer inside its ``[start_ep, plateau_ep]`` window.

    Runs ``epochs`` epochs (default: the largest plateau epoch).  Layers past
    their plateau are frozen; predictor heads train every epoch, including
    after the whole backbone is frozen.  ``callbacks`` are called as
    ``cb(epoch, network, metrics)`` after each epoch.
    """
    if schedule.layer_count != len(network.layers):
        raise ValueError(f"schedule has {schedule.layer_count} layers, network {len(network.layers)}")
    if epochs is None:
        epochs = max(schedule.plateau_ep, default=0)
    writer = MetricsWriter(metrics_path) if metrics_path else None
    history = []
    try:
        for epoch in range(1, epochs + 1):
            t0 = time.perf_counter()
            for i, layer in enumerate(network.layers):
                if epoch > schedule.plateau_ep[i]:
                    layer.frozen = True
            active = [i for i in schedule.active_layers(epoch) if not network.layers[i].frozen]
            losses, accs, head_loss = train_epoch(network, train, epoch, active, batch_size=batch_size,
                                                  seed=seed)
            for i in active:
                network.layers[i].epochs_trained += 1
                if epoch >= schedule.plateau_ep[i]:
                    network.layers[i].frozen = True
            test_err = {}
            if test is not None and eval_every and (epoch % eval_every == 0 or epoch == epochs):
                test_err = evaluate_many(network, available_predictors(network), test)
            metrics = EpochMetrics(epoch, active, losses, accs, head_loss, test_err,
                                   time.perf_counter() - t0)
            log.info("epoch %d active=%s loss=%s err=%s (%.1fs)", epoch, [a + 1 for a in active],
                     np.round(losses, 4).tolist(), {k: round(v, 2) for k, v in test_err.items()},
                     metrics.seconds)
            history.append(metrics)
            if writer:
                writer.write(metrics)
            for cb in callbacks:
                cb(epoch, network, metrics)
    finally:
        if writer:
            writer.close()
    return history


def discover_schedule(config: NetworkConfig, train: Dataset, *, max_epoch: int, fast_mode: bool = False,
                      overlap: int = 3, window: int = 3, min_delta: float = 1e-3, seed: int = 0,
                      batch_size: int = 128, run_epoch: Optional[Callable] = None) -> ILTSchedule:
    """Find each layer's plateau epoch (and, in fast mode, its start epoch).

    Layer ``i`` is found by restarting from a fresh initialisation and
    training layers ``0..i`` under the schedule already fixed for the
    predecessors, until layer ``i``'s loss plateaus.  The recorded plateau is
    the last epoch before the non-improving window.

    ``run_epoch(network, active, epoch, upto) -> per-layer losses`` replaces
    the real training epoch (used for synthetic loss fixtures).
    """
    layers = len(config.layers)
    start = [0] * layers
    plateau = [max_epoch] * layers

    if run_epoch is None:
        def run_epoch(net, active, epoch, upto):
            losses, _, _ = train_epoch(net, train, epoch, active, batch_size=batch_size, seed=seed,
                                       train_heads=False, upto=upto)
            return losses

    for i in range(layers):
        net = build_network(config, seed=seed)
        history = []
        found = None
        for epoch in range(1, max_epoch + 1):
            for j in range(i):
                if epoch > plateau[j]:
                    net.layers[j].frozen = True
            active = [j for j in range(i + 1) if start[j] <= epoch <= plateau[j]]
            losses = run_epoch(net, active, epoch, i + 1)
            if not np.all(np.isfinite(losses[: i + 1])):
                raise DivergenceError(f"layer {i + 1}, epoch {epoch}: non-finite loss during discovery")
            if i not in active:
                continue
            history.append(float(losses[i]))
            if detect_plateau(history, window, min_delta):
                found = max(epoch - window, start[i], 1)
                break
        if found is None:
            log.warning("layer %d: no plateau within %d epochs; using max_epoch", i + 1, max_epoch)
            found = max_epoch
        plateau[i] = found
        if fast_mode and i + 1 < layers:
            start[i + 1] = fast_start(found, overlap)
        log.info("layer %d: start=%d plateau=%d", i + 1, start[i], plateau[i])
    return ILTSchedule(start, plateau, max_epoch=max_epoch, overlap=overlap, fast_mode=fast_mode,
                       window=window, min_delta=min_delta)


def weight_digest(network: Network) -> list:
    """Per-layer hash of kernels and bias, for update traces."""
    import hashlib

    out = []
    for layer in network.layers:
        h = hashlib.sha256(layer.weights.kernels.tobytes())
        h.update(layer.weights.bias.tobytes())
        out.append(h.hexdigest())
    return out


def goodness_matrix(network: Network, images: np.ndarray, layer: int = -1) -> np.ndarray:
    acts, _ = layer_activations(network, images)
    return compute_goodness(acts[layer], network.classes)
