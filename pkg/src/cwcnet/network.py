"""CFSE network description, construction, forward orchestration and complexity counts.

A CFSE block is a standard convolution followed by a channel-wise grouped
convolution with one group per class.  Every layer is Conv -> ReLU ->
BatchNorm, with a 2x2 max-pool after the ReLU/BatchNorm of pooled layers.
Each layer's local loss is taken on its ReLU output; the BatchNorm (and pool)
output feeds the next layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError
from .schedule import ILTSchedule, default_schedule
from .tensor_nn import (
    AdamState,
    BatchNormState,
    ConvWeights,
    adam_step,
    batchnorm_forward,
    conv_forward_cols,
    conv_output_size,
    im2col,
    maxpool_fast,
    relu,
)

LOSSES = ("CwC", "PvN")
PREDICTORS = ("Softmax", "Goodness", "GA")
PREDICTOR_ABBREV = {"Softmax": "Sf", "Goodness": "Gd", "GA": "GA"}


@dataclass
class LayerSpec:
    out_channels: int
    grouped: bool = False
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    maxpool_after: bool = False
    loss: str = "CwC"
    theta: float = 2.0


@dataclass
class NetworkConfig:
    input_shape: tuple
    classes: int
    layers: list
    predictor: str = "Softmax"
    extra_predictors: tuple = ()
    ilt: ILTSchedule = field(default_factory=default_schedule)
    lr: float = 0.01
    goodness_hidden: int = 1024
    goodness_layers: int = 2
    goodness_theta: float = 2.0

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.extra_predictors = tuple(p for p in self.extra_predictors if p != self.predictor)
        for p in (self.predictor, *self.extra_predictors):
            if p not in PREDICTORS:
                raise ConfigError(f"unknown predictor {p!r}; expected one of {PREDICTORS}")

    @property
    def predictors(self) -> tuple:
        return (self.predictor, *self.extra_predictors)

    @property
    def architecture(self) -> str:
        return "CFSE" if any(l.grouped for l in self.layers) else "FF-CNN"

    @property
    def model_name(self) -> str:
        loss = self.layers[0].loss if self.layers else "CwC"
        return f"{self.architecture}_{loss}+{PREDICTOR_ABBREV[self.predictor]}"


def cfse_config(input_shape=(1, 28, 28), classes=10, loss="CwC", predictor="Softmax",
                channels=(20, 80, 240, 480), grouped=(False, True, False, True),
                maxpool=(False, True, False, True), theta=2.0, **kwargs) -> NetworkConfig:
    """Two CFSE blocks (Conv, GroupConv, Conv, GroupConv), pooling after the grouped layers."""
    layers = [
        LayerSpec(out_channels=c, grouped=g, maxpool_after=m, loss=loss, theta=theta)
        for c, g, m in zip(channels, grouped, maxpool)
    ]
    return NetworkConfig(input_shape=input_shape, classes=classes, layers=layers, predictor=predictor, **kwargs)


def ffcnn_config(input_shape=(1, 28, 28), classes=10, loss="CwC", predictor="Softmax", **kwargs) -> NetworkConfig:
    """Same four layers as the CFSE net but with no grouped convolutions."""
    return cfse_config(input_shape, classes, loss, predictor, grouped=(False,) * 4, **kwargs)


@dataclass
class LayerShape:
    in_channels: int
    in_hw: tuple
    conv_hw: tuple
    out_hw: tuple
    groups: int


def layer_shapes(config: NetworkConfig) -> list:
    """Propagate shapes through the configured layers, validating divisibility."""
    c, h, w = config.input_shape
    j = config.classes
    shapes = []
    for i, spec in enumerate(config.layers):
        if spec.loss not in LOSSES:
            raise ConfigError(f"layer {i}: unknown loss {spec.loss!r}")
        if spec.out_channels % j:
            raise ConfigError(f"layer {i}: out_channels={spec.out_channels} is not divisible by J={j}")
        groups = j if spec.grouped else 1
        if c % groups:
            raise ConfigError(f"layer {i}: grouped layer needs in_channels={c} divisible by J={j}")
        ch = conv_output_size(h, spec.kernel, spec.stride, spec.padding)
        cw = conv_output_size(w, spec.kernel, spec.stride, spec.padding)
        if ch < 1 or cw < 1:
            raise ConfigError(f"layer {i}: spatial dims {(h, w)} collapse below kernel size {spec.kernel}")
        oh, ow = ch, cw
        if spec.maxpool_after:
            if ch < 2 or cw < 2:
                raise ConfigError(f"layer {i}: cannot 2x2-pool a {ch}x{cw} map")
            oh, ow = ch // 2, cw // 2
        shapes.append(LayerShape(c, (h, w), (ch, cw), (oh, ow), groups))
        c, h, w = spec.out_channels, oh, ow
    return shapes


def flatten_dim(config: NetworkConfig) -> int:
    shapes = layer_shapes(config)
    if not shapes:
        return int(np.prod(config.input_shape))
    oh, ow = shapes[-1].out_hw
    return config.layers[-1].out_channels * oh * ow


@dataclass
class TrainedLayer:
    spec: LayerSpec
    weights: ConvWeights
    bn: BatchNormState
    adam: AdamState
    epochs_trained: int = 0
    frozen: bool = False

    def conv_relu(self, x: np.ndarray):
        """Return ``(activations, cols)``: the ReLU output and the im2col patches."""
        cols, ho, wo = im2col(x, self.spec.kernel, self.spec.stride, self.spec.padding, self.weights.groups)
        z = conv_forward_cols(cols, self.weights, x.shape[0], ho, wo)
        np.maximum(z, 0, out=z)
        return z, cols

    def emit(self, activations: np.ndarray, training: bool) -> np.ndarray:
        """BatchNorm (and pool) the ReLU output into the next layer's input."""
        out = batchnorm_forward(activations, self.bn, training=training and not self.frozen)
        if self.spec.maxpool_after:
            out = maxpool_fast(out)
        return out

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        acts, _ = self.conv_relu(x)
        return self.emit(acts, training)

    def apply_gradients(self, grad_kernels, grad_bias, name: str = "layer"):
        if self.frozen:
            raise RuntimeError(f"{name} is frozen and cannot be updated")
        adam_step([self.weights.kernels, self.weights.bias], [grad_kernels, grad_bias], self.adam, name=name)


@dataclass
class Network:
    config: NetworkConfig
    layers: list
    heads: dict = field(default_factory=dict)

    @property
    def classes(self) -> int:
        return self.config.classes

    def head(self, name: str):
        return self.heads[name]


def _he_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build_network(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> Network:
    """Initialise every layer (He-uniform on fan-in, zero bias) and the configured heads."""
    from .predictors import make_head

    shapes = layer_shapes(config)
    rng = np.random.default_rng(seed)
    layers = []
    for spec, shape in zip(config.layers, shapes):
        cin_g = shape.in_channels // shape.groups
        fan_in = cin_g * spec.kernel * spec.kernel
        kernels = _he_uniform(rng, (spec.out_channels, cin_g, spec.kernel, spec.kernel), fan_in, dtype)
        weights = ConvWeights(kernels, np.zeros(spec.out_channels, dtype), shape.groups)
        adam = AdamState.for_params([weights.kernels, weights.bias], lr=config.lr)
        layers.append(TrainedLayer(spec, weights, BatchNormState.create(spec.out_channels, dtype), adam))
    net = Network(config, layers)
    d = flatten_dim(config)
    for name in config.predictors:
        head = make_head(name, config, d, rng, dtype)
        if head is not None:
            net.heads[name] = head
    return net


def forward_to_layer(network: Network, batch: np.ndarray, layer_index: int, training: bool = False) -> np.ndarray:
    """The input that layer ``layer_index`` sees (``layer_index == len(layers)`` gives the final output).

    Predecessors run Conv -> ReLU -> BatchNorm (-> pool); with ``training`` the
    BatchNorm of non-frozen predecessors uses batch statistics.
    """
    if not 0 <= layer_index <= len(network.layers):
        raise IndexError(f"layer_index {layer_index} out of range 0..{len(network.layers)}")
    x = batch
    for layer in network.layers[:layer_index]:
        x = layer.forward(x, training)
    return x


def layer_activations(network: Network, batch: np.ndarray, upto: Optional[int] = None):
    """ReLU outputs of every layer (inference mode) plus the final block output."""
    acts = []
    x = batch
    for layer in network.layers[:upto]:
        a, _ = layer.conv_relu(x)
        acts.append(a)
        x = layer.emit(a, training=False)
    return acts, x


# ---------------------------------------------------------------------------
# complexity


@dataclass
class ComplexityRow:
    name: str
    params: int
    mult_adds: int


@dataclass
class ComplexityReport:
    rows: list
    convention: str

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_mult_adds(self) -> int:
        return sum(r.mult_adds for r in self.rows)


def complexity(config: NetworkConfig, include_bias: bool = False) -> ComplexityReport:
    """Per-layer parameter and multiply-add counts for one input sample.

    Conv params are ``(c_in/groups)*k*k*c_out + c_out``; each BatchNorm adds
    ``2*c`` (gamma, beta).  Mult-adds count one per multiply-accumulate; with
    ``include_bias`` each output element's bias add is counted too (the
    torchinfo convention).
    """
    shapes = layer_shapes(config)
    rows = []
    for i, (spec, sh) in enumerate(zip(config.layers, shapes)):
        cin_g = sh.in_channels // sh.groups
        kk = spec.kernel * spec.kernel
        conv_params = cin_g * kk * spec.out_channels + spec.out_channels
        positions = sh.conv_hw[0] * sh.conv_hw[1]
        macs = positions * spec.out_channels * cin_g * kk
        if include_bias:
            macs += positions * spec.out_channels
        kind = "GroupConv" if spec.grouped else "Conv"
        rows.append(ComplexityRow(f"L{i + 1}_{kind}", conv_params, macs))
        rows.append(ComplexityRow(f"L{i + 1}_BatchNorm", 2 * spec.out_channels, 0))
    d = flatten_dim(config)
    j = config.classes
    if config.predictor == "Softmax":
        macs = d * j + (j if include_bias else 0)
        rows.append(ComplexityRow("Softmax_FC", d * j + j, macs))
    elif config.predictor == "Goodness":
        hdim = config.goodness_hidden
        fan_in = d + j
        for k in range(config.goodness_layers):
            macs = fan_in * hdim + (hdim if include_bias else 0)
            rows.append(ComplexityRow(f"Goodness_FC{k + 1}", fan_in * hdim + hdim, macs))
            fan_in = hdim
    convention = (
        "mult-adds per single input sample; one per multiply-accumulate; "
        + ("bias adds included" if include_bias else "biases excluded")
    )
    return ComplexityReport(rows, convention)


def count_parameters(config: NetworkConfig) -> ComplexityReport:
    return complexity(config)


def count_mult_adds(config: NetworkConfig, include_bias: bool = False) -> int:
    return complexity(config, include_bias).total_mult_adds
