"""Plain-text run configuration.

INI-style ``key = value`` lines grouped in sections that mirror a model
configuration table (conv, pooling, loss, optimizer, ILT, predictor).  Unknown
sections or keys are rejected.  Any key can be overridden from the
environment as ``CWCNET_<SECTION>_<KEY>`` (upper case).
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

from .datasets import DATASETS
from .errors import ConfigError
from .network import LayerSpec, NetworkConfig, layer_shapes
from .schedule import ILTSchedule

ENV_PREFIX = "CWCNET_"


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("yes", "true", "1", "on"):
        return True
    if t in ("no", "false", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(conv):
    def parse(text: str):
        items = [t.strip() for t in text.split(",") if t.strip()]
        return tuple(conv(t) for t in items)
    return parse


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


# section -> key -> (RunConfig field, parser)
SCHEMA = {
    "data": {
        "name": ("dataset", str),
        "path": ("data_path", str),
        "train_subset": ("train_subset", int),
        "test_subset": ("test_subset", int),
        "batch_size": ("batch_size", int),
    },
    "conv": {
        "channels": ("channels", _list(int)),
        "kernel_size": ("kernel_size", int),
        "stride": ("stride", int),
        "padding": ("padding", int),
        "group_conv": ("group_conv", _list(_bool)),
    },
    "pooling": {
        "maxpool": ("maxpool", _list(_bool)),
    },
    "loss": {
        "type": ("loss", str),
        "threshold": ("threshold", float),
    },
    "optimizer": {
        "method": ("optimizer", str),
        "learning_rate": ("learning_rate", float),
    },
    "ilt": {
        "start_epoch": ("start_epoch", _list(int)),
        "plateau_epoch": ("plateau_epoch", _list(int)),
        "max_epoch": ("max_epoch", int),
        "fast_mode": ("fast_mode", _bool),
        "overlap": ("overlap", int),
        "plateau_window": ("plateau_window", int),
        "plateau_min_delta": ("plateau_min_delta", float),
    },
    "predictor": {
        "type": ("predictor", str),
        "extra": ("extra_predictors", _list(str)),
        "goodness_hidden": ("goodness_hidden", int),
        "goodness_layers": ("goodness_layers", int),
        "goodness_threshold": ("goodness_threshold", float),
    },
    "run": {
        "seed": ("seed", int),
        "epochs": ("epochs", int),
        "out_dir": ("out_dir", str),
        "eval_every": ("eval_every", int),
        "checkpoint_every": ("checkpoint_every", int),
    },
}


@dataclass
class RunConfig:
    dataset: str = "mnist"
    data_path: str = ""
    train_subset: int = 0
    test_subset: int = 0
    batch_size: int = 128
    channels: tuple = (20, 80, 240, 480)
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1
    group_conv: tuple = (False, True, False, True)
    maxpool: tuple = (False, True, False, True)
    loss: str = "CwC"
    threshold: float = 2.0
    optimizer: str = "Adam"
    learning_rate: float = 0.01
    start_epoch: tuple = (0, 0, 0, 0)
    plateau_epoch: tuple = (10, 15, 19, 25)
    max_epoch: int = 0
    fast_mode: bool = False
    overlap: int = 3
    plateau_window: int = 3
    plateau_min_delta: float = 1e-3
    predictor: str = "Softmax"
    extra_predictors: tuple = ()
    goodness_hidden: int = 1024
    goodness_layers: int = 2
    goodness_threshold: float = 2.0
    seed: int = 0
    epochs: int = 20
    out_dir: str = "runs"
    eval_every: int = 1
    checkpoint_every: int = 0

    def validate(self):
        n = len(self.channels)
        for name in ("group_conv", "maxpool", "start_epoch", "plateau_epoch"):
            if len(getattr(self, name)) != n:
                raise ConfigError(f"{name} has {len(getattr(self, name))} entries but channels has {n}")
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r}; expected one of {sorted(DATASETS)}")
        if self.optimizer != "Adam":
            raise ConfigError(f"only the Adam optimizer is supported, got {self.optimizer!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        layer_shapes(self.network_config())
        return self

    @property
    def input_shape(self) -> tuple:
        return DATASETS[self.dataset]

    def schedule(self) -> ILTSchedule:
        return ILTSchedule(
            start_ep=list(self.start_epoch),
            plateau_ep=list(self.plateau_epoch),
            max_epoch=self.max_epoch or max(max(self.plateau_epoch, default=0), self.epochs),
            overlap=self.overlap,
            fast_mode=self.fast_mode,
            window=self.plateau_window,
            min_delta=self.plateau_min_delta,
        )

    def network_config(self) -> NetworkConfig:
        layers = [
            LayerSpec(out_channels=c, grouped=g, kernel=self.kernel_size, stride=self.stride,
                      padding=self.padding, maxpool_after=m, loss=self.loss, theta=self.threshold)
            for c, g, m in zip(self.channels, self.group_conv, self.maxpool)
        ]
        return NetworkConfig(
            input_shape=self.input_shape,
            classes=10,
            layers=layers,
            predictor=self.predictor,
            extra_predictors=self.extra_predictors,
            ilt=self.schedule(),
            lr=self.learning_rate,
            goodness_hidden=self.goodness_hidden,
            goodness_layers=self.goodness_layers,
            goodness_theta=self.goodness_threshold,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for key, (attr, _) in keys.items():
                lines.append(f"{key} = {_fmt(getattr(self, attr))}")
            lines.append("")
        return "\n".join(lines)


def parse_config(text: str, env=None, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    values = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            values[(section, key)] = raw
    for (section, keys) in SCHEMA.items():
        for key in keys:
            name = f"{ENV_PREFIX}{section}_{key}".upper()
            if env and name in env:
                values[(section, key)] = env[name]
    kwargs = {}
    for (section, key), raw in values.items():
        attr, conv = SCHEMA[section][key]
        try:
            kwargs[attr] = conv(raw)
        except ValueError as exc:
            raise ConfigError(f"{source}: [{section}] {key} = {raw!r}: {exc}") from exc
    return RunConfig(**kwargs).validate()


def load_config(path, env=None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), env=os.environ if env is None else env, source=str(path))
