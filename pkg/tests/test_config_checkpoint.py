from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from cwcnet.checkpoint import load_checkpoint, manifest_path, read_arrays, save_checkpoint, write_arrays
from cwcnet.config import RunConfig, load_config, parse_config
from cwcnet.errors import ConfigError, DataFormatError
from cwcnet.network import build_network

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL = """
[conv]
channels = 10, 20
group_conv = no, yes
[pooling]
maxpool = no, yes
[ilt]
start_epoch = 0, 0
plateau_epoch = 1, 2
[predictor]
type = Softmax
extra = Goodness, GA
goodness_hidden = 8
"""


class TestConfig:
    def test_defaults(self):
        cfg = parse_config("")
        assert cfg.channels == (20, 80, 240, 480) and cfg.learning_rate == 0.01 and cfg.batch_size == 128
        assert cfg.schedule().plateau_ep == [10, 15, 19, 25]

    def test_round_trip(self):
        cfg = parse_config(SMALL)
        assert parse_config(cfg.to_text()) == cfg

    @pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.cfg")), ids=lambda p: p.stem)
    def test_shipped_configs_load(self, path):
        cfg = load_config(path, env={})
        assert parse_config(cfg.to_text()) == cfg

    def test_unknown_key_and_section(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config("[conv]\nwidth = 3\n")
        with pytest.raises(ConfigError, match="unknown section"):
            parse_config("[model]\nx = 1\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="learning_rate"):
            parse_config("[optimizer]\nlearning_rate = fast\n")

    def test_length_mismatch(self):
        with pytest.raises(ConfigError, match="maxpool"):
            parse_config("[pooling]\nmaxpool = no, yes\n")

    def test_indivisible_channels(self):
        with pytest.raises(ConfigError):
            parse_config(SMALL.replace("channels = 10, 20", "channels = 10, 25"))

    def test_env_override(self):
        cfg = parse_config(SMALL, env={"CWCNET_RUN_SEED": "7", "CWCNET_ILT_FAST_MODE": "yes",
                                       "CWCNET_ILT_START_EPOCH": "0, 0"})
        assert cfg.seed == 7 and cfg.fast_mode

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.cfg")

    def test_network_config(self):
        net_cfg = parse_config(SMALL).network_config()
        assert [l.out_channels for l in net_cfg.layers] == [10, 20]
        assert net_cfg.extra_predictors == ("Goodness", "GA")


class TestCheckpoint:
    def _net(self):
        cfg = parse_config(SMALL)
        net = build_network(cfg.network_config(), seed=3)
        rng = np.random.default_rng(0)
        for layer in net.layers:
            layer.bn.running_mean[...] = rng.standard_normal(layer.bn.running_mean.shape)
            layer.adam.t = 5
        net.layers[0].frozen = True
        net.layers[0].epochs_trained = 1
        return cfg, net

    def test_round_trip(self, tmp_path):
        cfg, net = self._net()
        path = tmp_path / "checkpoint.bin"
        save_checkpoint(path, net, cfg)
        assert manifest_path(path).is_file()
        net2, cfg2 = load_checkpoint(path)
        assert cfg2 == cfg
        for a, b in zip(net.layers, net2.layers):
            np.testing.assert_array_equal(a.weights.kernels, b.weights.kernels)
            np.testing.assert_array_equal(a.bn.running_mean, b.bn.running_mean)
            assert (a.frozen, a.epochs_trained, a.adam.t) == (b.frozen, b.epochs_trained, b.adam.t)
        np.testing.assert_array_equal(net.heads["Softmax"].weights, net2.heads["Softmax"].weights)
        for w, w2 in zip(net.heads["Goodness"].weights, net2.heads["Goodness"].weights):
            np.testing.assert_array_equal(w, w2)

    def test_truncated(self, tmp_path):
        path = tmp_path / "a.bin"
        write_arrays(path, {"x": np.arange(10, dtype=np.float32)})
        np.testing.assert_array_equal(read_arrays(path)["x"], np.arange(10))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(DataFormatError, match="truncated"):
            read_arrays(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "a.bin"
        path.write_bytes(b"NOTACKPT" + bytes(8))
        with pytest.raises(DataFormatError, match="magic"):
            read_arrays(path)

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "none.bin")

    def test_shape_mismatch(self, tmp_path):
        cfg, net = self._net()
        path = tmp_path / "c.bin"
        save_checkpoint(path, net, cfg)
        manifest = manifest_path(path)
        manifest.write_text(manifest.read_text().replace("goodness_hidden = 8", "goodness_hidden = 9"))
        with pytest.raises(DataFormatError, match="shape"):
            load_checkpoint(path)
