from __future__ import annotations

import csv
import io
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from cwcnet.cli import feature_grid, main
from cwcnet.checkpoint import load_checkpoint
from cwcnet.config import load_config
from cwcnet.datasets import MNIST_FILES, write_idx_images, write_idx_labels
from cwcnet.goodness import compute_goodness
from cwcnet.network import layer_activations

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture(scope="module")
def toy_mnist(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_mnist")
    rng = np.random.default_rng(0)
    for split, n in (("train", 40), ("test", 20)):
        labels = np.arange(n) % 10
        raw = rng.integers(0, 40, size=(n, 1, 28, 28)).astype(np.uint8)
        raw[np.arange(n), 0, 2 * labels + 4, :] = 255
        img, lab = MNIST_FILES[split]
        write_idx_images(root / img, raw)
        write_idx_labels(root / lab, labels)
    return root


def write_cfg(path: Path, data: Path, out: Path, extra: str = "") -> Path:
    path.write_text(f"""
[data]
name = mnist
path = {data}
batch_size = 16
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
extra = GA
[run]
epochs = 2
out_dir = {out}
{extra}
""")
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, toy_mnist):
    work = tmp_path_factory.mktemp("run")
    cfg = write_cfg(work / "toy.cfg", toy_mnist, work / "out", "checkpoint_every = 1")
    assert main(["train", "--config", str(cfg)]) == 0
    return cfg, work / "out"


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


class TestCountParams:
    def test_table_and_note(self, capsys):
        code, out, _ = run(["count-params", "--config", str(CONFIGS / "cfse_cifar10.cfg")], capsys)
        assert code == 0
        assert "588,130" in out and "72.81" not in out
        assert "# note: published total is 588,133; computed 588,130 (difference +3)" in out

    def test_csv(self, capsys):
        code, out, _ = run(["count-params", "--config", str(CONFIGS / "cfse_cifar10_ga.cfg"), "--csv"], capsys)
        rows = list(csv.reader(io.StringIO(out)))
        assert code == 0 and rows[0] == ["layer", "params", "mult_adds"]
        assert rows[-1][:2] == ["total", "280920"]
        assert "note" not in out

    def test_include_bias(self, capsys):
        _, out, _ = run(["count-params", "--config", str(CONFIGS / "ffcnn_cifar10.cfg"), "--include-bias"], capsys)
        assert "total mult-adds (M): 325.55" in out

    def test_missing_config_is_exit_1(self, capsys, tmp_path):
        code, _, err = run(["count-params", "--config", str(tmp_path / "missing.cfg")], capsys)
        assert code == 1 and "config error" in err

    def test_bad_key_is_exit_1(self, capsys, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("[conv]\nwidth = 2\n")
        assert run(["count-params", "--config", str(bad)], capsys)[0] == 1


class TestTrain:
    def test_outputs(self, trained):
        _, out = trained
        rows = list(csv.DictReader(open(out / "metrics.csv")))
        assert [(r["epoch"], r["layer_id"]) for r in rows] == [("1", "1"), ("1", "2"), ("2", "1"), ("2", "2")]
        assert (out / "checkpoint.bin").is_file() and (out / "checkpoint_ep001.bin").is_file()
        summary = (out / "summary.txt").read_text().strip().split(", ")
        assert summary[:2] == ["mnist", "CFSE_CwC+Sf"] and summary[3:] == ["2", "0"]
        assert 0 <= float(summary[2]) <= 100

    def test_deterministic_metrics(self, trained, tmp_path, toy_mnist):
        _, out = trained
        cfg = write_cfg(tmp_path / "again.cfg", toy_mnist, tmp_path / "out", "checkpoint_every = 1")
        assert main(["train", "--config", str(cfg)]) == 0

        def strip(p):
            return [{k: v for k, v in r.items() if k != "seconds"} for r in csv.DictReader(open(p))]

        assert strip(out / "metrics.csv") == strip(tmp_path / "out" / "metrics.csv")
        assert (out / "checkpoint.bin").read_bytes() == (tmp_path / "out" / "checkpoint.bin").read_bytes()

    def test_zero_epochs(self, tmp_path, toy_mnist, capsys):
        cfg = write_cfg(tmp_path / "z.cfg", toy_mnist, tmp_path / "out")
        code, out, _ = run(["train", "--config", str(cfg), "--epochs", "0", "--seed", "4"], capsys)
        assert code == 0 and out.strip().endswith(", 0, 4")
        net, run_cfg = load_checkpoint(tmp_path / "out" / "checkpoint.bin")
        assert run_cfg.seed == 4 and all(l.epochs_trained == 0 for l in net.layers)

    def test_negative_epochs_is_exit_1(self, tmp_path, toy_mnist, capsys):
        cfg = write_cfg(tmp_path / "n.cfg", toy_mnist, tmp_path / "out")
        assert run(["train", "--config", str(cfg), "--epochs", "-1"], capsys)[0] == 1

    def test_missing_data_is_exit_2(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "m.cfg", tmp_path / "nowhere", tmp_path / "out")
        code, _, err = run(["train", "--config", str(cfg)], capsys)
        assert code == 2 and "nowhere" in err

    def test_corrupt_data_is_exit_2(self, tmp_path, toy_mnist, capsys):
        broken = tmp_path / "broken"
        broken.mkdir()
        for name in [*MNIST_FILES["train"], *MNIST_FILES["test"]]:
            (broken / name).write_bytes((toy_mnist / name).read_bytes()[:100])
        cfg = write_cfg(tmp_path / "c.cfg", broken, tmp_path / "out")
        assert run(["train", "--config", str(cfg)], capsys)[0] == 2


class TestEval:
    def test_csv(self, trained, capsys):
        _, out = trained
        code, text, _ = run(["eval", "--checkpoint", str(out / "checkpoint.bin"), "--csv"], capsys)
        rows = list(csv.reader(io.StringIO(text)))
        assert code == 0 and rows[0] == ["predictor", "test_error_pct"]
        assert {r[0] for r in rows[1:]} == {"Softmax", "GA"}
        summary_err = float((out / "summary.txt").read_text().split(", ")[2])
        sf = float(dict(rows[1:])["Softmax"])
        assert abs(sf - summary_err) < 0.01

    def test_missing_checkpoint(self, tmp_path, capsys):
        assert run(["eval", "--checkpoint", str(tmp_path / "x.bin")], capsys)[0] == 2


class TestExportFeatures:
    def test_writes_layers_times_j(self, trained, capsys):
        _, out = trained
        code, text, _ = run(["export-features", "--checkpoint", str(out / "checkpoint.bin"), "--index", "3",
                             "--out", str(out)], capsys)
        assert code == 0
        folder = out / "features_00003"
        pgms = sorted(folder.glob("*.pgm"))
        assert len(pgms) == 2 * 10
        header = (folder / "layer2_class0.pgm").read_bytes()[:13]
        assert header == b"P5\n28 28\n255\n"  # taken before pooling
        assert "20 maps written" in text

    def test_maps_average_to_goodness(self, trained, toy_mnist):
        _, out = trained
        net, _ = load_checkpoint(out / "checkpoint.bin")
        from cwcnet.datasets import load_dataset

        _, test = load_dataset("mnist", toy_mnist)
        grid = feature_grid(net, test.images[5])
        acts, _ = layer_activations(net, test.images[5:6])
        for maps, a in zip(grid, acts):
            np.testing.assert_allclose(maps.mean(axis=(1, 2)), compute_goodness(a, 10)[0], rtol=1e-5)

    def test_index_out_of_range_is_exit_2(self, trained, capsys):
        _, out = trained
        code, _, err = run(["export-features", "--checkpoint", str(out / "checkpoint.bin"), "--index", "20"],
                           capsys)
        assert code == 2 and "out of range" in err


class TestDiscoverSchedule:
    def test_round_trip(self, tmp_path, toy_mnist, capsys):
        cfg = write_cfg(tmp_path / "d.cfg", toy_mnist, tmp_path / "out")
        code, text, _ = run(["discover-schedule", "--config", str(cfg), "--epochs", "2", "--fast",
                             "--overlap", "1"], capsys)
        assert code == 0 and "plateau_ep" in text
        found = load_config(tmp_path / "out" / "schedule.cfg", env={})
        assert found.fast_mode and found.overlap == 1 and found.max_epoch == 2
        assert all(1 <= p <= 2 for p in found.plateau_epoch)
        assert found.start_epoch[1] == max(0, found.plateau_epoch[0] - 1)


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "cwcnet", "count-params", "--config",
                           str(CONFIGS / "cfse_mnist.cfg"), "--csv"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("layer,params,mult_adds")
