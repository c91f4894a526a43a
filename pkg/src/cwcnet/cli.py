"""Command-line entry point: ``cwcnet <verb> [flags]``.

Exit codes: 0 success, 1 configuration error, 2 data error (missing or
malformed files, index out of range), 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .datasets import Dataset, load_dataset
from .errors import ConfigError, DataFormatError, DivergenceError
from .goodness import compute_goodness
from .ilt import available_predictors, discover_schedule, evaluate_many, run_interleaved_training
from .network import build_network, complexity, layer_activations

log = logging.getLogger("cwcnet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 1, 2, 3

# published totals, keyed by (architecture, predictor)
PUBLISHED_PARAMS = {
    ("CFSE", "GA"): 280_920,
    ("CFSE", "Softmax"): 588_133,
    ("FF-CNN", "GA"): 1_227_000,
    ("FF-CNN", "Softmax"): 1_534_210,
}

CHECKPOINT_NAME = "checkpoint.bin"


def _run_config(args) -> RunConfig:
    if not args.config:
        raise ConfigError("--config is required")
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out_dir"] = args.out
    if getattr(args, "epochs", None) is not None:
        if args.epochs < 0:
            raise ConfigError(f"--epochs must be >= 0, got {args.epochs}")
        changes["epochs"] = args.epochs
    return cfg.replace(**changes).validate() if changes else cfg


def _data_dir(cfg: RunConfig) -> Path:
    if cfg.data_path:
        return Path(cfg.data_path)
    return Path(os.environ.get("CWCNET_DATA", "data")) / cfg.dataset


def _load_data(cfg: RunConfig):
    path = _data_dir(cfg)
    if not path.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {path}")
    return load_dataset(cfg.dataset, path, cfg.train_subset, cfg.test_subset)


def summary_line(cfg: RunConfig, model: str, error: float, epochs: int) -> str:
    return f"{cfg.dataset}, {model}, {error:.2f}, {epochs}, {cfg.seed}"


def cmd_train(args) -> int:
    cfg = _run_config(args)
    train, test = _load_data(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    if metrics_path.exists():
        metrics_path.unlink()
    net_cfg = cfg.network_config()
    net = build_network(net_cfg, seed=cfg.seed)

    callbacks = []
    if cfg.checkpoint_every:
        def periodic(epoch, network, _metrics):
            if epoch % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_ep{epoch:03d}.bin", network, cfg)
        callbacks.append(periodic)

    run_interleaved_training(net, cfg.schedule(), train, test, epochs=cfg.epochs, batch_size=cfg.batch_size,
                             seed=cfg.seed, eval_every=cfg.eval_every, callbacks=callbacks,
                             metrics_path=metrics_path)
    save_checkpoint(out / CHECKPOINT_NAME, net, cfg)
    errors = evaluate_many(net, available_predictors(net), test)
    for name, err in errors.items():
        log.info("%s test error %.2f%%", name, err)
    line = summary_line(cfg, net_cfg.model_name, errors[net_cfg.predictor], cfg.epochs)
    (out / "summary.txt").write_text(line + "\n")
    print(line)
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    net, cfg = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = cfg.replace(**{k: getattr(load_config(args.config), k)
                             for k in ("data_path", "train_subset", "test_subset")})
    _, test = _load_data(cfg)
    errors = evaluate_many(net, available_predictors(net), test)
    if args.csv:
        w = csv.writer(sys.stdout)
        w.writerow(["predictor", "test_error_pct"])
        for name, err in errors.items():
            w.writerow([name, f"{err:.4f}"])
    else:
        for name, err in errors.items():
            print(f"{name}: {err:.2f}% test error")
    return EXIT_OK


def cmd_count_params(args) -> int:
    cfg = _run_config(args)
    net_cfg = cfg.network_config()
    report = complexity(net_cfg, include_bias=args.include_bias)
    if args.csv:
        w = csv.writer(sys.stdout)
        w.writerow(["layer", "params", "mult_adds"])
        for row in report.rows:
            w.writerow([row.name, row.params, row.mult_adds])
        w.writerow(["total", report.total_params, report.total_mult_adds])
    else:
        print(f"{net_cfg.model_name}  input {net_cfg.input_shape}")
        print(f"{'layer':<16}{'params':>12}{'mult-adds':>16}")
        for row in report.rows:
            print(f"{row.name:<16}{row.params:>12,}{row.mult_adds:>16,}")
        print(f"{'total':<16}{report.total_params:>12,}{report.total_mult_adds:>16,}")
        print(f"total mult-adds (M): {report.total_mult_adds / 1e6:.2f}  [{report.convention}]")
    published = PUBLISHED_PARAMS.get((net_cfg.architecture, net_cfg.predictor))
    if published is not None and published != report.total_params and cfg.channels == (20, 80, 240, 480):
        print(f"# note: published total is {published:,}; computed {report.total_params:,} "
              f"(difference {published - report.total_params:+,})")
    return EXIT_OK


def _write_pgm(path: Path, image: np.ndarray):
    """Binary PGM (P5), 8-bit, min-max scaled; a constant map is written as zeros."""
    lo, hi = float(image.min()), float(image.max())
    scaled = np.zeros(image.shape, np.uint8) if hi <= lo else \
        np.round((image - lo) / (hi - lo) * 255.0).astype(np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(scaled.tobytes())


def feature_grid(net, image: np.ndarray) -> list:
    """Per-layer ``(J, H, W)`` maps: the class subset's mean squared ReLU activation at each pixel."""
    acts, _ = layer_activations(net, image[None])
    j = net.classes
    grid = []
    for a in acts:
        c, h, w = a.shape[1:]
        sq = np.square(a[0].astype(np.float64)).reshape(j, c // j, h, w)
        grid.append(sq.mean(axis=1))
    return grid


def cmd_export_features(args) -> int:
    if not args.checkpoint:
        raise ConfigError("export-features needs --checkpoint")
    net, cfg = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = cfg.replace(data_path=load_config(args.config).data_path)
    _, test = _load_data(cfg.replace(test_subset=0))
    if not 0 <= args.index < len(test):
        raise IndexError(f"--index {args.index} out of range for {len(test)} test samples")
    out = Path(args.out or cfg.out_dir) / f"features_{args.index:05d}"
    out.mkdir(parents=True, exist_ok=True)
    grid = feature_grid(net, test.images[args.index])
    label = int(test.labels[args.index])
    lines = [f"# sample {args.index} label {label}",
             "# layer class file subset_mean"]
    for li, maps in enumerate(grid):
        for cls, m in enumerate(maps):
            name = f"layer{li + 1}_class{cls}.pgm"
            _write_pgm(out / name, m)
            lines.append(f"{li + 1} {cls} {name} {m.mean():.9g}")
    (out / "index.txt").write_text("\n".join(lines) + "\n")
    last = grid[-1].mean(axis=(1, 2))
    print(f"sample {args.index}: label {label}, last-layer argmax class {int(np.argmax(last))}; "
          f"{len(grid) * net.classes} maps written to {out}")
    return EXIT_OK


def cmd_discover_schedule(args) -> int:
    cfg = _run_config(args)
    if args.fast:
        cfg = cfg.replace(fast_mode=True)
    if args.overlap is not None:
        cfg = cfg.replace(overlap=args.overlap)
    train, _ = _load_data(cfg)
    max_epoch = cfg.max_epoch or cfg.epochs
    sched = discover_schedule(cfg.network_config(), train, max_epoch=max_epoch, fast_mode=cfg.fast_mode,
                              overlap=cfg.overlap, window=cfg.plateau_window, min_delta=cfg.plateau_min_delta,
                              seed=cfg.seed, batch_size=cfg.batch_size)
    found = cfg.replace(start_epoch=tuple(sched.start_ep), plateau_epoch=tuple(sched.plateau_ep),
                        max_epoch=max_epoch)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "schedule.cfg"
    path.write_text(found.to_text())
    print(f"start_ep = {list(sched.start_ep)}")
    print(f"plateau_ep = {list(sched.plateau_ep)}")
    print(f"schedule written to {path}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "count-params": cmd_count_params,
    "export-features": cmd_export_features,
    "discover-schedule": cmd_discover_schedule,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("--out", help="output directory (overrides [run] out_dir)")
    common.add_argument("--csv", action="store_true", help="machine-readable CSV on stdout")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="cwcnet", description="Channel-wise competitive layer-local CNN training.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", parents=[common], help="train a network with interleaved layer training")
    p.add_argument("--epochs", type=int, help="override [run] epochs")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("count-params", parents=[common], help="per-layer parameters and mult-adds")
    p.add_argument("--include-bias", action="store_true", help="count bias additions as mult-adds")
    p = sub.add_parser("export-features", parents=[common], help="write per-class feature maps as PGM files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, required=True, help="test-split sample index")
    p = sub.add_parser("discover-schedule", parents=[common], help="find per-layer start and plateau epochs")
    p.add_argument("--epochs", type=int, help="search budget per layer (defaults to [run] epochs)")
    p.add_argument("--fast", action="store_true", help="fast mode: overlap consecutive layers")
    p.add_argument("--overlap", type=int, help="fast-mode overlap N")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, DataFormatError, IndexError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
