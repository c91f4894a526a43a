"""Checkpoint container: a binary array file plus a text manifest.

Binary layout (all integers little-endian)::

    b"CWCNCKPT"  u32 version  u32 record_count
    record := u16 name_len, name (utf-8), u8 ndim, u32 dims[ndim], f32 data[prod(dims)]

The manifest (``<stem>.manifest``) holds the run configuration followed by a
``[checkpoint]`` section with per-layer epochs trained, frozen flags and Adam
step counters.
"""

from __future__ import annotations

import configparser
import struct
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_config
from .errors import DataFormatError
from .network import Network, build_network
from .predictors import GoodnessHead, SoftmaxHead

MAGIC = b"CWCNCKPT"
VERSION = 1


def write_arrays(path, arrays: dict):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(arrays)))
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            key = name.encode("utf-8")
            fh.write(struct.pack("<HB", len(key), data.ndim))
            fh.write(key)
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def read_arrays(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint (magic {buf[:8]!r})")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    out = {}
    try:
        for _ in range(count):
            name_len, ndim = struct.unpack_from("<HB", buf, pos)
            pos += 3
            name = buf[pos:pos + name_len].decode("utf-8")
            pos += name_len
            dims = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(dims, dtype=np.int64)) * 4
            if pos + size > len(buf):
                raise DataFormatError(f"{path}: truncated record {name!r}")
            out[name] = np.frombuffer(buf, "<f4", count=size // 4, offset=pos).reshape(dims).astype(np.float32)
            pos += size
    except struct.error as exc:
        raise DataFormatError(f"{path}: truncated checkpoint") from exc
    return out


def _network_arrays(net: Network) -> dict:
    arrays = {}
    for i, layer in enumerate(net.layers):
        p = f"layer{i + 1}."
        arrays[p + "kernels"] = layer.weights.kernels
        arrays[p + "bias"] = layer.weights.bias
        arrays[p + "bn.running_mean"] = layer.bn.running_mean
        arrays[p + "bn.running_var"] = layer.bn.running_var
        arrays[p + "bn.gamma"] = layer.bn.gamma
        arrays[p + "bn.beta"] = layer.bn.beta
        for k, (m, v) in enumerate(zip(layer.adam.m, layer.adam.v)):
            arrays[p + f"adam.m{k}"] = m
            arrays[p + f"adam.v{k}"] = v
    for name, head in net.heads.items():
        for p, params, adam in _head_params(name, head):
            for k, arr in enumerate(params):
                arrays[f"{p}.param{k}"] = arr
            for k, (m, v) in enumerate(zip(adam.m, adam.v)):
                arrays[f"{p}.adam.m{k}"] = m
                arrays[f"{p}.adam.v{k}"] = v
    return arrays


def _head_params(name, head):
    if isinstance(head, SoftmaxHead):
        return [(f"head.{name}", [head.weights, head.bias], head.adam)]
    if isinstance(head, GoodnessHead):
        return [(f"head.{name}.dense{k + 1}", [w, b], a)
                for k, (w, b, a) in enumerate(zip(head.weights, head.biases, head.adams))]
    return []


def save_checkpoint(path, net: Network, run_config: RunConfig):
    """Write ``<path>`` (arrays) and ``<path minus suffix>.manifest``."""
    path = Path(path)
    write_arrays(path, _network_arrays(net))
    lines = [run_config.to_text(), "[checkpoint]", f"format_version = {VERSION}",
             f"arrays = {path.name}", f"layers = {len(net.layers)}"]
    for i, layer in enumerate(net.layers):
        lines.append(f"layer{i + 1}_epochs_trained = {layer.epochs_trained}")
        lines.append(f"layer{i + 1}_frozen = {'yes' if layer.frozen else 'no'}")
        lines.append(f"layer{i + 1}_adam_t = {layer.adam.t}")
    for name, head in net.heads.items():
        for p, _, adam in _head_params(name, head):
            lines.append(f"{p}_adam_t = {adam.t}")
    manifest_path(path).write_text("\n".join(lines) + "\n")


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(".manifest")


def load_checkpoint(path):
    """Return ``(network, run_config)`` restored from a checkpoint."""
    path = Path(path)
    mpath = manifest_path(path)
    if not path.is_file() or not mpath.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path} (+ {mpath.name})")
    text = mpath.read_text()
    head, _, tail = text.partition("[checkpoint]")
    run_config = parse_config(head, source=str(mpath))
    state = configparser.ConfigParser(interpolation=None)
    state.optionxform = str
    state.read_string("[checkpoint]" + tail)
    state = state["checkpoint"]

    net = build_network(run_config.network_config(), seed=run_config.seed)
    arrays = read_arrays(path)
    expected = _network_arrays(net)
    missing = set(expected) - set(arrays)
    if missing:
        raise DataFormatError(f"{path}: missing arrays {sorted(missing)[:5]}")
    for name, dst in expected.items():
        src = arrays[name]
        if src.shape != dst.shape:
            raise DataFormatError(f"{path}: array {name} has shape {src.shape}, expected {dst.shape}")
        dst[...] = src
    for i, layer in enumerate(net.layers):
        layer.epochs_trained = state.getint(f"layer{i + 1}_epochs_trained")
        layer.frozen = state.getboolean(f"layer{i + 1}_frozen")
        layer.adam.t = state.getint(f"layer{i + 1}_adam_t")
    for name, head in net.heads.items():
        for p, _, adam in _head_params(name, head):
            adam.t = state.getint(f"{p}_adam_t")
    return net, run_config
