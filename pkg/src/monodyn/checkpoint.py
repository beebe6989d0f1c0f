"""Versioned network checkpoints.

A checkpoint file is the magic line ``MONODYN-CKPT v<version>\\n`` followed by a
numpy ``.npz`` archive. The archive holds a JSON ``meta`` record (layer sizes,
activation kinds, constraint mode, training step) and one array per parameter
and BN running statistic.
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np

from .network import ACTIVATION_CODES, DenseLayer, LyapunovNet, MonotoneNet

MAGIC = b"MONODYN-CKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _net_arrays(net: MonotoneNet, prefix: str) -> tuple[dict, dict]:
    arrays, layers = {}, []
    for li, layer in enumerate(net.layers):
        arrays[f"{prefix}{li}.W"] = layer.W
        arrays[f"{prefix}{li}.b"] = layer.b
        if layer.batch_norm:
            for name in ("gamma", "beta", "running_mean", "running_var"):
                arrays[f"{prefix}{li}.{name}"] = getattr(layer, name)
        layers.append({
            "n_in": layer.n_in,
            "n_out": layer.n_out,
            "kinds": [int(k) for k in layer.kinds],
            "batch_norm": layer.batch_norm,
        })
    for name in ("in_shift", "in_scale", "out_shift", "out_scale"):
        arrays[f"{prefix}{name}"] = getattr(net, name)
    meta = {
        "layer_sizes": net.layer_sizes,
        "min_fraction": net.min_fraction,
        "constraint_mode": net.constraint_mode,
        "linear_output": net.linear_output,
        "layers": layers,
    }
    return meta, arrays


def _restore_net(meta: dict, arrays, prefix: str) -> MonotoneNet:
    net = MonotoneNet(meta["layer_sizes"], min_fraction=meta["min_fraction"],
                      constraint_mode=meta["constraint_mode"], batch_norm=False,
                      linear_output=meta["linear_output"], rng=0)
    net.layers = []
    for li, info in enumerate(meta["layers"]):
        layer = DenseLayer(info["n_in"], info["n_out"], np.array(info["kinds"]),
                           batch_norm=info["batch_norm"])
        layer.W[...] = arrays[f"{prefix}{li}.W"]
        layer.b[...] = arrays[f"{prefix}{li}.b"]
        if layer.batch_norm:
            for name in ("gamma", "beta", "running_mean", "running_var"):
                getattr(layer, name)[...] = arrays[f"{prefix}{li}.{name}"]
        net.layers.append(layer)
    for name in ("in_shift", "in_scale", "out_shift", "out_scale"):
        setattr(net, name, arrays[f"{prefix}{name}"].copy())
    return net


def save_checkpoint(path, net, step: int = 0, extra: dict | None = None,
                    overwrite: bool = True) -> None:
    """Write a :class:`MonotoneNet` or :class:`LyapunovNet` with its training step."""
    path = Path(path)
    if path.exists() and not overwrite:
        raise FileExistsError(f"{path} exists; pass overwrite=True to replace it")
    if isinstance(net, LyapunovNet):
        meta, arrays = _net_arrays(net.trunk, "trunk.")
        meta = {"kind": "lyapunov", "trunk": meta, "n_heads": net.n_heads}
        arrays["head.W"] = net.W
        arrays["head.z"] = net.z
    elif isinstance(net, MonotoneNet):
        meta, arrays = _net_arrays(net, "")
        meta = {"kind": "monotone", "net": meta}
    else:
        raise TypeError(f"cannot checkpoint {type(net).__name__}")
    meta["step"] = int(step)
    meta["activation_codes"] = ACTIVATION_CODES
    meta["extra"] = extra or {}
    buf = io.BytesIO()
    np.savez(buf, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    with open(path, "wb") as fh:
        fh.write(MAGIC + f" v{VERSION}\n".encode())
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Return ``(net, step, extra)``."""
    raw = Path(path).read_bytes()
    head, sep, body = raw.partition(b"\n")
    if not sep or not head.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a monodyn checkpoint (bad magic header)")
    try:
        version = int(head[len(MAGIC):].strip().lstrip(b"v"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable version in header {head!r}") from exc
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    with np.load(io.BytesIO(body)) as data:
        meta = json.loads(str(data["meta"]))
        arrays = {k: data[k] for k in data.files if k != "meta"}
    if meta["kind"] == "monotone":
        net = _restore_net(meta["net"], arrays, "")
    elif meta["kind"] == "lyapunov":
        trunk = _restore_net(meta["trunk"], arrays, "trunk.")
        net = LyapunovNet.__new__(LyapunovNet)
        net.trunk = trunk
        net.n_heads = int(meta["n_heads"])
        net.W = arrays["head.W"].copy()
        net.z = arrays["head.z"].copy()
        net._cache = None
    else:
        raise CheckpointError(f"{path}: unknown network kind {meta['kind']!r}")
    return net, int(meta["step"]), meta.get("extra", {})
