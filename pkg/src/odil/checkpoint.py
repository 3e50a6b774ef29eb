"""Versioned JSON checkpoint container.

Arrays are stored as base64 of their little-endian bytes together with shape
and dtype, so ``load(save(x))`` reproduces every tensor bit for bit. Output is
deterministic (sorted keys, no timestamps).
"""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from .adaptation import DomainStatsRegistry
from .batchnorm import BNSnapshot
from .errors import DataError
from .nn import Model, ModelConfig

FORMAT = "odil-checkpoint"
VERSION = 1


def encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a)
    le = a.astype(a.dtype.newbyteorder("<"), copy=False)
    return {
        "dtype": le.dtype.str,
        "shape": list(a.shape),
        "data": base64.b64encode(np.ascontiguousarray(le).tobytes()).decode("ascii"),
    }


def decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    a = np.frombuffer(raw, dtype=np.dtype(d["dtype"])).reshape(d["shape"])
    return a.astype(a.dtype.newbyteorder("="))


def _snapshot_to_dict(task_id, snap: BNSnapshot) -> dict:
    return {
        "task_id": task_id,
        "signature": list(snap.signature),
        "metadata": snap.metadata,
        "stats": [{"running_mean": encode_array(m), "running_var": encode_array(v)} for m, v in snap.stats],
    }


def _snapshot_from_dict(d: dict) -> BNSnapshot:
    stats = tuple((decode_array(s["running_mean"]), decode_array(s["running_var"])) for s in d["stats"])
    snap = BNSnapshot(stats, d["task_id"], d.get("metadata", {}))
    if list(snap.signature) != d["signature"]:
        raise DataError(f"snapshot for task {d['task_id']} has inconsistent signature")
    return snap


def checkpoint_dict(model: Model, registry: DomainStatsRegistry | None = None, seed=None, **extra) -> dict:
    bn = [
        {
            "running_mean": encode_array(s.running_mean),
            "running_var": encode_array(s.running_var),
            "eps": s.eps,
            "momentum": s.momentum,
        }
        for s in model.bn_states()
    ]
    return {
        "format": FORMAT,
        "version": VERSION,
        "seed": model.seed if seed is None else seed,
        "dtype": model.dtype.name,
        "config": model.config.to_dict(),
        "parameters": {name: encode_array(p) for name, p in model.parameters().items()},
        "bn_states": bn,
        "registry": [_snapshot_to_dict(t, s) for t, s in registry.items()] if registry is not None else None,
        "extra": extra,
    }


def dumps(model, registry=None, seed=None, **extra) -> str:
    return json.dumps(checkpoint_dict(model, registry, seed, **extra), sort_keys=True, indent=1)


def save_checkpoint(path, model, registry=None, seed=None, **extra) -> Path:
    path = Path(path)
    path.write_text(dumps(model, registry, seed, **extra))
    return path


def from_dict(d: dict) -> tuple[Model, DomainStatsRegistry | None, dict]:
    if d.get("format") != FORMAT:
        raise DataError("not an odil checkpoint")
    if d.get("version") != VERSION:
        raise DataError(f"unsupported checkpoint version {d.get('version')}")
    model = Model(ModelConfig.from_dict(d["config"]), seed=d["seed"], dtype=d["dtype"])
    params = model.parameters()
    if set(params) != set(d["parameters"]):
        raise DataError("checkpoint parameters do not match its model config")
    for name, enc in d["parameters"].items():
        value = decode_array(enc)
        if value.shape != params[name].shape:
            raise DataError(f"parameter {name}: shape {value.shape} != {params[name].shape}")
        model.set_parameter(name, value.copy())
    states = model.bn_states()
    if len(states) != len(d["bn_states"]):
        raise DataError("checkpoint BN layer count does not match its model config")
    for state, enc in zip(states, d["bn_states"]):
        state.running_mean = decode_array(enc["running_mean"]).copy()
        state.running_var = decode_array(enc["running_var"]).copy()
        state.eps = enc["eps"]
        state.momentum = enc["momentum"]
    registry = None
    if d.get("registry") is not None:
        registry = DomainStatsRegistry()
        for entry in d["registry"]:
            registry.add(entry["task_id"], _snapshot_from_dict(entry))
    return model, registry, d.get("extra", {})


def loads(text: str):
    return from_dict(json.loads(text))


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    return loads(path.read_text())


def state_arrays(model: Model) -> dict[str, np.ndarray]:
    """Every tensor in the model, including BN running statistics, keyed by name."""
    out = dict(model.parameters())
    bn_layers = [layer for layer in model.layers if hasattr(layer, "state")]
    for layer in bn_layers:
        out[f"{layer.name}.running_mean"] = layer.state.running_mean
        out[f"{layer.name}.running_var"] = layer.state.running_var
        out[f"{layer.name}.momentum"] = np.array(layer.state.momentum)
        out[f"{layer.name}.eps"] = np.array(layer.state.eps)
    return out


def diff_models(a: Model, b: Model) -> list[str]:
    """Names of tensors whose bytes differ between two models."""
    sa, sb = state_arrays(a), state_arrays(b)
    if set(sa) != set(sb):
        raise DataError("models have different tensor layouts")
    return sorted(n for n in sa if sa[n].dtype != sb[n].dtype or sa[n].tobytes() != sb[n].tobytes())
