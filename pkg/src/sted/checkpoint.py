"""Checkpoints: one raw little-endian float32 blob plus a JSON manifest.

Tensor names are the module state-dict keys, prefixed ``dispnet.`` or
``dblrnet.``, e.g. ``dblrnet.stages.0.rdb_b.convs.1.weight``. Names are
stable for a given model config.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .data import config_hash
from .model import ModelConfig, StEDNet

BLOB = "params.f32"
MANIFEST = "manifest.json"


class CheckpointError(ValueError):
    pass


def save_tensors(tensors: dict, directory, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    offset = 0
    with open(directory / BLOB, "wb") as fh:
        for name, t in tensors.items():
            arr = t.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False)
            fh.write(np.ascontiguousarray(arr).tobytes())
            entries[name] = {"shape": list(arr.shape), "dtype": "float32", "offset": offset}
            offset += arr.size
    manifest = {"tensors": entries, "total": offset, **(extra or {})}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return directory


def load_tensors(directory) -> tuple[dict, dict]:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{directory}: unreadable manifest ({exc})") from exc
    blob = np.fromfile(directory / BLOB, "<f4")
    if blob.size != manifest.get("total"):
        raise CheckpointError(f"{directory}: blob has {blob.size} values, manifest says {manifest.get('total')}")
    tensors = {}
    for name, e in manifest["tensors"].items():
        n = int(np.prod(e["shape"]))
        arr = blob[e["offset"]: e["offset"] + n].reshape(e["shape"])
        tensors[name] = torch.from_numpy(arr.copy())
    return tensors, manifest


def save_model(model: StEDNet, directory, extra: dict | None = None) -> Path:
    cfg = model.cfg.to_dict()
    info = {"model_config": cfg, "config_hash": config_hash(cfg), **(extra or {})}
    return save_tensors(model.state_dict(), directory, info)


def load_model(directory) -> tuple[StEDNet, dict]:
    tensors, manifest = load_tensors(directory)
    cfg = ModelConfig.from_dict(manifest["model_config"])
    if config_hash(cfg.to_dict()) != manifest.get("config_hash"):
        raise CheckpointError(f"{directory}: config hash mismatch")
    model = StEDNet(cfg)
    own = model.state_dict()
    if set(own) != set(tensors):
        missing = sorted(set(own) ^ set(tensors))
        raise CheckpointError(f"{directory}: tensor names differ from model layout: {missing[:4]}")
    for k, v in tensors.items():
        if tuple(own[k].shape) != tuple(v.shape):
            raise CheckpointError(f"{directory}: {k} has shape {tuple(v.shape)}, expected {tuple(own[k].shape)}")
    model.load_state_dict(tensors)
    return model, manifest
