"""Versioned checkpoint container.

A checkpoint is a zip archive holding ``meta.json`` plus one raw blob per
named array. Parameter payloads are little-endian float64 regardless of the
compute dtype (float32 widens losslessly and narrows back bit-exactly), so
restores are exact. Loading looks blobs up by name, ignoring unknown extras,
which keeps old checkpoints readable as the model grows.
"""

from __future__ import annotations

import json
import os
import zipfile
from pathlib import Path

import numpy as np

from .errors import ArtifactMismatchError
from .optim import AdamW
from .tensor import Parameter

FORMAT_VERSION = 1


def save_checkpoint(path, params: list[Parameter], optimizer: AdamW | None,
                    run_config: dict, counters: dict, rng_state: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "run_config": run_config,
        "counters": counters,
        "rng_state": rng_state,
        "params": {p.name: list(p.shape) for p in params},
        "optimizer": None,
    }
    blobs: dict[str, np.ndarray] = {f"params/{p.name}": p.data for p in params}
    if optimizer is not None:
        meta["optimizer"] = {**optimizer.hyperparams(), "step_count": optimizer.step_count}
        for name, arr in optimizer.state_arrays().items():
            blobs[f"opt/{name}"] = arr
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_DEFLATED, compresslevel=1) as zf:
        zf.writestr("meta.json", json.dumps(meta, indent=1))
        for name, arr in blobs.items():
            zf.writestr(name + ".bin", np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


class Checkpoint:
    def __init__(self, meta: dict, blobs: dict[str, np.ndarray]):
        self.meta = meta
        self.blobs = blobs

    @property
    def run_config(self) -> dict:
        return self.meta["run_config"]

    @property
    def counters(self) -> dict:
        return self.meta["counters"]

    def param_array(self, name: str) -> np.ndarray:
        return self.blobs[f"params/{name}"]

    def restore_params(self, params: list[Parameter]):
        """Copy stored arrays into matching parameters by name."""
        missing = [p.name for p in params if f"params/{p.name}" not in self.blobs]
        if missing:
            raise ArtifactMismatchError(f"checkpoint lacks parameters: {missing[:5]}")
        for p in params:
            arr = self.blobs[f"params/{p.name}"]
            if tuple(arr.shape) != tuple(p.shape):
                raise ArtifactMismatchError(
                    f"shape mismatch for {p.name}: stored {arr.shape}, model {p.shape}"
                )
            p.data[...] = arr.astype(p.data.dtype)

    def restore_optimizer(self, optimizer: AdamW):
        arrays = {}
        for p in optimizer.params:
            for suffix in (".m", ".v"):
                key = f"opt/{p.name}{suffix}"
                if key not in self.blobs:
                    raise ArtifactMismatchError(f"checkpoint lacks optimizer state {key}")
                arrays[f"{p.name}{suffix}"] = self.blobs[key]
        optimizer.load_state_arrays(arrays, self.meta["optimizer"]["step_count"])


def load_checkpoint(path) -> Checkpoint:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format_version") != FORMAT_VERSION:
            raise ArtifactMismatchError(
                f"unsupported checkpoint format {meta.get('format_version')}"
            )
        shapes = {**meta.get("params", {})}
        blobs: dict[str, np.ndarray] = {}
        for info in zf.infolist():
            if not info.filename.endswith(".bin"):
                continue
            name = info.filename[:-4]
            raw = np.frombuffer(zf.read(info), dtype="<f8")
            if name.startswith("params/"):
                shape = shapes.get(name[len("params/"):])
                blobs[name] = raw.reshape(shape) if shape else raw
            else:
                pname = name[len("opt/"):-2]
                shape = shapes.get(pname)
                blobs[name] = raw.reshape(shape) if shape else raw
    return Checkpoint(meta, blobs)
