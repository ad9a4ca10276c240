"""Versioned checkpoint archive.

A checkpoint is a zip file holding ``manifest.json`` (format version, model
config, metadata, and for every array its entry name, shape and dtype) plus
one raw little-endian ``.bin`` entry per array.
"""

from __future__ import annotations

import json
import os
import zipfile

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, truncated, or incompatible checkpoint."""


def save_checkpoint(path: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``arrays`` and JSON-serialisable ``meta`` atomically to ``path``."""
    path = os.fspath(path)
    entries = {}
    for i, (name, arr) in enumerate(arrays.items()):
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<")
        entries[name] = {"file": f"arrays/{i}.bin", "shape": list(arr.shape), "dtype": le.str}
    manifest = {"version": FORMAT_VERSION, "meta": meta or {}, "arrays": entries}
    tmp = path + ".tmp"
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
        for name, arr in arrays.items():
            info = entries[name]
            zf.writestr(info["file"], np.ascontiguousarray(arr, dtype=np.dtype(info["dtype"])).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(arrays, meta)``; raises ``CheckpointError`` on any inconsistency."""
    path = os.fspath(path)
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            version = manifest.get("version")
            if version != FORMAT_VERSION:
                raise CheckpointError(f"{path}: unsupported checkpoint version {version!r}")
            arrays = {}
            for name, info in manifest["arrays"].items():
                dtype = np.dtype(info["dtype"])
                raw = zf.read(info["file"])
                shape = tuple(info["shape"])
                expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
                if len(raw) != expected:
                    raise CheckpointError(f"{path}: {name} has {len(raw)} bytes, expected {expected}")
                arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return arrays, manifest["meta"]


def pack_training_state(model_state: dict[str, np.ndarray], optim_state: dict | None) -> dict[str, np.ndarray]:
    """Flatten model and optimizer arrays into one namespace."""
    arrays = {f"model/{k}": v for k, v in model_state.items()}
    if optim_state is not None:
        for k, v in optim_state["exp_avg"].items():
            arrays[f"optim/m/{k}"] = v
        for k, v in optim_state["exp_avg_sq"].items():
            arrays[f"optim/v/{k}"] = v
    return arrays


def unpack_training_state(arrays: dict[str, np.ndarray], optim_meta: dict | None):
    model_state = {k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")}
    if optim_meta is None:
        return model_state, None
    optim_state = {
        "step": optim_meta["step"],
        "hyper": optim_meta.get("hyper", {}),
        "exp_avg": {k[len("optim/m/"):]: v for k, v in arrays.items() if k.startswith("optim/m/")},
        "exp_avg_sq": {k[len("optim/v/"):]: v for k, v in arrays.items() if k.startswith("optim/v/")},
    }
    return model_state, optim_state


__all__ = [
    "FORMAT_VERSION", "CheckpointError", "save_checkpoint", "load_checkpoint",
    "pack_training_state", "unpack_training_state",
]
