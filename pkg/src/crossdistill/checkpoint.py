"""Binary tensor checkpoints.

A checkpoint is a directory with ``manifest.json`` and ``tensors.bin``. Each
tensor record in the blob is ``int32 rank, int32 dims[rank], float32 data``,
all little-endian; the manifest maps tensor names to record offset and length.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .tensor import Tensor

FORMAT_VERSION = 1
_I32 = np.dtype("<i4")
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


class CompatibilityError(CheckpointError):
    """Checkpoint was produced under a different configuration."""


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    header = np.array([arr.ndim, *arr.shape], dtype=_I32).tobytes()
    return header + np.ascontiguousarray(arr, dtype=_F32).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    rank = int(np.frombuffer(buf, _I32, count=1)[0])
    shape = tuple(int(s) for s in np.frombuffer(buf, _I32, count=rank, offset=4))
    data = np.frombuffer(buf, _F32, offset=4 * (rank + 1))
    if data.size != int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError(f"record holds {data.size} values, shape {shape} needs more")
    return data.reshape(shape).astype(np.float32)


def save_checkpoint(directory, tensors: dict, cfg_hash: str, kind: str, meta: dict | None = None) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(root / "tensors.bin", "wb") as f:
        for name in sorted(tensors):
            arr = tensors[name]
            arr = arr.data if isinstance(arr, Tensor) else arr
            rec = encode_tensor(arr)
            f.write(rec)
            entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(rec)})
            offset += len(rec)
    manifest = {"format_version": FORMAT_VERSION, "config_hash": cfg_hash, "kind": kind,
                "meta": meta or {}, "tensors": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {directory}")
    return json.loads(path.read_text())


def load_checkpoint(directory, expected_hash: str | None = None) -> tuple:
    """Returns ``({name: float32 array}, manifest)``."""
    manifest = read_manifest(directory)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')}")
    if expected_hash is not None and manifest["config_hash"] != expected_hash:
        raise CompatibilityError(
            f"checkpoint {directory} has config hash {manifest['config_hash']}, current config is {expected_hash}")
    blob = (Path(directory) / "tensors.bin").read_bytes()
    tensors = {}
    for e in manifest["tensors"]:
        rec = blob[e["offset"]: e["offset"] + e["nbytes"]]
        if len(rec) != e["nbytes"]:
            raise CheckpointError(f"{e['name']}: blob truncated")
        arr = decode_tensor(rec)
        if list(arr.shape) != e["shape"]:
            raise CheckpointError(f"{e['name']}: shape {arr.shape} != manifest {e['shape']}")
        tensors[e["name"]] = arr
    return tensors, manifest


def assign(model, tensors: dict, prefix: str = "") -> None:
    """Copy arrays into ``model.named_tensors()`` (names optionally prefixed), checking shapes."""
    for name, t in model.named_tensors().items():
        key = prefix + name
        if key not in tensors:
            raise CheckpointError(f"checkpoint lacks tensor {key}")
        if tensors[key].shape != t.shape:
            raise CheckpointError(f"{key}: checkpoint shape {tensors[key].shape} != model {t.shape}")
        t.data = tensors[key].astype(t.dtype).copy()
