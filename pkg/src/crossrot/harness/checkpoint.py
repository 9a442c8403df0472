"""Checkpointing: JSON manifest + one concatenated little-endian float blob.

Layout for base path "x": x.manifest.json lists version, model config, step
counter and a tensor table (name, shape, dtype, offset, nbytes, sha256);
x.weights.bin holds the raw bytes. Tensor names are namespaced param.*,
buffer.*, adam.m.*, adam.v.*. Round-trips are bitwise.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..autodiff import Adam
from ..model import ModelConfig, RotationNet
from ..panorama import IoFailure

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class VersionMismatch(CheckpointError):
    pass


class CorruptFile(CheckpointError):
    pass


@dataclass
class TrainState:
    """Optimizer/progress payload stored alongside the weights."""
    step: int = 0
    adam: dict | None = None        # {"t": int, "m": {...}, "v": {...}}
    extra: dict = field(default_factory=dict)


def _paths(base: str | Path) -> tuple[Path, Path]:
    base = str(base)
    for suffix in (".manifest.json", ".weights.bin"):
        if base.endswith(suffix):
            base = base[:-len(suffix)]
    return Path(base + ".manifest.json"), Path(base + ".weights.bin")


def _little_endian_bytes(a: np.ndarray) -> tuple[bytes, str]:
    le = a.astype(a.dtype.newbyteorder("<"), copy=False)
    return np.ascontiguousarray(le).tobytes(), le.dtype.str


def save_checkpoint(base: str | Path, model: RotationNet,
                    optimizer: Adam | None = None, step: int = 0,
                    extra: dict | None = None) -> Path:
    """Write manifest + weight blob; returns the manifest path."""
    entries: list[tuple[str, np.ndarray]] = []
    entries += [(f"param.{k}", p.data) for k, p in model.named_parameters().items()]
    entries += [(f"buffer.{k}", b) for k, b in model.named_buffers().items()]
    adam_t = None
    if optimizer is not None:
        adam_t = optimizer.state.t
        entries += [(f"adam.m.{k}", a) for k, a in optimizer.state.m.items()]
        entries += [(f"adam.v.{k}", a) for k, a in optimizer.state.v.items()]

    table = []
    blob = bytearray()
    for name, arr in entries:
        raw, dtype_str = _little_endian_bytes(arr)
        table.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": dtype_str,
            "offset": len(blob),
            "nbytes": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        blob.extend(raw)

    manifest = {
        "version": FORMAT_VERSION,
        "config": asdict(model.cfg),
        "step": int(step),
        "adam_t": adam_t,
        "extra": extra or {},
        "total_bytes": len(blob),
        "tensors": table,
    }
    manifest_path, weights_path = _paths(base)
    try:
        manifest_path.parent.mkdir(parents=True, exist_ok=True)
        with open(weights_path, "wb") as fh:
            fh.write(blob)
        with open(manifest_path, "w") as fh:
            json.dump(manifest, fh, indent=1)
    except OSError as e:
        raise IoFailure(f"could not write checkpoint {base}: {e}") from e
    return manifest_path


def load_checkpoint(base: str | Path) -> tuple[RotationNet, TrainState]:
    """Rebuild the model and training state; verifies every checksum."""
    manifest_path, weights_path = _paths(base)
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        blob = weights_path.read_bytes()
    except OSError as e:
        raise IoFailure(f"could not read checkpoint {base}: {e}") from e
    except json.JSONDecodeError as e:
        raise CorruptFile(f"manifest {manifest_path} is not valid JSON: {e}") from e

    try:
        version = manifest["version"]
        if version != FORMAT_VERSION:
            raise VersionMismatch(
                f"checkpoint format {version} unsupported (expected {FORMAT_VERSION})")
        cfg = ModelConfig(**manifest["config"])
        cfg.validate()
        if len(blob) != manifest["total_bytes"]:
            raise CorruptFile(
                f"weight blob is {len(blob)} bytes, manifest says "
                f"{manifest['total_bytes']} (truncated?)")
        tensors = {}
        for e in manifest["tensors"]:
            raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
            if len(raw) != e["nbytes"]:
                raise CorruptFile(f"tensor {e['name']} ends past the blob")
            if hashlib.sha256(raw).hexdigest() != e["sha256"]:
                raise CorruptFile(f"tensor {e['name']} fails its checksum")
            arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]))
            arr = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
            tensors[e["name"]] = arr
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptFile(f"manifest {manifest_path} is malformed: {e}") from e

    model = RotationNet(cfg, seed=0)
    _restore(model.named_parameters(), tensors, "param.", assign_data=True)
    _restore(model.named_buffers(), tensors, "buffer.", assign_data=False)

    adam = None
    if manifest.get("adam_t") is not None:
        adam = {"t": int(manifest["adam_t"]), "m": {}, "v": {}}
        for name, arr in tensors.items():
            for prefix, slot in (("adam.m.", "m"), ("adam.v.", "v")):
                if name.startswith(prefix):
                    adam[slot][name[len(prefix):]] = arr.copy()
    return model, TrainState(step=int(manifest["step"]), adam=adam,
                             extra=manifest.get("extra", {}))


def _restore(targets: dict, tensors: dict, prefix: str, assign_data: bool) -> None:
    stored = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    if set(stored) != set(targets):
        missing = sorted(set(targets) - set(stored))
        surplus = sorted(set(stored) - set(targets))
        raise CorruptFile(
            f"{prefix}* tensor set mismatch; missing {missing}, surplus {surplus}")
    for name, arr in stored.items():
        t = targets[name]
        dest = t.data if assign_data else t
        if tuple(arr.shape) != tuple(dest.shape):
            raise CorruptFile(
                f"{prefix}{name}: stored shape {arr.shape} vs model {dest.shape}")
        dest[...] = arr
