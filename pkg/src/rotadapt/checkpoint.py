"""Checkpoint files: ``<name>.ckpt`` (weights) and ``<name>.meta.json`` (metadata).

Blob layout, all integers little-endian::

    b"RDCKPT" | u16 version | sha256(payload) | u64 len(payload) | payload
    payload = u32 len(header) | header JSON | raw tensor bytes in header order
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .core import RotAdaptError
from .models import ModelHandle, ModelSpec, build_model

MAGIC = b"RDCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<6sH32sQ")


class CheckpointVersionError(RotAdaptError):
    pass


class CheckpointIntegrityError(RotAdaptError):
    pass


@dataclass
class Checkpoint:
    state: dict[str, np.ndarray]
    model_spec: dict
    iteration: int = 0
    val_accuracy: float = 0.0
    seed: int = 0
    config_hash: str = ""
    format_version: int = FORMAT_VERSION
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.val_accuracy <= 1.0:
            raise ValueError(f"val_accuracy must lie in [0, 1], got {self.val_accuracy}")

    @classmethod
    def from_model(cls, model: ModelHandle, **meta) -> "Checkpoint":
        state = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        return cls(state=state, model_spec=model.spec.as_dict(), **meta)

    def build(self) -> ModelHandle:
        model = build_model(ModelSpec(**self.model_spec))
        self.load_into(model)
        return model

    def load_into(self, model: ModelHandle) -> None:
        ref = model.state_dict()
        model.load_state_dict({k: torch.from_numpy(v.copy()).to(ref[k].dtype) for k, v in self.state.items()})

    def weights_blob(self) -> bytes:
        return encode_weights(self.state)

    def meta(self) -> dict:
        return {
            "format_version": self.format_version,
            "iteration": self.iteration,
            "val_accuracy": self.val_accuracy,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "model_spec": self.model_spec,
            "weights_sha256": hashlib.sha256(self.weights_blob()).hexdigest(),
            "extra": self.extra,
        }


def encode_weights(state: dict[str, np.ndarray]) -> bytes:
    entries, chunks = [], []
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        chunks.append(raw)
    header = json.dumps(entries, separators=(",", ":")).encode()
    payload = struct.pack("<I", len(header)) + header + b"".join(chunks)
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, hashlib.sha256(payload).digest(), len(payload)) + payload


def decode_weights(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < _PREFIX.size:
        raise CheckpointIntegrityError(f"checkpoint truncated: {len(blob)} bytes")
    magic, version, digest, length = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointIntegrityError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version} unsupported "
                                     f"(this build reads version {FORMAT_VERSION})")
    payload = blob[_PREFIX.size:]
    if len(payload) != length:
        raise CheckpointIntegrityError(f"checkpoint truncated: payload {len(payload)} of {length} bytes")
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointIntegrityError("checkpoint checksum mismatch")
    (hlen,) = struct.unpack_from("<I", payload)
    entries = json.loads(payload[4:4 + hlen])
    state, offset = {}, 4 + hlen
    for e in entries:
        dtype = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"], dtype=np.int64)) * dtype.itemsize
        state[e["name"]] = np.frombuffer(payload, dtype=dtype, count=n // dtype.itemsize,
                                         offset=offset).reshape(e["shape"]).copy()
        offset += n
    return state


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix == ".ckpt" else p


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write the pair of files; returns the ``.ckpt`` path."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    ckpt_path = stem.with_name(stem.name + ".ckpt")
    ckpt_path.write_bytes(ckpt.weights_blob())
    stem.with_name(stem.name + ".meta.json").write_text(
        json.dumps(ckpt.meta(), indent=2, sort_keys=True) + "\n")
    return ckpt_path


def load_checkpoint(path, verify_meta: Optional[bool] = True) -> Checkpoint:
    stem = _stem(path)
    ckpt_path = stem.with_name(stem.name + ".ckpt")
    meta_path = stem.with_name(stem.name + ".meta.json")
    try:
        blob = ckpt_path.read_bytes()
        meta = json.loads(meta_path.read_text())
    except OSError as exc:
        raise CheckpointIntegrityError(f"cannot read checkpoint {ckpt_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointIntegrityError(f"corrupt metadata {meta_path}: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(f"metadata format version {meta.get('format_version')} unsupported")
    state = decode_weights(blob)
    if verify_meta and meta.get("weights_sha256") != hashlib.sha256(blob).hexdigest():
        raise CheckpointIntegrityError("weights file does not match its metadata sidecar")
    return Checkpoint(state=state, model_spec=meta["model_spec"], iteration=meta["iteration"],
                      val_accuracy=meta["val_accuracy"], seed=meta["seed"],
                      config_hash=meta["config_hash"], extra=meta.get("extra", {}))
