"""Single-file checkpoint format.

Layout: 8-byte magic ``TRIMLAB1``, 8-byte little-endian header length, a
canonical JSON header (format version, model spec, tensor manifest, optional
optimizer step and metadata), then the raw payload: each tensor's bytes
little-endian in manifest order. The manifest makes the file self-describing
and the byte accounting exact; save(load(f)) reproduces f byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .blocks import ModelInstance, ModelSpec, Tensor, param_shapes

MAGIC = b"TRIMLAB1"
FORMAT_VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint bytes."""


def _dtype_tag(dtype) -> str:
    tag = {np.dtype(np.float32): "<f4", np.dtype(np.float64): "<f8"}.get(np.dtype(dtype))
    if tag is None:
        raise CheckpointError(f"unsupported tensor dtype {dtype}")
    return tag


def _pack(model_info: dict, arrays: dict[str, np.ndarray], optimizer: dict | None, meta: dict) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        tag = _dtype_tag(arr.dtype)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        manifest.append(
            {"name": name, "dtype": tag, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "model": model_info,
        "tensors": manifest,
        "optimizer": optimizer,
        "meta": meta,
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + len(hjson).to_bytes(8, "little") + hjson + b"".join(chunks)


@dataclass
class Checkpoint:
    """Parsed checkpoint: header fields plus named arrays in manifest order."""

    model_info: dict
    arrays: dict[str, np.ndarray]
    optimizer: dict | None = None
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        return _pack(self.model_info, self.arrays, self.optimizer, self.meta)

    def save(self, path) -> int:
        data = self.to_bytes()
        with open(path, "wb") as f:
            f.write(data)
        return len(data)

    def spec(self) -> ModelSpec:
        return ModelSpec.from_dict(self.model_info["spec"])

    def to_model(self) -> ModelInstance:
        spec = self.spec()
        params = {}
        for name in param_shapes(spec):
            if name not in self.arrays:
                raise CheckpointError(f"checkpoint missing parameter {name!r}")
            params[name] = Tensor(self.arrays[name].copy())
        return ModelInstance(spec, params, frozen=bool(self.model_info.get("frozen", False)))

    def mask_logits(self) -> dict[str, np.ndarray]:
        return {name[len("mask."):]: arr for name, arr in self.arrays.items() if name.startswith("mask.")}

    def has_masks(self) -> bool:
        return any(name.startswith("mask.") for name in self.arrays)


def make_checkpoint(
    model: ModelInstance,
    masks=None,
    optimizer=None,
    meta: dict | None = None,
) -> Checkpoint:
    """Assemble a checkpoint: model params in spec order, then mask logits,
    then optimizer moments."""
    arrays: dict[str, np.ndarray] = {}
    for name in param_shapes(model.spec):
        arrays[name] = model.params[name].data
    opt_info = None
    if masks is not None:
        for name, tensor in masks.parameters().items():
            arrays[name] = tensor.data
    if optimizer is not None:
        for name, (m, v) in optimizer.moments.items():
            arrays[f"adam.m.{name}"] = m
            arrays[f"adam.v.{name}"] = v
        opt_info = {"kind": "adam", "step": optimizer.step_count}
    return Checkpoint(
        model_info={"spec": model.spec.to_dict(), "frozen": bool(model.frozen)},
        arrays=arrays,
        optimizer=opt_info,
        meta=meta or {},
    )


def serialize(model: ModelInstance, masks=None, optimizer=None, meta: dict | None = None) -> bytes:
    return make_checkpoint(model, masks, optimizer, meta).to_bytes()


def save_checkpoint(path, model: ModelInstance, masks=None, optimizer=None, meta: dict | None = None) -> int:
    return make_checkpoint(model, masks, optimizer, meta).save(path)


def deserialize(data: bytes) -> Checkpoint:
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError("bad magic: not a trimlab checkpoint")
    hlen = int.from_bytes(data[8:16], "little")
    if 16 + hlen > len(data):
        raise CheckpointError("truncated header")
    try:
        header = json.loads(data[16 : 16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unparseable header: {e}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {header.get('format_version')}")
    payload = data[16 + hlen :]
    arrays: dict[str, np.ndarray] = {}
    spans = []
    for entry in header["tensors"]:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"unsupported dtype tag {entry['dtype']!r}")
        start, n = entry["offset"], entry["nbytes"]
        if start < 0 or start + n > len(payload):
            raise CheckpointError(f"tensor {entry['name']!r} is out of payload bounds")
        spans.append((start, start + n, entry["name"]))
        arr = np.frombuffer(payload[start : start + n], dtype=dtype).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
    spans.sort()
    for (a0, a1, an), (b0, _b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CheckpointError(f"tensors {an!r} and {bn!r} overlap in the payload")
    return Checkpoint(
        model_info=header["model"],
        arrays=arrays,
        optimizer=header.get("optimizer"),
        meta=header.get("meta", {}),
    )


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return deserialize(f.read())
