"""Versioned binary checkpoints.

File layout (little-endian)::

    b"BFCKPT\\0\\0"   8-byte magic
    uint32           format version
    uint64           header length L
    L bytes          UTF-8 JSON header: model config, seed, tensor table, optimizer hyperparameters
    ...              float64 tensor payload, tensors back to back in table order
    32 bytes         SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import FusionModel, ModelConfig
from .numerics import Adam

MAGIC = b"BFCKPT\0\0"
VERSION = 1
_F64 = np.dtype("<f8")


def save_checkpoint(path, model: FusionModel, optimizer: Adam | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    tensors = list(model.state_dict().items())
    opt_header = None
    if optimizer is not None:
        st0 = optimizer.states[0] if optimizer.states else None
        opt_header = {
            "lr": optimizer.lr,
            "step_count": st0.step_count if st0 else 0,
            "beta1": st0.beta1 if st0 else 0.9,
            "beta2": st0.beta2 if st0 else 0.999,
            "eps": st0.eps if st0 else 1e-8,
            "weight_decay": st0.weight_decay if st0 else 0.0,
        }
        for p, s in zip(optimizer.params, optimizer.states):
            tensors.append((f"adam.m.{p.name}", s.m))
            tensors.append((f"adam.v.{p.name}", s.v))

    table, offset = [], 0
    for name, arr in tensors:
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * _F64.itemsize
    header = {
        "model_config": model.cfg.to_dict(),
        "seed": model.seed,
        "tensors": table,
        "optimizer": opt_header,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray(MAGIC)
    body += struct.pack("<IQ", VERSION, len(hbytes))
    body += hbytes
    for _, arr in tensors:
        body += np.ascontiguousarray(arr, dtype=_F64).tobytes()
    body += hashlib.sha256(body).digest()
    path.write_bytes(bytes(body))
    return path


def load_checkpoint(path) -> tuple[FusionModel, Adam | None, dict]:
    """Rebuild the model (and optimizer if one was saved); returns (model, optimizer, extra)."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read checkpoint ({exc})") from exc
    if len(blob) < len(MAGIC) + 12 + 32 or blob[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    if hashlib.sha256(blob[:-32]).digest() != blob[-32:]:
        raise FormatError(f"{path}: checksum mismatch")
    version, hlen = struct.unpack_from("<IQ", blob, len(MAGIC))
    if version != VERSION:
        raise FormatError(f"{path}: unknown checkpoint version {version}")
    start = len(MAGIC) + 12
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    payload = memoryview(blob)[start + hlen : len(blob) - 32]

    arrays = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"]))
        lo, hi = entry["offset"], entry["offset"] + n * _F64.itemsize
        if hi > len(payload):
            raise FormatError(f"{path}: tensor {entry['name']!r} runs past payload end at offset {lo}")
        arrays[entry["name"]] = np.frombuffer(payload[lo:hi], dtype=_F64).reshape(entry["shape"]).copy()

    model = FusionModel(ModelConfig(**header["model_config"]), seed=header["seed"])
    model.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("adam.")})
    optimizer = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        optimizer = Adam(model.parameters(), lr=o["lr"], betas=(o["beta1"], o["beta2"]),
                         eps=o["eps"], weight_decay=o["weight_decay"])
        for p, s in zip(optimizer.params, optimizer.states):
            s.m = arrays[f"adam.m.{p.name}"]
            s.v = arrays[f"adam.v.{p.name}"]
            s.step_count = o["step_count"]
    return model, optimizer, header["extra"]
