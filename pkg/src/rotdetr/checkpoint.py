"""Versioned binary checkpoint of named float64 tensors plus a config snapshot.

Layout::

    MAGIC (8 bytes) | version u32 LE | header length u64 LE | header JSON (UTF-8)
    | tensor data ('<f8', concatenated in header order) | sha256 of everything before (32 bytes)

The header is JSON with sorted keys, so identical content gives identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"RDETRCKP"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        names = sorted(self.tensors)
        entries, offset, chunks = [], 0, []
        for name in names:
            arr = np.asarray(self.tensors[name], dtype="<f8")
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(arr.tobytes(order="C"))
            offset += arr.size
        header = json.dumps({"config": self.config, "meta": self.meta, "tensors": entries},
                            sort_keys=True, separators=(",", ":")).encode("utf-8")
        body = _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < _PREFIX.size + 32:
            raise CheckpointError("checkpoint is truncated")
        body, digest = blob[:-32], blob[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise CheckpointError("checkpoint checksum mismatch")
        magic, version, hlen = _PREFIX.unpack_from(body)
        if magic != MAGIC:
            raise CheckpointError("not a checkpoint file")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        start = _PREFIX.size
        try:
            header = json.loads(body[start:start + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"bad checkpoint header: {exc}") from exc
        data = np.frombuffer(body[start + hlen:], dtype="<f8")
        tensors = {}
        for e in header["tensors"]:
            n = int(np.prod(e["shape"], dtype=np.int64))
            if e["offset"] + n > data.size:
                raise CheckpointError(f"tensor {e['name']} runs past the data block")
            tensors[e["name"]] = data[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float64)
        return cls(tensors, header["config"], header["meta"])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def save_model(path, model, config: dict, meta: dict | None = None) -> Checkpoint:
    ckpt = Checkpoint(model.state_dict(), config, meta or {})
    ckpt.save(path)
    return ckpt
