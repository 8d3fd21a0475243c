"""Binary checkpoint: fixed header, JSON manifest, raw little-endian float64 blocks.

Layout::

    magic     8 bytes   b"HETEMBCK"
    version   uint32 LE
    cfg hash  32 bytes  sha256 of the canonical config JSON
    mlen      uint64 LE length of the manifest
    manifest  mlen bytes of UTF-8 JSON (sorted keys)
    payload   concatenated blocks, each prod(shape) float64 LE values

The manifest lists the blocks (name, shape) in payload order and the payload
size, so a reader can verify the total byte length before trusting anything.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .config import TrainConfig
from .data import DomainSpec, Standardizer

MAGIC = b"HETEMBCK"
VERSION = 1
_HEADER = struct.Struct("<8sI32sQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    specs: list[DomainSpec]
    label_names: tuple[str, ...]
    standardizer: Standardizer
    params: dict[str, Tensor]

    def blocks(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for s in sorted(self.specs, key=lambda s: s.id):
            out.append((f"standardize.mean.{s.id}", self.standardizer.means[s.id]))
            out.append((f"standardize.std.{s.id}", self.standardizer.stds[s.id]))
        out.extend((name, t.data) for name, t in self.params.items())
        return out

    def to_bytes(self) -> bytes:
        blocks = self.blocks()
        payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in blocks)
        manifest = {
            "config": self.config.to_dict(),
            "specs": [{"id": s.id, "name": s.name, "dim": s.dim} for s in self.specs],
            "label_names": list(self.label_names),
            "blocks": [{"name": n, "shape": list(np.shape(a))} for n, a in blocks],
            "payload_bytes": len(payload),
        }
        mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
        header = _HEADER.pack(MAGIC, VERSION, self.config.digest(), len(mbytes))
        return header + mbytes + payload

    def save(self, path) -> str:
        """Write the checkpoint; returns its sha256 hex digest."""
        data = self.to_bytes()
        Path(path).write_bytes(data)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def from_bytes(cls, data: bytes, expected_config: Optional[TrainConfig] = None) -> "Checkpoint":
        if len(data) < _HEADER.size:
            raise CheckpointError("checkpoint truncated: header incomplete")
        magic, version, digest, mlen = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        start = _HEADER.size
        if len(data) < start + mlen:
            raise CheckpointError("checkpoint truncated: manifest incomplete")
        try:
            manifest = json.loads(data[start : start + mlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt manifest: {exc}") from exc
        expected_len = start + mlen + manifest["payload_bytes"]
        if len(data) != expected_len:
            raise CheckpointError(f"checkpoint length {len(data)} != expected {expected_len}")
        config = TrainConfig.from_dict(manifest["config"])
        if config.digest() != digest:
            raise CheckpointError("config hash mismatch: checkpoint header does not match its config")
        if expected_config is not None and expected_config.digest() != digest:
            raise CheckpointError("checkpoint was trained with a different config")

        offset = start + mlen
        arrays: dict[str, np.ndarray] = {}
        for block in manifest["blocks"]:
            shape = tuple(block["shape"])
            count = int(np.prod(shape, dtype=np.int64))
            arrays[block["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
            offset += 8 * count
        specs = [DomainSpec(s["id"], s["name"], s["dim"]) for s in manifest["specs"]]
        means = {s.id: arrays.pop(f"standardize.mean.{s.id}") for s in specs}
        stds = {s.id: arrays.pop(f"standardize.std.{s.id}") for s in specs}
        params = {name: Tensor(a, requires_grad=True) for name, a in arrays.items()}
        return cls(config, specs, tuple(manifest["label_names"]), Standardizer(means, stds), params)

    @classmethod
    def load(cls, path, expected_config: Optional[TrainConfig] = None) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise CheckpointError(f"{path}: checkpoint not found")
        return cls.from_bytes(path.read_bytes(), expected_config)
