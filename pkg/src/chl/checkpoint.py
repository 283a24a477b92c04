"""Versioned binary checkpoints.

Layout (little endian)::

    magic        8 bytes  b"CHLCKPT\\0"
    version      u16
    stage        u8       index into STAGES
    epoch        u32
    rng_seed     i64
    parent       32 bytes sha256 of the predecessor checkpoint (zeros if none)
    meta_len     u32, then meta_len bytes of UTF-8 JSON (encoder config, tensor
                 names, stage metadata)
    n_tensors    u32
    per tensor:  ndim u8, shape u32 * ndim, float64 data (C order)

Tensors appear in declaration order: encoder parameters, then head parameters.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, param_names
from .errors import DataError

MAGIC = b"CHLCKPT\x00"
VERSION = 1
STAGES = ("pretrain", "relax", "finetune")
NO_PARENT = "0" * 64


@dataclass
class Checkpoint:
    stage: str
    epoch: int
    rng_seed: int
    encoder_config: EncoderConfig
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    parent_hash: str = NO_PARENT

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")

    def encoder_params(self) -> dict[str, np.ndarray]:
        return {k: self.tensors[k].copy() for k in param_names(self.encoder_config)}

    def head_params(self) -> dict[str, np.ndarray]:
        enc = set(param_names(self.encoder_config))
        return {k: v.copy() for k, v in self.tensors.items() if k not in enc}


def to_bytes(ckpt: Checkpoint) -> bytes:
    meta = {
        "encoder": ckpt.encoder_config.to_dict(),
        "tensor_names": list(ckpt.tensors),
        "metadata": ckpt.metadata,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    parts = [
        MAGIC,
        struct.pack("<HBIq", VERSION, STAGES.index(ckpt.stage), ckpt.epoch, ckpt.rng_seed),
        bytes.fromhex(ckpt.parent_hash),
        struct.pack("<I", len(meta_bytes)),
        meta_bytes,
        struct.pack("<I", len(ckpt.tensors)),
    ]
    for arr in ckpt.tensors.values():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(path, ckpt: Checkpoint) -> str:
    """Write ``ckpt`` and return the sha256 hex digest of the file."""
    data = to_bytes(ckpt)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    off = 8
    version, stage_idx, epoch, seed = struct.unpack_from("<HBIq", data, off)
    off += struct.calcsize("<HBIq")
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    if stage_idx >= len(STAGES):
        raise DataError(f"{path}: bad stage code {stage_idx}")
    parent = data[off : off + 32].hex()
    off += 32
    (meta_len,) = struct.unpack_from("<I", data, off)
    off += 4
    meta = json.loads(data[off : off + meta_len].decode())
    off += meta_len
    (n_tensors,) = struct.unpack_from("<I", data, off)
    off += 4
    names = meta["tensor_names"]
    if len(names) != n_tensors:
        raise DataError(f"{path}: tensor count does not match header")
    tensors = {}
    for name in names:
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
    if off != len(data):
        raise DataError(f"{path}: trailing bytes after tensors")
    enc = meta["encoder"]
    cfg = EncoderConfig(enc["input_size"], tuple(enc["channels"]), enc["embed_dim"])
    return Checkpoint(STAGES[stage_idx], epoch, seed, cfg, tensors, meta.get("metadata", {}), parent)
