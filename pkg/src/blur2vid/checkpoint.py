"""Binary checkpoint format.

Layout: magic `BAMV`, u32 version, u32 entry count, then each entry as
(u16 name length, UTF-8 name, u8 rank, u32 dims..., little-endian f32
payload), then a footer of u64 iteration, u32 blob length, and a JSON blob
(stage, model config, RNG state, optimizer step, anything else small).
Serialization is canonical, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Param

MAGIC = b"BAMV"
VERSION = 1


class CheckpointError(Exception):
    """Raised for malformed checkpoint files or config mismatches."""


@dataclass
class Checkpoint:
    stage: str
    config: dict
    iteration: int
    entries: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, ck: Checkpoint) -> None:
    blob = json.dumps({"stage": ck.stage, "config": ck.config,
                       **ck.meta}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(ck.entries)))
        for name, arr in ck.entries.items():
            nb = name.encode()
            arr = np.asarray(arr, dtype="<f4")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
        f.write(struct.pack("<QI", ck.iteration, len(blob)))
        f.write(blob)


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: short read in {what}")
    return data


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise CheckpointError(f"not a checkpoint file (bad magic): {path}")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != VERSION:
            raise CheckpointError(
                f"unknown checkpoint version {version} (expected {VERSION})")
        entries: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2, "entry header"))
            name = _read_exact(f, nlen, "entry name").decode()
            (rank,) = struct.unpack("<B", _read_exact(f, 1, name))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, name))
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = _read_exact(f, 4 * size, f"payload of {name}")
            entries[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        iteration, blen = struct.unpack("<QI", _read_exact(f, 12, "footer"))
        blob = json.loads(_read_exact(f, blen, "footer blob").decode())
        if f.read(1):
            raise CheckpointError(f"trailing data after footer: {path}")
    stage = blob.pop("stage", "")
    config = blob.pop("config", {})
    return Checkpoint(stage, config, iteration, entries, blob)


def restore_params(params: dict[str, Param], entries: dict[str, np.ndarray]) -> None:
    """Copy checkpoint entries into live Params; strict on names and shapes."""
    for name, p in params.items():
        arr = entries.get(name)
        if arr is None:
            raise CheckpointError(f"checkpoint missing parameter {name}")
        if arr.shape != p.value.shape:
            raise CheckpointError(
                f"shape mismatch for parameter {name}: checkpoint "
                f"{arr.shape} vs model {p.value.shape}")
        p.value = arr.astype(np.float32).copy()
