"""Binary checkpoint format for model parameters.

Layout: magic b"SYLV", format version u32, then one record per parameter:
u32 name length, UTF-8 name, frozen flag byte, u64 rank, u64 dims,
little-endian f32 payload. Records run to end of file.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"SYLV"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, truncated, or wrong-version checkpoint file."""


def write_record(fh: BinaryIO, name: str, frozen: bool, value: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<B", 1 if frozen else 0))
    fh.write(struct.pack("<Q", value.ndim))
    for d in value.shape:
        fh.write(struct.pack("<Q", d))
    fh.write(np.ascontiguousarray(value, dtype="<f4").tobytes())


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def read_record(fh: BinaryIO) -> tuple[str, bool, np.ndarray] | None:
    head = fh.read(4)
    if not head:
        return None
    if len(head) != 4:
        raise CheckpointError("truncated checkpoint while reading record header")
    (name_len,) = struct.unpack("<I", head)
    name = _read_exact(fh, name_len, "parameter name").decode("utf-8")
    (frozen,) = struct.unpack("<B", _read_exact(fh, 1, "frozen flag"))
    (rank,) = struct.unpack("<Q", _read_exact(fh, 8, "rank"))
    dims = [
        struct.unpack("<Q", _read_exact(fh, 8, "dims"))[0] for _ in range(rank)
    ]
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    payload = _read_exact(fh, 4 * count, f"payload of '{name}'")
    value = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return name, bool(frozen), value


def save_checkpoint(model, path) -> None:
    """Write every parameter (value + frozen flag) in insertion order."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, tensor in model.params.items():
            write_record(fh, name, not model.params.is_trainable(name), tensor.data)


def load_param_records(path) -> list[tuple[str, bool, np.ndarray]]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}; not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {version} (expected {VERSION})"
            )
        records = []
        while True:
            rec = read_record(fh)
            if rec is None:
                return records
            records.append(rec)


def load_checkpoint(model, path, unfreeze_top_k: int | None = None) -> None:
    """Restore parameters bit-exactly into an existing model.

    With unfreeze_top_k given, stored frozen flags are discarded and only the
    top k layers (output side) are left trainable; otherwise flags round-trip.
    """
    records = load_param_records(path)
    seen = set()
    for name, frozen, value in records:
        if name not in model.params:
            raise CheckpointError(f"checkpoint parameter '{name}' not in model")
        tensor = model.params[name]
        if tensor.data.shape != value.shape:
            raise CheckpointError(
                f"shape mismatch for '{name}': model {tensor.data.shape}, "
                f"file {value.shape}"
            )
        tensor.data = value.astype(model.dtype)
        model.params.set_trainable(name, not frozen)
        seen.add(name)
    missing = [n for n in model.params.names() if n not in seen]
    if missing:
        raise CheckpointError(f"checkpoint missing parameters: {missing}")
    if unfreeze_top_k is not None:
        model.set_unfreeze_top_k(unfreeze_top_k)
