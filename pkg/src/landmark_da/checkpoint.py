"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic        4 bytes   b"LMDA"
    version      u32
    spec_len     u32       length of the UTF-8 ArchitectureSpec text
    spec         bytes     key=value lines
    seed         i64
    step         u64
    entry_count  u32
    entries      entry_count times:
        kind     u8        0 = parameter, 1 = optimizer slot
        name_len u16
        name     bytes     UTF-8
        rank     u32
        dims     rank x u32
        values   prod(dims) x f64
    payload_len  u64       number of bytes preceding this field
    sha256       32 bytes  digest of everything before payload_len

Parameters are written first, then optimizer slots, each in the model's
stable parameter order.
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .netdef import ArchitectureSpec, ModelState

MAGIC = b"LMDA"
FORMAT_VERSION = 1
_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    """Checkpoint is truncated, corrupted or from another format version."""


def to_bytes(model: ModelState) -> bytes:
    spec_text = model.spec.to_text().encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(spec_text)), spec_text,
             struct.pack("<qQ", model.seed, model.step)]
    entries = [(0, name, t.data) for name, t in model.params.items()]
    entries += [(1, name, model.slots[name]) for name in model.params]
    parts.append(struct.pack("<I", len(entries)))
    for kind, name, arr in entries:
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<BH", kind, len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_F64).tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<Q", len(payload)) + hashlib.sha256(payload).digest()


def from_bytes(blob: bytes) -> ModelState:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a landmark checkpoint (bad magic)")
    if len(blob) < 4 + 40:
        raise CheckpointError("checksum error: file truncated")
    (payload_len,) = struct.unpack_from("<Q", blob, len(blob) - 40)
    if payload_len != len(blob) - 40:
        raise CheckpointError(
            f"checksum error: length mismatch (header says {payload_len} bytes, file has {len(blob) - 40})"
        )
    payload = blob[:payload_len]
    if hashlib.sha256(payload).digest() != blob[-32:]:
        raise CheckpointError("checksum error: sha256 digest mismatch")

    pos = 4
    version, spec_len = struct.unpack_from("<II", payload, pos)
    pos += 8
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    spec = ArchitectureSpec.from_text(payload[pos:pos + spec_len].decode("utf-8"))
    pos += spec_len
    seed, step = struct.unpack_from("<qQ", payload, pos)
    pos += 16
    (count,) = struct.unpack_from("<I", payload, pos)
    pos += 4
    params, slots = {}, {}
    for _ in range(count):
        kind, name_len = struct.unpack_from("<BH", payload, pos)
        pos += 3
        name = payload[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", payload, pos)
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(payload, dtype=_F64, count=n, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * n
        if kind == 0:
            params[name] = Tensor(arr, requires_grad=True, name=name)
        else:
            slots[name] = arr
    if pos != len(payload):
        raise CheckpointError("checksum error: trailing bytes after last entry")
    try:
        return ModelState(spec=spec, params=params, slots=slots, seed=seed, step=step)
    except ValueError as exc:
        raise CheckpointError(f"checkpoint does not match its architecture: {exc}") from exc


def save_checkpoint(model: ModelState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(model))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> ModelState:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"{path}: checkpoint not found")
    return from_bytes(path.read_bytes())
