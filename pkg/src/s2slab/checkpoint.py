"""Binary checkpoints.

Layout (little-endian)::

    b"S2SF0001"
    u32 header_length, header JSON (UTF-8, sorted keys)
    u32 record_count
    records: u16 name_length, name (UTF-8), u8 rank, u32 dims[rank], f32 payload

Compute is float64 but payloads are float32.  :func:`save` first snaps the
live parameters and optimizer moments to float32 values in place, so a
resumed run continues from exactly the state that was written and
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from s2slab.errors import CheckpointIncompatible

MAGIC = b"S2SF0001"


def snap_f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def encode(header: dict[str, Any], tensors: dict[str, np.ndarray]) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(head)), head, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    if blob[:8] != MAGIC:
        raise CheckpointIncompatible(f"bad magic {blob[:8]!r}, expected {MAGIC!r}")
    try:
        pos = 8
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        header = json.loads(blob[pos:pos + n].decode("utf-8"))
        pos += n
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + ln].decode("utf-8")
            pos += ln
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
            if name in tensors:
                raise CheckpointIncompatible(f"duplicate record {name}")
            tensors[name] = arr.astype(np.float64)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointIncompatible(f"corrupt checkpoint: {exc}") from None
    if pos != len(blob):
        raise CheckpointIncompatible(f"{len(blob) - pos} trailing bytes")
    return header, tensors


def write(path: str | Path, header: dict[str, Any], tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(header, tensors))
    tmp.replace(path)


def read(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointIncompatible(f"cannot read checkpoint {path}: {exc}") from None
    return decode(blob)


def load_parameters(model, tensors: dict[str, np.ndarray]) -> None:
    """Copy every model parameter from ``tensors``; names and shapes must match exactly."""
    names = dict(model.named_parameters())
    missing = sorted(set(names) - set(tensors))
    if missing:
        raise CheckpointIncompatible(f"checkpoint lacks parameters {missing[:5]}")
    for name, p in names.items():
        src = tensors[name]
        if src.shape != p.shape:
            raise CheckpointIncompatible(f"{name}: checkpoint shape {src.shape} != model shape {p.shape}")
        p.data = np.array(src, dtype=np.float64)
