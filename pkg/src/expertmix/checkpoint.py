"""Versioned binary weight checkpoints (MOEW format).

Layout: magic "MOEW", format version u32, entry count u32, then per entry:
name length u32 + UTF-8 name, rank u32 + dims u32 each, raw float64 data.
All integers little-endian, floats little-endian IEEE 754. Round trips are
bit-exact.
"""

from __future__ import annotations

import hashlib
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .tensor import LayerParams

MAGIC = b"MOEW"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _pack_entry(name: str, arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr, dtype="<f8")
    raw = name.encode("utf-8")
    parts = [struct.pack("<I", len(raw)), raw, struct.pack("<I", data.ndim)]
    parts += [struct.pack("<I", d) for d in data.shape]
    parts.append(data.tobytes())
    return b"".join(parts)


def save_params(path, params_list: list[LayerParams]) -> None:
    """Write each layer's weights and biases as named entries."""
    entries = []
    for p in params_list:
        entries.append(_pack_entry(f"{p.name}.weights", p.weights))
        entries.append(_pack_entry(f"{p.name}.biases", p.biases))
    blob = MAGIC + struct.pack("<II", VERSION, len(entries)) + b"".join(entries)
    Path(path).write_bytes(blob)


def load_params(path) -> "OrderedDict[str, np.ndarray]":
    """Read a checkpoint back into an ordered name -> array mapping."""
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise CheckpointError(f"checkpoint truncated: {len(blob)} bytes, need at least 12")
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic: expected {MAGIC!r}, got {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
    off = 12
    out: OrderedDict[str, np.ndarray] = OrderedDict()

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"checkpoint truncated while reading {what}")
        chunk = blob[off : off + n]
        off += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(8 * size, f"data of {name}"), dtype="<f8")
        out[name] = data.reshape(dims).astype(np.float64)
    if off != len(blob):
        raise CheckpointError(f"{len(blob) - off} trailing bytes after last entry")
    return out


def params_digest(params_list: list[LayerParams]) -> str:
    """SHA-256 over all parameter bytes, used to verify freezing contracts."""
    h = hashlib.sha256()
    for p in params_list:
        h.update(np.ascontiguousarray(p.weights, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(p.biases, dtype="<f8").tobytes())
    return h.hexdigest()
