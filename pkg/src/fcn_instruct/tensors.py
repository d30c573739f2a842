"""Named-tensor checkpoints and weight initialization.

Binary layout (little-endian)::

    b"NTS1" u32 count
    repeated: u16 name_len, name (utf-8), u32 rank, u32 dims[rank], f64 data (row-major)

A sidecar ``<file>.shapes.txt`` lists ``name<TAB>d0xd1x...`` per tensor.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NTS1"

Tensors = dict[str, np.ndarray]


class CheckpointError(ValueError):
    pass


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def save_tensors(tensors: Tensors, path: str | Path) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    shapes = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
        shapes.append(f"{name}\t{'x'.join(str(s) for s in arr.shape) or 'scalar'}")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)
    side = path.with_name(path.name + ".shapes.txt")
    side.write_text("\n".join(shapes) + "\n")


def load_tensors(path: str | Path) -> Tensors:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a named-tensor file")
    (count,) = struct.unpack_from("<I", raw, 4)
    off = 8
    out: Tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(dims).copy()
        off += 8 * size
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return out
