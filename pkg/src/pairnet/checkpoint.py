"""Named-array binary container shared by checkpoints, query dumps and mask dumps.

Layout (all integers little-endian)::

    b"PNET" | u32 version
    repeated: u32 name_len | name (UTF-8) | u32 rank | u64 extent * rank | f64 value * prod(extents)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PNET"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def save_arrays(path, arrays):
    """Write an ordered mapping name -> float64 array."""
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, value in arrays.items():
        value = np.ascontiguousarray(value, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        chunks.append(value.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_arrays(path):
    buf = Path(path).read_bytes()
    pos = 0

    def read(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointFormatError(
                f"{path}: truncated at byte {pos} while reading {what} "
                f"(need {n} bytes, {len(buf) - pos} left)")
        out = buf[pos:pos + n]
        pos += n
        return out

    if read(4, "magic") != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes")
    (version,) = struct.unpack("<I", read(4, "version"))
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    arrays = {}
    while pos < len(buf):
        (name_len,) = struct.unpack("<I", read(4, "name length"))
        name = read(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", read(4, f"rank of {name!r}"))
        shape = struct.unpack(f"<{rank}Q", read(8 * rank, f"extents of {name!r}"))
        count = int(np.prod(shape, dtype=np.int64))
        raw = read(8 * count, f"values of {name!r}")
        arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return arrays


def save_module(path, module):
    save_arrays(path, module.state_dict())


def load_module(path, module):
    module.load_state_dict(load_arrays(path))
    return module
