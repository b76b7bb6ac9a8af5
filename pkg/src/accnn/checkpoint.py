"""Binary checkpoint format.

Layout (all integers little-endian uint64)::

    b"ACCNN1"
    count
    count x { name_len, name (UTF-8), rank, extents[rank], float32 data }
"""

from __future__ import annotations

import io
import struct
from typing import Mapping

import numpy as np

MAGIC = b"ACCNN1"


class CheckpointError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<Q", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr)
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<Q", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not an ACCNN1 checkpoint (bad magic)")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError("truncated checkpoint")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<Q", take(8))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<Q", take(8))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last array")
    return out


def save(path, arrays: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(arrays))


def load(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())


def check_compatible(expected: Mapping[str, tuple], found: Mapping[str, np.ndarray]) -> None:
    """Raise with a named-tensor diff when shapes or names disagree."""
    lines = []
    for name in sorted(set(expected) - set(found)):
        lines.append(f"  missing: {name} {tuple(expected[name])}")
    for name in sorted(set(found) - set(expected)):
        lines.append(f"  unexpected: {name} {found[name].shape}")
    for name in sorted(set(expected) & set(found)):
        if tuple(expected[name]) != found[name].shape:
            lines.append(f"  shape: {name} expected {tuple(expected[name])}, found {found[name].shape}")
    if lines:
        raise CheckpointError("checkpoint does not match the model configuration:\n" + "\n".join(lines))
