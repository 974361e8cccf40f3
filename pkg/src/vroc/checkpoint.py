"""Binary parameter checkpoints.

Layout (all integers little-endian unsigned 32-bit, floats little-endian
IEEE-754 binary64):

    magic   4 bytes  b"VRCK"
    version u32      format version, currently 1
    count   u32      number of tensors
    then per tensor:
      name_len u32, name (UTF-8, name_len bytes)
      ndim u32, dims (ndim x u32)
      payload (product(dims) x f64, row-major)

Round trips are bit-exact: save then load returns arrays equal under
bitwise comparison, in the same order.
"""

from __future__ import annotations

import struct
from typing import Sequence

import numpy as np

MAGIC = b"VRCK"
VERSION = 1


def save_checkpoint(path, named_arrays: Sequence) -> None:
    """Write (name, array) pairs; names must be unique and non-empty."""
    names = [n for n, _ in named_arrays]
    if len(set(names)) != len(names):
        dup = next(n for i, n in enumerate(names) if n in names[:i])
        raise ValueError(f"save_checkpoint: duplicate tensor name {dup!r}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(named_arrays)))
        for name, arr in named_arrays:
            if not name:
                raise ValueError("save_checkpoint: empty tensor name")
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> list:
    """Read a checkpoint back as an ordered list of (name, array)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"load_checkpoint: {path} is not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"load_checkpoint: unsupported format version {version}")
    off = 12
    out = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
        out.append((name, arr))
    if off != len(blob):
        raise ValueError(f"load_checkpoint: {len(blob) - off} trailing byte(s)")
    return out


def save_tensors(path, tensors: Sequence) -> None:
    """Checkpoint Tensor objects using their ``name`` attributes."""
    save_checkpoint(path, [(t.name, t.data) for t in tensors])


def load_into_tensors(path, tensors: Sequence) -> None:
    """Restore a checkpoint into existing Tensors, matched by name.

    Every tensor must be present in the file with an identical shape.
    """
    stored = dict(load_checkpoint(path))
    for t in tensors:
        if t.name not in stored:
            raise ValueError(f"load_into_tensors: checkpoint is missing {t.name!r}")
        arr = stored[t.name]
        if arr.shape != t.data.shape:
            raise ValueError(
                f"load_into_tensors: shape mismatch for {t.name!r}: "
                f"checkpoint {arr.shape}, tensor {t.data.shape}"
            )
        t.data = arr
