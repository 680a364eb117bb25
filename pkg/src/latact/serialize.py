"""Binary checkpoint format.

Layout (little-endian throughout):
    magic bytes ``SCAR``; version u32; tensor count u32; then per tensor:
    name length u16, UTF-8 name, rank u8, extents as u32s, float32 values.
"""

import struct

import numpy as np

from .autodiff import DTYPE, Tensor

MAGIC = b"SCAR"
VERSION = 1


def save_checkpoint(path, tensors):
    """Write a name -> Tensor/ndarray mapping. Keys are written sorted."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name in sorted(tensors):
            t = tensors[name]
            data = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=DTYPE)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.astype("<f4").tobytes())


def load_checkpoint(path):
    """Read a checkpoint into a name -> float32 ndarray dict."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: bad magic bytes")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            n = int(np.prod(shape)) if shape else 1
            vals = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(shape)
            out[name] = vals.astype(DTYPE)
        return out


def checksum(tensors):
    """Order-independent digest of a named tensor collection."""
    import hashlib

    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name]
        data = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f4")
        h.update(name.encode("utf-8"))
        h.update(data.tobytes())
    return h.hexdigest()
