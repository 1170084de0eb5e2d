"""
Binary named-tensor container used for model and perturbation checkpoints.

Layout (little-endian)::

    <MAGIC> <field> <field>\\n          ASCII header line
    repeat:
        u32 name length, name bytes (utf-8)
        u32 rank, rank x u32 dims
        float64 payload, row-major
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataFormatError


def encode(header: str, tensors: dict) -> bytes:
    if "\n" in header:
        raise ValueError("header must be a single line")
    parts = [header.encode("ascii") + b"\n"]
    for name, arr in tensors.items():
        a = np.array(arr, dtype="<f8", order="C")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def decode(buf: bytes):
    """Return ``(header_fields, {name: array})``."""
    nl = buf.find(b"\n")
    if nl < 0:
        raise DataFormatError("missing header line", 0)
    try:
        fields = buf[:nl].decode("ascii").split()
    except UnicodeDecodeError:
        raise DataFormatError("non-ascii header", 0) from None
    pos = nl + 1
    tensors = {}

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise DataFormatError(f"truncated checkpoint: need {n} bytes", pos)
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (ln,) = struct.unpack("<I", take(4))
        try:
            name = take(ln).decode("utf-8")
        except UnicodeDecodeError:
            raise DataFormatError("bad tensor name", pos - ln) from None
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(8 * count), dtype="<f8").reshape(dims)
        tensors[name] = data.astype(np.float64)
    return fields, tensors


def save(path, header: str, tensors: dict):
    with open(path, "wb") as f:
        f.write(encode(header, tensors))


def load(path):
    with open(path, "rb") as f:
        return decode(f.read())
