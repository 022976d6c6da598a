"""Bit-exact model persistence in a tiny language-neutral binary format.

Layout: magic ``TVOD``, format version (u32), tensor count (u32), then per
tensor in sorted name order: name length (u16), UTF-8 name, rank (u8), one
u32 per dimension, and the payload as little-endian 32-bit reals.  All
integers are little-endian.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ContractError, ParseError
from .tensor import ParamRegistry

__all__ = ["MAGIC", "VERSION", "save_checkpoint", "load_checkpoint",
           "load_into_registry"]

MAGIC = b"TVOD"
VERSION = 1


def save_checkpoint(path, tensors: dict) -> None:
    """Write named arrays (or Tensors) to ``path``; names are sorted."""
    blobs = [struct.pack("<4sII", MAGIC, VERSION, len(tensors))]
    for name in sorted(tensors):
        data = getattr(tensors[name], "data", tensors[name])
        arr = np.asarray(data, dtype="<f4")
        if arr.ndim:  # ascontiguousarray would promote rank 0 to rank 1
            arr = np.ascontiguousarray(arr)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ContractError(f"tensor name too long: {len(encoded)} bytes")
        if arr.ndim > 0xFF:
            raise ContractError(f"tensor rank too high: {arr.ndim}")
        blobs.append(struct.pack("<H", len(encoded)))
        blobs.append(encoded)
        blobs.append(struct.pack("<B", arr.ndim))
        blobs.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        blobs.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(blobs))


class _Reader:
    def __init__(self, raw: bytes, path) -> None:
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise ParseError(self.path, f"byte {self.pos}",
                             f"truncated reading {what}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back into float32 arrays, keyed by name."""
    with open(path, "rb") as fh:
        raw = fh.read()
    r = _Reader(raw, path)
    magic, version, count = r.unpack("<4sII", "header")
    if magic != MAGIC:
        raise ParseError(path, "byte 0", f"bad magic {magic!r}")
    if version != VERSION:
        raise ParseError(path, "byte 4", f"unsupported format version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        try:
            name = r.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError(path, f"byte {r.pos - name_len}",
                             "invalid UTF-8 name") from None
        (rank,) = r.unpack("<B", f"rank of {name!r}")
        shape = r.unpack(f"<{rank}I", f"shape of {name!r}")
        n_values = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = r.take(4 * n_values, f"payload of {name!r}")
        if name in out:
            raise ParseError(path, f"byte {r.pos}", f"duplicate tensor name {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if r.pos != len(raw):
        raise ParseError(path, f"byte {r.pos}",
                         f"{len(raw) - r.pos} trailing bytes")
    return out


def load_into_registry(path, reg: ParamRegistry) -> None:
    """Load a checkpoint into an existing registry, strictly.

    Every stored tensor must match a registered parameter of the same shape
    and vice versa; data is copied bit-for-bit.
    """
    stored = load_checkpoint(path)
    params = reg.named()
    missing = sorted(set(params) - set(stored))
    extra = sorted(set(stored) - set(params))
    if missing or extra:
        raise ContractError(
            f"checkpoint/model mismatch: missing {missing[:3]}, extra {extra[:3]}"
        )
    for name, arr in stored.items():
        if params[name].data.shape != arr.shape:
            raise ContractError(
                f"shape mismatch for {name!r}: model {params[name].data.shape}, "
                f"checkpoint {arr.shape}"
            )
        params[name].data = arr.astype(np.float32, copy=False)
