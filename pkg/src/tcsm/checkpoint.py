"""Flat binary container for named float64 tensors.

Layout, all little-endian: magic ``TCSM``, u32 format version, u32 tensor
count; then per tensor a u32 name length, the UTF-8 name, a u64 rank, one u64
extent per axis, and the raw float64 payload in C order.  Writing the same
mapping twice produces identical bytes; reading validates every field and
rejects truncated or trailing data.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import CorruptFileError, NumericError

MAGIC = b"TCSM"
VERSION = 1

# hard ceilings so a corrupt length field cannot demand absurd work
_MAX_NAME_BYTES = 4096
_MAX_RANK = 32


def save_tensors(path, tensors: dict) -> None:
    """Write a name -> Tensor/ndarray mapping in insertion order."""
    payload = bytearray()
    payload += struct.pack("<4sII", MAGIC, VERSION, len(tensors))
    for name, value in tensors.items():
        arr = np.asarray(value.data if isinstance(value, Tensor) else value,
                         dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"refusing to save non-finite tensor {name!r}")
        encoded = name.encode("utf-8")
        if len(encoded) > _MAX_NAME_BYTES:
            raise CorruptFileError(f"tensor name too long: {len(encoded)} bytes")
        payload += struct.pack("<I", len(encoded))
        payload += encoded
        payload += struct.pack("<Q", arr.ndim)
        payload += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        payload += np.ascontiguousarray(arr).astype("<f8", copy=False).tobytes()
    Path(path).write_bytes(bytes(payload))


def load_tensors(path) -> dict[str, Tensor]:
    """Read a container written by ``save_tensors``; tensors come back with
    requires_grad set so they can be trained further directly."""
    path = Path(path)
    data = path.read_bytes()
    offset = 0

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise CorruptFileError(f"{path}: truncated while reading {what}")
        chunk = data[offset : offset + n]
        offset += n
        return chunk

    magic, version, count = struct.unpack("<4sII", take(12, "header"))
    if magic != MAGIC:
        raise CorruptFileError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CorruptFileError(f"{path}: unsupported version {version}")

    tensors: dict[str, Tensor] = {}
    for index in range(count):
        (name_len,) = struct.unpack("<I", take(4, f"name length of tensor {index}"))
        if name_len > _MAX_NAME_BYTES:
            raise CorruptFileError(f"{path}: implausible name length {name_len}")
        try:
            name = take(name_len, f"name of tensor {index}").decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptFileError(f"{path}: tensor {index} name is not UTF-8") from None
        if name in tensors:
            raise CorruptFileError(f"{path}: duplicate tensor name {name!r}")
        (rank,) = struct.unpack("<Q", take(8, f"rank of {name!r}"))
        if rank > _MAX_RANK:
            raise CorruptFileError(f"{path}: implausible rank {rank} for {name!r}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, f"extents of {name!r}"))
        n_elements = 1
        for extent in shape:
            n_elements *= extent
        raw = take(8 * n_elements, f"data of {name!r}")
        arr = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise CorruptFileError(f"{path}: non-finite values in tensor {name!r}")
        tensors[name] = Tensor(arr, requires_grad=True)
    if offset != len(data):
        raise CorruptFileError(f"{path}: {len(data) - offset} trailing bytes")
    return tensors
