"""Binary tensor container and named weight-store files.

Tensor container layout (all little-endian)::

    b"CDMT"              4 bytes magic
    version              uint32 (currently 1)
    dtype code           uint32 (0 = float64, 1 = float32)
    rank                 uint32
    extents              rank x uint64
    payload              prod(extents) values, row-major

A weight store is a concatenation of records ``(name_length: uint32,
utf-8 name, tensor container)`` running to end of file.
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"CDMT"
VERSION = 1
_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


class ContainerError(ValueError):
    """Malformed or unsupported container bytes."""


def _dtype_code(arr: np.ndarray) -> int:
    if arr.dtype == np.float64:
        return 0
    if arr.dtype == np.float32:
        return 1
    raise ContainerError(f"unsupported dtype {arr.dtype}")


def write_tensor(stream: BinaryIO, arr) -> None:
    arr = np.asarray(getattr(arr, "data", arr))
    if arr.dtype not in (np.float64, np.float32):
        arr = arr.astype(np.float64)
    code = _dtype_code(arr)
    stream.write(MAGIC)
    stream.write(struct.pack("<III", VERSION, code, arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    stream.write(np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes())


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise ContainerError(f"truncated container: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(stream: BinaryIO) -> np.ndarray:
    if _read_exact(stream, 4) != MAGIC:
        raise ContainerError("bad magic, not a CDMT container")
    version, code, rank = struct.unpack("<III", _read_exact(stream, 12))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    if code not in _CODES:
        raise ContainerError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(stream, 8 * rank)) if rank else ()
    dtype = _CODES[code]
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(stream, count * dtype.itemsize), dtype=dtype)
    return data.reshape(shape).astype(dtype.newbyteorder("="))


def save_tensor(path: str | os.PathLike, arr) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = read_tensor(fh)
        if fh.read(1):
            raise ContainerError(f"{path}: trailing bytes after tensor payload")
    return arr


def tensor_bytes(arr) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def save_store(path: str | os.PathLike, tensors: Mapping[str, object]) -> None:
    """Write named tensors in insertion order."""
    with open(path, "wb") as fh:
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            write_tensor(fh, arr)


def load_store(path: str | os.PathLike) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise ContainerError("truncated record header")
            (n,) = struct.unpack("<I", head)
            name = _read_exact(fh, n).decode("utf-8")
            if name in out:
                raise ContainerError(f"duplicate record {name!r}")
            out[name] = read_tensor(fh)
    return out
