"""Little-endian binary record helpers used by every checkpoint format.

All float payloads are float32, row-major.  A *tensor record* is
``u32 ndim, u32 dims[ndim], f32 data[prod(dims)]``; a *string* is
``u16 length, utf-8 bytes``.
"""
from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import ValidationError


def write_magic(f: BinaryIO, magic: bytes) -> None:
    assert len(magic) == 4
    f.write(magic)


def read_magic(f: BinaryIO, expected: bytes) -> None:
    got = f.read(4)
    if got != expected:
        raise ValidationError(f"bad magic {got!r}, expected {expected!r}")


def write_u32(f: BinaryIO, value: int) -> None:
    f.write(struct.pack("<I", int(value)))


def read_u32(f: BinaryIO) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise ValidationError("truncated file")
    return struct.unpack("<I", raw)[0]


def write_f32(f: BinaryIO, value: float) -> None:
    f.write(struct.pack("<f", float(value)))


def read_f32(f: BinaryIO) -> float:
    raw = f.read(4)
    if len(raw) != 4:
        raise ValidationError("truncated file")
    return struct.unpack("<f", raw)[0]


def write_str(f: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)


def read_str(f: BinaryIO) -> str:
    raw = f.read(2)
    if len(raw) != 2:
        raise ValidationError("truncated file")
    (n,) = struct.unpack("<H", raw)
    return f.read(n).decode("utf-8")


def write_array(f: BinaryIO, arr, dtype="<f4") -> None:
    """Raw row-major payload without a shape prefix."""
    f.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def read_array(f: BinaryIO, shape, dtype="<f4") -> np.ndarray:
    dt = np.dtype(dtype)
    count = int(np.prod(shape)) if len(shape) else 1
    raw = f.read(count * dt.itemsize)
    if len(raw) != count * dt.itemsize:
        raise ValidationError("truncated file")
    return np.frombuffer(raw, dtype=dt).reshape(shape).copy()


def write_tensor(f: BinaryIO, arr) -> None:
    arr = np.asarray(arr, dtype="<f4")
    write_u32(f, arr.ndim)
    for dim in arr.shape:
        write_u32(f, dim)
    write_array(f, arr)


def read_tensor(f: BinaryIO) -> np.ndarray:
    ndim = read_u32(f)
    shape = tuple(read_u32(f) for _ in range(ndim))
    return read_array(f, shape)


def write_named_tensors(path, magic: bytes, tensors: dict) -> None:
    """``magic, u32 count`` then per entry ``string name, tensor record``."""
    with open(path, "wb") as f:
        write_magic(f, magic)
        write_u32(f, len(tensors))
        for name in sorted(tensors):
            write_str(f, name)
            write_tensor(f, tensors[name])


def read_named_tensors(path, magic: bytes) -> dict:
    with open(path, "rb") as f:
        read_magic(f, magic)
        count = read_u32(f)
        return {read_str(f): read_tensor(f) for _ in range(count)}
