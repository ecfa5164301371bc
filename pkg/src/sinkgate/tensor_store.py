"""Dense f32 tensors, seeded random generation and the SNKT binary format.

Tensors are plain ``numpy.ndarray`` objects of dtype float32. The SNKT file
layout (all little-endian, no padding)::

    offset  size        field
    0       4           magic  b"SNKT"
    4       4           u32 version (1)
    8       4           u32 dtype code (1 = f32)
    12      4           u32 ndim
    16      8 * ndim    u64 dims
    ...     4 * prod    raw row-major f32 payload
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"SNKT"
VERSION = 1
DTYPE_F32 = 1

_HEADER = struct.Struct("<4sIII")


class SnktFormatError(ValueError):
    """Raised when a file is not a well-formed SNKT tensor.

    ``field`` names the offending part of the file (``magic``, ``version``,
    ``dtype``, ``ndim``, ``dims``, ``payload``).
    """

    def __init__(self, path, field: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = str(path)
        self.field = field


def as_tensor(data, dims: Sequence[int] | None = None) -> np.ndarray:
    """Build a C-contiguous float32 tensor, checking element count against ``dims``."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=np.float32))
    if dims is not None:
        dims = tuple(int(d) for d in dims)
        if any(d <= 0 for d in dims):
            raise ValueError(f"dims must be positive, got {dims}")
        if arr.size != int(np.prod(dims)):
            raise ValueError(f"data has {arr.size} elements, dims {dims} need {int(np.prod(dims))}")
        arr = arr.reshape(dims)
    return arr


def encode_tensor(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    if t.dtype != np.float32:
        raise TypeError(f"only float32 tensors are supported, got {t.dtype}")
    if t.ndim == 0 or any(d == 0 for d in t.shape):
        raise ValueError(f"tensor must have positive extents, got shape {t.shape}")
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_F32, t.ndim)
    dims = struct.pack(f"<{t.ndim}Q", *t.shape)
    return header + dims + np.ascontiguousarray(t, dtype="<f4").tobytes()


def decode_tensor(buf: bytes, path="<bytes>") -> np.ndarray:
    if len(buf) < 4:
        raise SnktFormatError(path, "magic", "bad magic: file shorter than 4 bytes")
    if buf[:4] != MAGIC:
        raise SnktFormatError(path, "magic", f"bad magic {buf[:4]!r}")
    if len(buf) < _HEADER.size:
        raise SnktFormatError(path, "version", "truncated header")
    _, version, dtype, ndim = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise SnktFormatError(path, "version", f"unsupported version {version}")
    if dtype != DTYPE_F32:
        raise SnktFormatError(path, "dtype", f"unsupported dtype code {dtype}")
    if ndim == 0:
        raise SnktFormatError(path, "ndim", "ndim must be >= 1")
    dims_end = _HEADER.size + 8 * ndim
    if len(buf) < dims_end:
        raise SnktFormatError(path, "dims", "truncated dims")
    dims = struct.unpack_from(f"<{ndim}Q", buf, _HEADER.size)
    if any(d == 0 for d in dims):
        raise SnktFormatError(path, "dims", f"zero extent in dims {dims}")
    expected = 4 * int(np.prod(dims, dtype=np.uint64))
    payload = len(buf) - dims_end
    if payload < expected:
        raise SnktFormatError(path, "payload", f"short payload: {payload} bytes, expected {expected}")
    if payload > expected:
        raise SnktFormatError(path, "payload", f"trailing bytes: {payload} bytes, expected {expected}")
    arr = np.frombuffer(buf, dtype="<f4", offset=dims_end).astype(np.float32, copy=True)
    return arr.reshape(dims)


def write_tensor(path: str | os.PathLike, t: np.ndarray) -> None:
    data = encode_tensor(t)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write tensor to {path}: {exc.strerror}") from exc


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(exc.errno, f"cannot read tensor from {path}: {exc.strerror}") from exc
    return decode_tensor(buf, path)


class Rng:
    """Seeded generator on numpy's PCG64 stream.

    Uniforms come straight from PCG64 (53-bit doubles in [0, 1)). Normals use
    the Box-Muller transform on pairs of those uniforms, so the normal stream
    is fixed by this module rather than by numpy's ziggurat internals.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, shape) -> np.ndarray:
        shape = _shape(shape)
        out = self._gen.random(shape, dtype=np.float64).astype(np.float32)
        # float64 -> float32 can round 1 - 2**-53 up to 1.0
        np.minimum(out, np.float32(np.nextafter(np.float32(1), np.float32(0))), out=out)
        return out

    def normal(self, shape) -> np.ndarray:
        shape = _shape(shape)
        n = int(np.prod(shape))
        pairs = (n + 1) // 2
        u1 = self._gen.random(pairs)
        u2 = self._gen.random(pairs)
        radius = np.sqrt(-2.0 * np.log1p(-u1))  # 1 - u1 in (0, 1]
        angle = 2.0 * np.pi * u2
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        return z[:n].astype(np.float32).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)


def _shape(shape) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    shape = tuple(int(d) for d in shape)
    if any(d < 0 for d in shape):
        raise ValueError(f"invalid dims {shape}")
    return shape


def random_tensor(dims, seed: int, dist: str = "standard-normal") -> np.ndarray:
    """Deterministic random tensor; ``dist`` is ``"uniform01"`` or ``"standard-normal"``."""
    dims = _shape(dims)
    if not dims or any(d == 0 for d in dims):
        raise ValueError(f"dims must be positive, got {dims}")
    rng = Rng(seed)
    if dist == "uniform01":
        return rng.uniform(dims)
    if dist == "standard-normal":
        return rng.normal(dims)
    raise ValueError(f"unknown distribution {dist!r}")
