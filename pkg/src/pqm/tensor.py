"""Dense-matrix helpers, the seeded RNG, and little-endian binary primitives.

Matrices are plain 2-D numpy arrays. Storage is float32; products are
accumulated in float64 and rounded back to the storage dtype of the inputs.

The RNG is numpy's PCG64 bit generator (a permuted congruential generator
with 128-bit state). Its raw stream is specified bit-for-bit and is the same
on every platform. Normal variates come from the Box-Muller transform applied
to pairs of uniform doubles, not from numpy's ziggurat sampler, so the
transform is fixed by this module.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

__all__ = [
    "DimensionError",
    "Rng",
    "derive_seed",
    "matmul",
    "gaussian_fill",
    "check_finite",
    "BinaryWriter",
    "BinaryReader",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def derive_seed(*parts: object) -> int:
    """Stable 64-bit seed from arbitrary printable parts (SHA-256 based)."""
    key = "\x1f".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


class Rng:
    """Single-owner random stream: PCG64 seeded with a 64-bit integer."""

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, *parts: object) -> "Rng":
        """Independent stream keyed by ``parts``; does not advance this one."""
        return Rng(derive_seed(self.seed, *parts))

    def uniform(self, size: int | tuple[int, ...]) -> np.ndarray:
        """Doubles in [0, 1)."""
        return self._gen.random(size)

    def normal(self, size: int | tuple[int, ...], mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)  # (0, 1], keeps log finite
        u2 = self._gen.random(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(theta)
        z[1::2] = radius * np.sin(theta)
        return (mean + std * z[:n]).reshape(shape)

    def integers(self, low: int, high: int, size: int | tuple[int, ...] | None = None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def check_finite(m: np.ndarray, what: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{what} contains NaN or Inf")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` with float64 accumulation, returned in the inputs' dtype."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    out_dtype = np.result_type(a.dtype, b.dtype, np.float32)
    out = np.matmul(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False))
    with np.errstate(over="ignore"):
        out = out.astype(out_dtype, copy=False)
    return check_finite(out, "matmul result")


def gaussian_fill(m: np.ndarray, mean: float, std: float, rng: Rng) -> np.ndarray:
    """New array shaped like ``m`` with i.i.d. N(mean, std**2) entries."""
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    dtype = m.dtype if np.issubdtype(m.dtype, np.floating) else np.float32
    return rng.normal(m.shape, mean, std).astype(dtype)


class BinaryWriter:
    """Append-only little-endian byte buffer."""

    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, v: int) -> None:
        self._parts.append(struct.pack("<B", v))

    def u32(self, v: int) -> None:
        self._parts.append(struct.pack("<I", v))

    def u64(self, v: int) -> None:
        self._parts.append(struct.pack("<Q", v))

    def f32(self, v: float) -> None:
        self._parts.append(struct.pack("<f", v))

    def raw(self, data: bytes) -> None:
        self._parts.append(bytes(data))

    def string(self, s: str) -> None:
        data = s.encode("utf-8")
        self.u32(len(data))
        self.raw(data)

    def f32_array(self, arr: np.ndarray) -> None:
        self.raw(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class BinaryReader:
    """Cursor over a little-endian byte buffer; short reads raise EOFError."""

    def __init__(self, data: bytes):
        self._data = memoryview(data)
        self.pos = 0

    def _take(self, n: int) -> memoryview:
        if n < 0 or self.pos + n > len(self._data):
            raise EOFError(f"need {n} bytes at offset {self.pos}, buffer has {len(self._data)}")
        chunk = self._data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return struct.unpack("<B", self._take(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self._take(4))[0]

    def raw(self, n: int) -> bytes:
        return bytes(self._take(n))

    def string(self) -> str:
        return self.raw(self.u32()).decode("utf-8")

    def f32_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self._take(4 * count), dtype="<f4").astype(np.float32)

    def at_end(self) -> bool:
        return self.pos == len(self._data)
