"""k-bit NormalFloat codebooks and block-wise absmax quantisation.

A weight matrix is flattened in row-major order and cut into consecutive
blocks of ``block_size`` elements (the last block may be short). Each block
is divided by its absolute maximum, every normalised value is snapped to the
nearest codebook level, and the level indices are bit-packed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.special import ndtri

__all__ = [
    "CorruptDataError",
    "NormalFloatCodebook",
    "QuantisedMatrix",
    "QuantStats",
    "tail_offset",
    "build_codebook",
    "quantise_block",
    "quantise_matrix",
    "dequantise",
    "pack_codes",
    "unpack_codes",
    "compression_stats",
    "QUANT_HEADER_BYTES",
]

# rows u32, cols u32, k u8, block_size u32
QUANT_HEADER_BYTES = 13


class CorruptDataError(ValueError):
    """Packed data that cannot have been produced by this codec."""


@dataclass(frozen=True)
class NormalFloatCodebook:
    k: int
    levels: np.ndarray  # float64, ascending, length 2**k
    zero_code: int

    @property
    def size(self) -> int:
        return 1 << self.k

    def widest_gap(self) -> float:
        return float(np.max(np.diff(self.levels)))


def tail_offset(k: int) -> float:
    """Probability trimmed from each tail before taking normal quantiles."""
    return 0.5 * (1.0 / 2 ** (k + 1) + 1.0 / (2 ** (k + 1) - 2))


@lru_cache(maxsize=None)
def build_codebook(k: int = 4) -> NormalFloatCodebook:
    """Asymmetric NormalFloat levels for ``k`` bits.

    The negative half holds ``2**(k-1)`` quantiles of N(0, 1) at evenly spaced
    probabilities from ``tail_offset(k)`` to 0.5, the positive half holds
    ``2**(k-1) + 1`` quantiles from 0.5 to ``1 - tail_offset(k)``. Both halves
    share the quantile at 0.5, which is exactly zero, so the union has
    ``2**k`` levels with one more positive level than negative ones. The
    union is divided by its largest magnitude.
    """
    if not isinstance(k, (int, np.integer)) or not 2 <= k <= 8:
        raise ValueError(f"bits must be an integer in [2, 8], got {k!r}")
    k = int(k)
    delta = tail_offset(k)
    half = 2 ** (k - 1)
    negative = ndtri(np.linspace(delta, 0.5, half))
    positive = ndtri(np.linspace(0.5, 1.0 - delta, half + 1))
    levels = np.concatenate([negative[:-1], [0.0], positive[1:]])
    levels = levels / np.max(np.abs(levels))
    # ndtri(delta) and ndtri(1 - delta) agree in magnitude only to rounding;
    # the normalised extremes are +-1 by construction.
    levels[0], levels[-1] = -1.0, 1.0
    levels.setflags(write=False)
    zero_code = int(np.flatnonzero(levels == 0.0)[0])
    return NormalFloatCodebook(k=k, levels=levels, zero_code=zero_code)


def _nearest_codes(normalised: np.ndarray, cb: NormalFloatCodebook) -> np.ndarray:
    """Index of the nearest level; equidistant values take the lower index."""
    levels = cb.levels
    hi = np.clip(np.searchsorted(levels, normalised, side="left"), 1, cb.size - 1)
    lo = hi - 1
    take_lo = np.abs(normalised - levels[lo]) <= np.abs(normalised - levels[hi])
    return np.where(take_lo, lo, hi).astype(np.uint8)


def encode(values, scale: float, cb: NormalFloatCodebook) -> np.ndarray:
    """Codes of ``values / scale`` under a caller-chosen scale.

    Values beyond ``scale`` in magnitude land on the end levels.
    """
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("values contain NaN or Inf")
    return _nearest_codes(v / float(scale), cb)


def quantise_block(values, cb: NormalFloatCodebook) -> tuple[np.ndarray, np.float32]:
    """Codes and absmax scale for one block of values."""
    v = np.asarray(values, dtype=np.float32).ravel()
    if v.size == 0:
        raise ValueError("cannot quantise an empty block")
    if not np.all(np.isfinite(v)):
        raise ValueError("block contains NaN or Inf")
    scale = np.float32(np.max(np.abs(v)))
    if scale == 0:
        return np.full(v.size, cb.zero_code, dtype=np.uint8), scale
    return _nearest_codes(v.astype(np.float64) / np.float64(scale), cb), scale


@dataclass(frozen=True)
class QuantisedMatrix:
    rows: int
    cols: int
    k: int
    block_size: int
    scales: np.ndarray  # float32, one per block
    packed: bytes

    @property
    def size(self) -> int:
        return self.rows * self.cols

    @property
    def num_blocks(self) -> int:
        return math.ceil(self.size / self.block_size)

    def codes(self) -> np.ndarray:
        return unpack_codes(self.packed, self.k, self.size)

    @property
    def nbytes(self) -> int:
        """Serialised size: header, scales, packed codes."""
        return QUANT_HEADER_BYTES + 4 * self.scales.size + len(self.packed)


def quantise_matrix(m: np.ndarray, block_size: int = 64, cb: NormalFloatCodebook | None = None) -> QuantisedMatrix:
    cb = cb or build_codebook(4)
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    if block_size < 1:
        raise ValueError(f"block_size must be >= 1, got {block_size}")
    flat = np.ascontiguousarray(m, dtype=np.float32).ravel()
    if flat.size == 0:
        raise ValueError("cannot quantise an empty matrix")
    if not np.all(np.isfinite(flat)):
        raise ValueError("matrix contains NaN or Inf")

    n_blocks = math.ceil(flat.size / block_size)
    padded = np.zeros(n_blocks * block_size, dtype=np.float32)
    padded[: flat.size] = flat
    blocks = padded.reshape(n_blocks, block_size)
    # zero padding cannot raise a block's absmax
    scales = np.max(np.abs(blocks), axis=1)
    safe = np.where(scales == 0, np.float32(1), scales).astype(np.float64)
    codes = _nearest_codes(blocks.astype(np.float64) / safe[:, None], cb)
    codes[scales == 0] = cb.zero_code
    codes = codes.ravel()[: flat.size]
    return QuantisedMatrix(
        rows=m.shape[0],
        cols=m.shape[1],
        k=cb.k,
        block_size=block_size,
        scales=scales.astype(np.float32),
        packed=pack_codes(codes, cb.k),
    )


def dequantise(q: QuantisedMatrix, cb: NormalFloatCodebook | None = None) -> np.ndarray:
    cb = cb or build_codebook(q.k)
    if cb.k != q.k:
        raise CorruptDataError(f"matrix uses {q.k}-bit codes, codebook has {cb.k} bits")
    if q.scales.size != q.num_blocks:
        raise CorruptDataError(f"expected {q.num_blocks} scales, found {q.scales.size}")
    codes = q.codes()
    if codes.size and int(codes.max()) >= cb.size:
        raise CorruptDataError("code outside the codebook")
    block_scale = np.repeat(q.scales.astype(np.float64), q.block_size)[: q.size]
    values = cb.levels[codes] * block_scale
    return values.astype(np.float32).reshape(q.rows, q.cols)


def pack_codes(codes, k: int) -> bytes:
    """LSB-first bit stream; for k=4 the earlier code sits in the low nibble."""
    codes = np.asarray(codes, dtype=np.int64).ravel()
    if codes.size and (codes.min() < 0 or codes.max() >= (1 << k)):
        raise ValueError(f"codes must lie in [0, {1 << k})")
    if k == 8:
        return codes.astype(np.uint8).tobytes()
    bits = ((codes[:, None] >> np.arange(k)) & 1).astype(np.uint8).ravel()
    return np.packbits(bits, bitorder="little").tobytes()


def unpack_codes(data: bytes, k: int, count: int) -> np.ndarray:
    expected = math.ceil(count * k / 8)
    if len(data) != expected:
        raise CorruptDataError(f"{count} codes of {k} bits need {expected} bytes, got {len(data)}")
    raw = np.frombuffer(data, dtype=np.uint8)
    if k == 8:
        return raw.copy()
    bits = np.unpackbits(raw, bitorder="little")
    if bits[count * k :].any():
        raise CorruptDataError("non-zero padding bits after the last code")
    bits = bits[: count * k].reshape(count, k).astype(np.uint8)
    return (bits << np.arange(k, dtype=np.uint8)).sum(axis=1, dtype=np.uint16).astype(np.uint8)


@dataclass(frozen=True)
class QuantStats:
    raw_bytes: int
    quantised_bytes: int

    @property
    def ratio(self) -> float:
        return self.raw_bytes / self.quantised_bytes

    def as_dict(self) -> dict:
        return {"raw_bytes": self.raw_bytes, "quantised_bytes": self.quantised_bytes, "ratio": self.ratio}


def compression_stats(
    raw_elements: int,
    quantised: QuantisedMatrix | Sequence[QuantisedMatrix],
    unquantised_bytes: int = 0,
    header_bytes: int = 0,
) -> QuantStats:
    """Byte accounting for FP32 storage versus packed codes plus FP32 scales.

    ``quantised`` may be one matrix or several; ``raw_elements`` must equal
    their total element count. ``header_bytes`` is any fixed per-artifact
    overhead to charge to the quantised side.
    """
    mats = [quantised] if isinstance(quantised, QuantisedMatrix) else list(quantised)
    if sum(q.size for q in mats) != raw_elements:
        raise ValueError("raw_elements does not match the quantised matrices")
    raw = 4 * raw_elements + unquantised_bytes
    packed = sum(math.ceil(q.k * q.size / 8) + 4 * q.num_blocks for q in mats)
    return QuantStats(raw_bytes=raw, quantised_bytes=packed + unquantised_bytes + header_bytes)
