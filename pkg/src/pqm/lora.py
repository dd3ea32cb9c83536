"""Low-rank adapters over frozen (possibly dequantised) linear maps.

Column convention throughout: a base weight ``w0`` is ``d x k_dim`` and maps
an input ``x`` of shape ``k_dim x batch`` to ``d x batch``. The adapter adds
``(alpha / r) * b @ a`` with ``a`` of shape ``r x k_dim`` and ``b`` of shape
``d x r``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError, Rng, gaussian_fill, matmul

__all__ = [
    "LoraAdapter",
    "AdapterSet",
    "init_adapter",
    "lora_forward",
    "lora_backward",
    "merge",
    "param_count",
]


@dataclass
class LoraAdapter:
    a: np.ndarray  # r x k_dim
    b: np.ndarray  # d x r
    alpha: float

    def __post_init__(self) -> None:
        r = self.a.shape[0]
        if self.b.shape[1] != r:
            raise DimensionError(f"a has rank {r} but b has {self.b.shape[1]} columns")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def d(self) -> int:
        return self.b.shape[0]

    @property
    def k_dim(self) -> int:
        return self.a.shape[1]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def num_params(self) -> int:
        return self.a.size + self.b.size

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.a.copy(), self.b.copy(), self.alpha)


@dataclass
class AdapterSet:
    """One speaker's adapters, keyed by layer name."""

    speaker: str
    adapters: dict[str, LoraAdapter] = field(default_factory=dict)

    def __getitem__(self, layer: str) -> LoraAdapter:
        return self.adapters[layer]

    def __contains__(self, layer: str) -> bool:
        return layer in self.adapters

    def copy(self, speaker: str | None = None) -> "AdapterSet":
        return AdapterSet(speaker or self.speaker, {k: v.copy() for k, v in self.adapters.items()})

    @property
    def num_params(self) -> int:
        return sum(ad.num_params for ad in self.adapters.values())


def init_adapter(d: int, k_dim: int, r: int, alpha: float | None = None, rng: Rng | None = None) -> LoraAdapter:
    """Gaussian ``a`` with variance 1/r, zero ``b``; ``alpha`` defaults to ``r``."""
    if r < 1 or r > min(d, k_dim) / 2:
        raise ValueError(f"rank {r} must satisfy 1 <= r <= min({d}, {k_dim}) / 2")
    if rng is None:
        raise ValueError("init_adapter needs an explicit Rng")
    a = gaussian_fill(np.zeros((r, k_dim), np.float32), 0.0, 1.0 / math.sqrt(r), rng)
    b = np.zeros((d, r), np.float32)
    return LoraAdapter(a, b, float(r if alpha is None else alpha))


def _check(w0: np.ndarray, ad: LoraAdapter, x: np.ndarray | None = None) -> None:
    if w0.shape != (ad.d, ad.k_dim):
        raise DimensionError(f"adapter is {ad.d}x{ad.k_dim}, base weight is {w0.shape[0]}x{w0.shape[1]}")
    if x is not None and (x.ndim != 2 or x.shape[0] != ad.k_dim):
        raise DimensionError(f"input must have {ad.k_dim} rows, got shape {x.shape}")


def lora_forward(w0_deq: np.ndarray, ad: LoraAdapter, x: np.ndarray) -> np.ndarray:
    _check(w0_deq, ad, x)
    base = matmul(w0_deq, x)
    low_rank = matmul(ad.b, matmul(ad.a, x))
    return base + np.asarray(ad.scaling, base.dtype) * low_rank


def merge(w0_deq: np.ndarray, ad: LoraAdapter) -> np.ndarray:
    _check(w0_deq, ad)
    delta = matmul(ad.b, ad.a)
    return w0_deq + np.asarray(ad.scaling, delta.dtype) * delta


def lora_backward(
    w0_deq: np.ndarray, ad: LoraAdapter, x: np.ndarray, gy: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients ``(ga, gb, gx)`` of a scalar loss given ``gy = dL/dy``.

    The base weight is frozen, so no gradient is formed for it.
    """
    _check(w0_deq, ad, x)
    if gy.shape != (ad.d, x.shape[1]):
        raise DimensionError(f"upstream gradient must be {ad.d}x{x.shape[1]}, got {gy.shape}")
    s = ad.scaling
    ax = matmul(ad.a, x)
    bt_gy = matmul(ad.b.T, gy)
    gb = s * matmul(gy, ax.T)
    ga = s * matmul(bt_gy, x.T)
    gx = matmul(w0_deq.T, gy) + s * matmul(ad.a.T, bt_gy)
    return ga, gb, gx


def param_count(l_lora: int, d_model: int, r: int) -> int:
    """Adapter parameters for ``l_lora`` square ``d_model x d_model`` attach points."""
    if min(l_lora, d_model, r) < 1:
        raise ValueError("all arguments must be positive")
    return 2 * l_lora * d_model * r
