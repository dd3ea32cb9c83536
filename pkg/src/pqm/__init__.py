"""Personalisation of a NormalFloat-quantised sequence classifier with low-rank adapters."""

from .lora import AdapterSet, LoraAdapter, init_adapter, lora_backward, lora_forward, merge, param_count
from .nfquant import (
    CorruptDataError,
    NormalFloatCodebook,
    QuantisedMatrix,
    QuantStats,
    build_codebook,
    compression_stats,
    dequantise,
    encode,
    pack_codes,
    quantise_block,
    quantise_matrix,
    unpack_codes,
)
from .tensor import DimensionError, Rng, derive_seed

__version__ = "0.1.0"

__all__ = [
    "AdapterSet",
    "CorruptDataError",
    "DimensionError",
    "LoraAdapter",
    "NormalFloatCodebook",
    "QuantStats",
    "QuantisedMatrix",
    "Rng",
    "build_codebook",
    "compression_stats",
    "dequantise",
    "encode",
    "derive_seed",
    "init_adapter",
    "lora_backward",
    "lora_forward",
    "merge",
    "pack_codes",
    "param_count",
    "quantise_block",
    "quantise_matrix",
    "unpack_codes",
]
