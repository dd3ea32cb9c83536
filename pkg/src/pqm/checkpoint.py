"""Binary model checkpoints and per-speaker adapter files (little-endian).

Checkpoint::

    b"PQM1"
    u32 vocab, u32 classes, u32 d_model, u32 n_layers
    manifest, per layer:   str name, u8 kind, u32 rows, u32 cols,
                           u8 quantised, u8 has_bias, u8 lora_attached
    sections, per layer:   FP32 weight (rows*cols f32)
                           or {u32 rows, u32 cols, u8 k, u32 block_size,
                               f32 scales[ceil(rows*cols/block_size)],
                               packed codes[ceil(rows*cols*k/8)]}
                           then bias (rows f32) if has_bias

Adapter file::

    b"PQMA"
    str speaker, u32 n_adapters
    per adapter: str layer_id, u32 d, u32 k_dim, u32 r, f32 alpha,
                 a (r*k_dim f32), b (d*r f32)

Strings are a u32 byte length followed by UTF-8 bytes.
"""

from __future__ import annotations

import hashlib
import math
from pathlib import Path

import numpy as np

from .lora import AdapterSet, LoraAdapter
from .nfquant import QuantisedMatrix
from .tensor import BinaryReader, BinaryWriter
from .toymodel import KINDS, Layer, ToyModel

MODEL_MAGIC = b"PQM1"
ADAPTER_MAGIC = b"PQMA"


class CheckpointError(ValueError):
    """Unreadable, truncated or inconsistent checkpoint data."""


def model_to_bytes(model: ToyModel) -> bytes:
    w = BinaryWriter()
    w.raw(MODEL_MAGIC)
    for v in (model.vocab, model.classes, model.d_model, len(model.layers)):
        w.u32(v)
    for layer in model.layers.values():
        rows, cols = layer.shape
        w.string(layer.name)
        w.u8(KINDS.index(layer.kind))
        w.u32(rows)
        w.u32(cols)
        w.u8(int(layer.quantised))
        w.u8(int(layer.bias is not None))
        w.u8(int(layer.lora_attached))
    for layer in model.layers.values():
        if layer.quantised:
            q = layer.qweight
            w.u32(q.rows)
            w.u32(q.cols)
            w.u8(q.k)
            w.u32(q.block_size)
            w.f32_array(q.scales)
            w.raw(q.packed)
        else:
            w.f32_array(layer.weight)
        if layer.bias is not None:
            w.f32_array(layer.bias)
    return w.getvalue()


def model_from_bytes(data: bytes) -> ToyModel:
    try:
        r = BinaryReader(data)
        if r.raw(4) != MODEL_MAGIC:
            raise CheckpointError("not a model checkpoint (bad magic)")
        vocab, classes, d_model, n_layers = r.u32(), r.u32(), r.u32(), r.u32()
        manifest = []
        for _ in range(n_layers):
            name, kind = r.string(), r.u8()
            if kind >= len(KINDS):
                raise CheckpointError(f"layer {name}: unknown kind code {kind}")
            manifest.append((name, KINDS[kind], r.u32(), r.u32(), bool(r.u8()), bool(r.u8()), bool(r.u8())))
        layers = {}
        for name, kind, rows, cols, quantised, has_bias, attached in manifest:
            weight = qweight = None
            if quantised:
                q_rows, q_cols, k, block = r.u32(), r.u32(), r.u8(), r.u32()
                if (q_rows, q_cols) != (rows, cols) or block < 1 or not 2 <= k <= 8:
                    raise CheckpointError(f"layer {name}: quantised header disagrees with manifest")
                n_blocks = math.ceil(rows * cols / block)
                scales = r.f32_array(n_blocks)
                packed = r.raw(math.ceil(rows * cols * k / 8))
                qweight = QuantisedMatrix(rows, cols, k, block, scales, packed)
                qweight.codes()  # validates padding
            else:
                weight = r.f32_array(rows * cols).reshape(rows, cols)
            bias = r.f32_array(rows) if has_bias else None
            layers[name] = Layer(name, kind, weight, bias, qweight, attached)
        if not r.at_end():
            raise CheckpointError("trailing bytes after the last layer")
    except EOFError as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    except CheckpointError:
        raise
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    return ToyModel(layers, vocab, classes, d_model)


def adapters_to_bytes(adapters: AdapterSet) -> bytes:
    w = BinaryWriter()
    w.raw(ADAPTER_MAGIC)
    w.string(adapters.speaker)
    w.u32(len(adapters.adapters))
    for layer_id in sorted(adapters.adapters):
        ad = adapters.adapters[layer_id]
        w.string(layer_id)
        w.u32(ad.d)
        w.u32(ad.k_dim)
        w.u32(ad.rank)
        w.f32(ad.alpha)
        w.f32_array(ad.a)
        w.f32_array(ad.b)
    return w.getvalue()


def adapters_from_bytes(data: bytes) -> AdapterSet:
    try:
        r = BinaryReader(data)
        if r.raw(4) != ADAPTER_MAGIC:
            raise CheckpointError("not an adapter file (bad magic)")
        speaker = r.string()
        out = {}
        for _ in range(r.u32()):
            layer_id = r.string()
            d, k_dim, rank, alpha = r.u32(), r.u32(), r.u32(), r.f32()
            a = r.f32_array(rank * k_dim).reshape(rank, k_dim)
            b = r.f32_array(d * rank).reshape(d, rank)
            out[layer_id] = LoraAdapter(a, b, float(alpha))
        if not r.at_end():
            raise CheckpointError("trailing bytes after the last adapter")
    except EOFError as exc:
        raise CheckpointError(f"truncated adapter file: {exc}") from exc
    except CheckpointError:
        raise
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    return AdapterSet(speaker, out)


def save_model(model: ToyModel, path: str | Path) -> int:
    data = model_to_bytes(model)
    Path(path).write_bytes(data)
    return len(data)


def load_model(path: str | Path) -> ToyModel:
    return model_from_bytes(Path(path).read_bytes())


def save_adapters(adapters: AdapterSet, path: str | Path) -> int:
    data = adapters_to_bytes(adapters)
    Path(path).write_bytes(data)
    return len(data)


def load_adapters(path: str | Path) -> AdapterSet:
    return adapters_from_bytes(Path(path).read_bytes())


def model_digest(model: ToyModel) -> str:
    return hashlib.sha256(model_to_bytes(model)).hexdigest()


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
