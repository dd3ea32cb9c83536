"""A small token-sequence classifier with hand-written gradients.

Architecture, for a batch of token ids of shape ``(B, T)``::

    embed   E[tokens]                          (B, T, d)    embedding, vocab x d
    conv    depthwise width-3, same padding    (B, T, d)    kernel stored d x 3
    lin1    tanh(x W1^T + b1)                  (B, T, d)    linear, d x d
    lin2    tanh(x W2^T + b2)                  (B, T, d)    linear, d x d
    pool    mean over T                        (B, d)
    head    p Wh^T + bh                        (B, C)       linear, C x d

Every weight is a 2-D matrix so any of them can go through the NormalFloat
codec. Biases always stay FP32. Adapters may attach to ``lin1``/``lin2``.

Arithmetic runs in the dtype of the stored parameters: float32 for normal
models, float64 for copies made with ``ToyModel.astype(np.float64)`` (the
path used for finite-difference checks).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .lora import AdapterSet, LoraAdapter, init_adapter
from .nfquant import (
    QUANT_HEADER_BYTES,
    NormalFloatCodebook,
    QuantisedMatrix,
    QuantStats,
    build_codebook,
    compression_stats,
    dequantise,
    quantise_matrix,
)
from .tensor import Rng, gaussian_fill

__all__ = [
    "KINDS",
    "Layer",
    "ToyModel",
    "TrainConfig",
    "TrainResult",
    "build_model",
    "forward",
    "loss",
    "loss_and_grads",
    "quantise_model",
    "fresh_adapters",
    "train",
    "evaluate",
    "predict",
    "pseudo_label",
]

KINDS = ("embedding", "conv1d", "linear")
SELECTION_KINDS = {"embed": "embedding", "conv": "conv1d", "linear": "linear"}
ATTACH_POINTS = ("lin1", "lin2")


@dataclass
class Layer:
    name: str
    kind: str
    weight: np.ndarray | None
    bias: np.ndarray | None
    qweight: QuantisedMatrix | None = None
    lora_attached: bool = False
    _dense: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if (self.weight is None) == (self.qweight is None):
            raise ValueError(f"layer {self.name} needs exactly one of an FP32 or a quantised weight")
        if self.lora_attached and self.kind != "linear":
            raise ValueError("adapters attach to linear layers only")

    @property
    def quantised(self) -> bool:
        return self.qweight is not None

    @property
    def shape(self) -> tuple[int, int]:
        if self.qweight is not None:
            return (self.qweight.rows, self.qweight.cols)
        return self.weight.shape

    def dense(self) -> np.ndarray:
        """FP32 weight, dequantising once and caching for quantised layers."""
        if self.weight is not None:
            return self.weight
        if self._dense is None:
            self._dense = dequantise(self.qweight, build_codebook(self.qweight.k))
            self._dense.setflags(write=False)
        return self._dense

    @property
    def num_params(self) -> int:
        rows, cols = self.shape
        return rows * cols + (0 if self.bias is None else self.bias.size)


@dataclass
class ToyModel:
    layers: dict[str, Layer]
    vocab: int
    classes: int
    d_model: int

    def __getitem__(self, name: str) -> Layer:
        return self.layers[name]

    @property
    def quantised(self) -> bool:
        return any(layer.quantised for layer in self.layers.values())

    @property
    def num_params(self) -> int:
        return sum(layer.num_params for layer in self.layers.values())

    def census(self) -> dict[str, int]:
        out = dict.fromkeys(KINDS, 0)
        for layer in self.layers.values():
            out[layer.kind] += layer.num_params
        return out

    def copy(self) -> "ToyModel":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "ToyModel":
        """Copy with FP weights and biases cast to ``dtype``; quantised layers are kept."""
        out = self.copy()
        for layer in out.layers.values():
            if layer.weight is not None:
                layer.weight = layer.weight.astype(dtype)
            if layer.bias is not None:
                layer.bias = layer.bias.astype(dtype)
        return out


def build_model(d_model: int = 320, seed: int = 0, vocab: int = 64, classes: int = 10) -> ToyModel:
    """Deterministic random initialisation of the fixed architecture."""
    if d_model < 8:
        raise ValueError("d_model must be at least 8")
    rng = Rng(seed)
    d = d_model

    def gauss(shape, std, tag):
        return gaussian_fill(np.zeros(shape, np.float32), 0.0, std, rng.child(tag))

    conv = gauss((d, 3), 0.1, "conv")
    conv[:, 1] += 1.0
    layers = [
        Layer("embed", "embedding", gauss((vocab, d), 1.0, "embed"), None),
        Layer("conv", "conv1d", conv, np.zeros(d, np.float32)),
        Layer("lin1", "linear", gauss((d, d), 1.0 / np.sqrt(d), "lin1"), np.zeros(d, np.float32), lora_attached=True),
        Layer("lin2", "linear", gauss((d, d), 1.0 / np.sqrt(d), "lin2"), np.zeros(d, np.float32), lora_attached=True),
        Layer("head", "linear", gauss((classes, d), 1.0 / np.sqrt(d), "head"), np.zeros(classes, np.float32)),
    ]
    return ToyModel({layer.name: layer for layer in layers}, vocab, classes, d)


def _check_tokens(model: ToyModel, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] < 1:
        raise ValueError(f"tokens must have shape (batch, time), got {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.vocab):
        raise ValueError(f"token ids must lie in [0, {model.vocab})")
    return tokens


def _check_adapters(model: ToyModel, adapters: AdapterSet | None) -> None:
    if adapters is None:
        return
    for name, ad in adapters.adapters.items():
        if name not in model.layers or not model[name].lora_attached:
            raise ValueError(f"layer {name!r} does not accept adapters")
        if (ad.d, ad.k_dim) != model[name].shape:
            raise ValueError(f"adapter for {name} is {ad.d}x{ad.k_dim}, layer is {model[name].shape}")


def _compute_dtype(model: ToyModel, adapters: AdapterSet | None = None) -> np.dtype:
    arrays = [layer.dense() for layer in model.layers.values()]
    if adapters is not None:
        arrays += [m for ad in adapters.adapters.values() for m in (ad.a, ad.b)]
    return np.result_type(np.float32, *arrays)


def _conv(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    out = x * kernel[:, 1]
    out[:, 1:] += x[:, :-1] * kernel[:, 0]
    out[:, :-1] += x[:, 1:] * kernel[:, 2]
    return out + bias


def _linear(x: np.ndarray, w: np.ndarray, b: np.ndarray, ad: LoraAdapter | None):
    """``x W^T + b`` plus the full-precision low-rank path; returns (y, x A^T).

    Works on 2-D views: a 3-D ``@`` would run one small product per sequence.
    """
    flat = x.reshape(-1, x.shape[-1])
    y = flat @ w.T + b
    xa = None
    if ad is not None:
        xa = flat @ ad.a.astype(x.dtype, copy=False).T
        y += x.dtype.type(ad.scaling) * (xa @ ad.b.astype(x.dtype, copy=False).T)
    return y.reshape(x.shape[:-1] + (w.shape[0],)), xa


def _lora_add(base: np.ndarray, x: np.ndarray, ad: LoraAdapter | None):
    """``base`` plus the low-rank path of ``_linear``, for a precomputed base product."""
    if ad is None:
        return base, None
    flat = x.reshape(-1, x.shape[-1])
    xa = flat @ ad.a.astype(x.dtype, copy=False).T
    y = base.reshape(-1, base.shape[-1]) + x.dtype.type(ad.scaling) * (xa @ ad.b.astype(x.dtype, copy=False).T)
    return y.reshape(base.shape), xa


def frozen_prefix(model: ToyModel, tokens: np.ndarray, dtype) -> dict[str, np.ndarray]:
    """Conv output and the base part of the ``lin1`` pre-activation.

    Neither depends on adapters, so LoRA-only training computes them once
    per dataset and passes row slices to ``forward`` as ``_prefix``.
    """
    tokens = _check_tokens(model, tokens)
    L = model.layers

    def w(name):
        return L[name].dense().astype(dtype, copy=False)

    x1 = _conv(w("embed")[tokens], w("conv"), L["conv"].bias.astype(dtype, copy=False))
    a1, _ = _linear(x1, w("lin1"), L["lin1"].bias.astype(dtype, copy=False), None)
    return {"tokens": tokens, "x1": x1, "a1": a1}


def _slice_prefix(prefix: dict | None, idx) -> dict | None:
    return None if prefix is None else {k: v[idx] for k, v in prefix.items()}


def forward(
    model: ToyModel,
    tokens: np.ndarray,
    adapters: AdapterSet | None = None,
    _cache: dict | None = None,
    _prefix: dict | None = None,
) -> np.ndarray:
    """Logits of shape ``(B, classes)``."""
    tokens = _check_tokens(model, tokens)
    _check_adapters(model, adapters)
    ads = adapters.adapters if adapters is not None else {}
    dt = _compute_dtype(model, adapters)
    L = model.layers

    def w(name):
        return L[name].dense().astype(dt, copy=False)

    def b(name):
        return L[name].bias.astype(dt, copy=False)

    if _prefix is None:
        x0 = w("embed")[tokens]
        x1 = _conv(x0, w("conv"), b("conv"))
        a1, xa1 = _linear(x1, w("lin1"), b("lin1"), ads.get("lin1"))
    else:
        if _prefix["x1"].dtype != dt or not np.array_equal(_prefix["tokens"], tokens):
            raise ValueError("frozen prefix was computed for other inputs")
        x0, x1 = None, _prefix["x1"]
        a1, xa1 = _lora_add(_prefix["a1"], x1, ads.get("lin1"))
    h1 = np.tanh(a1)
    a2, xa2 = _linear(h1, w("lin2"), b("lin2"), ads.get("lin2"))
    h2 = np.tanh(a2)
    pooled = h2.mean(axis=1)
    logits = pooled @ w("head").T + b("head")
    if _cache is not None:
        _cache.update(tokens=tokens, x0=x0, x1=x1, h1=h1, h2=h2, xa1=xa1, xa2=xa2, pooled=pooled, w=w)
    return logits


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    if labels.shape != (logits.shape[0],):
        raise ValueError(f"expected {logits.shape[0]} labels, got shape {labels.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    value = -float(logp[np.arange(n), labels].mean())
    probs = np.exp(logp)
    probs[np.arange(n), labels] -= 1.0
    return value, probs / n


def loss(model: ToyModel, tokens: np.ndarray, labels: np.ndarray, adapters: AdapterSet | None = None, _prefix: dict | None = None) -> float:
    """Mean softmax cross-entropy."""
    value, _ = _cross_entropy(forward(model, tokens, adapters, _prefix=_prefix), np.asarray(labels))
    return value


def _linear_backward(dy, x, w, ad, xa, want_weight: bool, want_input: bool):
    """Row-convention gradients of ``x W^T + s (x A^T) B^T``."""
    grads = {}
    flat_dy = dy.reshape(-1, dy.shape[-1])
    flat_x = x.reshape(-1, x.shape[-1])
    if want_weight:
        grads["weight"] = flat_dy.T @ flat_x
        grads["bias"] = flat_dy.sum(axis=0)
    dx = None
    if ad is not None:
        s = dy.dtype.type(ad.scaling)
        dyb = flat_dy @ ad.b.astype(dy.dtype, copy=False)
        grads["b"] = s * (flat_dy.T @ xa)
        grads["a"] = s * (dyb.T @ flat_x)
        if want_input:
            dx = flat_dy @ w + s * (dyb @ ad.a.astype(dy.dtype, copy=False))
    elif want_input:
        dx = flat_dy @ w
    if dx is not None:
        dx = dx.reshape(dy.shape[:-1] + (w.shape[1],))
    return grads, dx


def loss_and_grads(
    model: ToyModel,
    tokens: np.ndarray,
    labels: np.ndarray,
    adapters: AdapterSet | None = None,
    mode: str = "full_finetune",
    _prefix: dict | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and gradients in the model's compute dtype.

    ``mode="full_finetune"`` returns ``{"<layer>.weight", "<layer>.bias"}``
    for every layer; ``mode="lora_only"`` returns ``{"<layer>.a", "<layer>.b"}``
    for every adapter and nothing for the frozen base.
    """
    if mode not in ("full_finetune", "lora_only"):
        raise ValueError(f"unknown mode {mode!r}")
    full = mode == "full_finetune"
    if full and model.quantised:
        raise ValueError("full fine-tuning needs an FP32 model")
    if not full and (adapters is None or not adapters.adapters):
        raise ValueError("lora_only needs adapters")
    labels = np.asarray(labels)
    cache: dict = {}
    if full and _prefix is not None:
        raise ValueError("a frozen prefix only applies to lora_only gradients")
    logits = forward(model, tokens, adapters, _cache=cache, _prefix=_prefix)
    value, dlogits = _cross_entropy(logits, labels)
    ads = adapters.adapters if adapters is not None else {}
    L = model.layers
    grads: dict[str, np.ndarray] = {}

    def keep(name, g):
        for key, val in g.items():
            grads[f"{name}.{key}"] = val

    w = cache["w"]
    wh = w("head")
    if full:
        keep("head", {"weight": dlogits.T @ cache["pooled"], "bias": dlogits.sum(axis=0)})
    dpooled = dlogits @ wh
    T = cache["h2"].shape[1]
    da2 = np.broadcast_to(dpooled[:, None, :] / T, cache["h2"].shape) * (1.0 - cache["h2"] ** 2)

    need_below_lin2 = full or "lin1" in ads
    g, dh1 = _linear_backward(da2, cache["h1"], w("lin2"), ads.get("lin2"), cache["xa2"], full, need_below_lin2)
    keep("lin2", g)
    if not need_below_lin2:
        return value, grads
    da1 = dh1 * (1.0 - cache["h1"] ** 2)
    g, dx1 = _linear_backward(da1, cache["x1"], w("lin1"), ads.get("lin1"), cache["xa1"], full, full)
    keep("lin1", g)
    if not full:
        return value, grads

    x0 = cache["x0"]
    kernel = w("conv")
    gk = np.empty_like(kernel)
    gk[:, 1] = (dx1 * x0).sum(axis=(0, 1))
    gk[:, 0] = (dx1[:, 1:] * x0[:, :-1]).sum(axis=(0, 1))
    gk[:, 2] = (dx1[:, :-1] * x0[:, 1:]).sum(axis=(0, 1))
    keep("conv", {"weight": gk, "bias": dx1.sum(axis=(0, 1))})
    dx0 = dx1 * kernel[:, 1]
    dx0[:, :-1] += dx1[:, 1:] * kernel[:, 0]
    dx0[:, 1:] += dx1[:, :-1] * kernel[:, 2]
    onehot = np.zeros((cache["tokens"].size, model.vocab), dx0.dtype)
    onehot[np.arange(cache["tokens"].size), cache["tokens"].ravel()] = 1
    ge = onehot.T @ dx0.reshape(-1, model.d_model)
    keep("embed", {"weight": ge})
    return value, grads


def quantise_model(
    model: ToyModel, selection=("linear", "conv", "embed"), block_size: int = 64, cb: NormalFloatCodebook | None = None
) -> tuple[ToyModel, QuantStats]:
    """Replace the weights of the selected layer kinds by NormalFloat codes."""
    cb = cb or build_codebook(4)
    unknown = set(selection) - set(SELECTION_KINDS)
    if unknown:
        raise ValueError(f"unknown layer selection {sorted(unknown)}; choose from {sorted(SELECTION_KINDS)}")
    if model.quantised:
        raise ValueError("model is already quantised")
    kinds = {SELECTION_KINDS[s] for s in selection}
    out = model.copy()
    qmats, unquantised = [], 0
    for layer in out.layers.values():
        if layer.bias is not None:
            unquantised += 4 * layer.bias.size
        if layer.kind in kinds:
            layer.qweight = quantise_matrix(layer.weight, block_size, cb)
            layer.weight = None
            layer._dense = None
            qmats.append(layer.qweight)
        else:
            unquantised += 4 * layer.weight.size
    stats = compression_stats(
        sum(q.size for q in qmats), qmats, unquantised, header_bytes=QUANT_HEADER_BYTES * len(qmats)
    )
    return out, stats


def fresh_adapters(model: ToyModel, rank: int, seed: int, alpha: float | None = None, speaker: str = "shared") -> AdapterSet:
    rng = Rng(seed)
    adapters = {}
    for name, layer in model.layers.items():
        if layer.lora_attached:
            d, k_dim = layer.shape
            adapters[name] = init_adapter(d, k_dim, rank, alpha, rng.child(name))
    return AdapterSet(speaker, adapters)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    steps: int = 300
    batch_size: int = 32
    optimiser: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    mode: str = "lora_only"
    log_every: int = 0
    # >0: score dev loss every this many steps (and at step 0), keep the best
    select_every: int = 0
    # "loss": lowest dev loss wins; "error": lowest dev error, dev loss breaks ties
    select_metric: str = "loss"

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.steps < 0 or self.batch_size < 1 or self.eps <= 0:
            raise ValueError("learning rate, batch size and eps must be positive; steps non-negative")
        if self.optimiser not in ("adam", "sgd"):
            raise ValueError(f"unknown optimiser {self.optimiser!r}")
        if self.mode not in ("lora_only", "full_finetune"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.log_every < 0 or self.select_every < 0:
            raise ValueError("log_every and select_every must be non-negative")
        if self.select_metric not in ("loss", "error"):
            raise ValueError(f"unknown selection metric {self.select_metric!r}")


@dataclass
class TrainResult:
    model: ToyModel
    adapters: AdapterSet | None
    train_losses: list[float]
    dev_loss: float | None
    curve: list[dict]
    selected_step: int = 0


class _Adam:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        cfg = self.cfg
        self.t += 1
        if cfg.optimiser == "sgd":
            for key, g in grads.items():
                params[key][...] = params[key] - cfg.lr * g
            return
        c1 = 1.0 - cfg.beta1**self.t
        c2 = 1.0 - cfg.beta2**self.t
        for key, g in grads.items():
            m = self.m.setdefault(key, np.zeros_like(g))
            v = self.v.setdefault(key, np.zeros_like(g))
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            params[key][...] = params[key] - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def _batches(n: int, cfg: TrainConfig):
    rng = Rng(cfg.seed).child("batches")
    if n <= cfg.batch_size:
        while True:
            yield np.arange(n)
    while True:
        order = rng.permutation(n)
        for start in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            yield order[start : start + cfg.batch_size]


# Largest frozen activation (elements) that LoRA-only training caches per dataset.
PREFIX_CACHE_LIMIT = 1 << 23


def train(
    model: ToyModel,
    data: tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    adapters: AdapterSet | None = None,
    dev: tuple[np.ndarray, np.ndarray] | None = None,
) -> TrainResult:
    """Optimise adapters (``lora_only``) or every weight (``full_finetune``).

    Inputs are never mutated: the trainable state is copied first.
    """
    tokens, labels = np.asarray(data[0]), np.asarray(data[1])
    if len(labels) == 0 and cfg.steps > 0:
        raise ValueError("cannot train on an empty dataset")
    if cfg.mode == "lora_only":
        if adapters is None or not adapters.adapters:
            raise ValueError("lora_only training needs adapters attached")
        _check_adapters(model, adapters)
        adapters = adapters.copy()
        params = {f"{n}.{p}": getattr(ad, p) for n, ad in adapters.adapters.items() for p in ("a", "b")}
    else:
        if model.quantised:
            raise ValueError("full fine-tuning needs an FP32 model")
        model = model.copy()
        params = {}
        for name, layer in model.layers.items():
            params[f"{name}.weight"] = layer.weight
            if layer.bias is not None:
                params[f"{name}.bias"] = layer.bias

    def prefix_for(toks: np.ndarray) -> dict | None:
        if cfg.mode != "lora_only" or toks.size * model.d_model > PREFIX_CACHE_LIMIT:
            return None
        return frozen_prefix(model, toks, _compute_dtype(model, adapters))

    train_prefix = prefix_for(tokens)
    dev_prefix = None if dev is None else prefix_for(np.asarray(dev[0]))

    def dev_loss_now() -> float | None:
        return None if dev is None else loss(model, dev[0], dev[1], adapters, _prefix=dev_prefix)

    def dev_score(dev_loss: float) -> tuple[float, float]:
        if cfg.select_metric == "error":
            return evaluate(model, dev[0], dev[1], adapters), dev_loss
        return dev_loss, 0.0

    selecting = cfg.select_every > 0 and dev is not None and cfg.steps > 0
    if selecting:
        first = dev_loss_now()
        best = (dev_score(first), 0, {k: v.copy() for k, v in params.items()})

    opt = _Adam(cfg)
    losses: list[float] = []
    curve: list[dict] = []
    batches = _batches(len(labels), cfg)
    for step in range(1, cfg.steps + 1):
        idx = next(batches)
        value, grads = loss_and_grads(model, tokens[idx], labels[idx], adapters, cfg.mode, _slice_prefix(train_prefix, idx))
        opt.step(params, grads)
        losses.append(value)
        scored = None
        if selecting and (step % cfg.select_every == 0 or step == cfg.steps):
            scored = dev_loss_now()
            score = dev_score(scored)
            if score < best[0]:
                best = (score, step, {k: v.copy() for k, v in params.items()})
        if cfg.log_every and step % cfg.log_every == 0 and step != cfg.steps:
            curve.append({"step": step, "train_loss": value, "dev_loss": dev_loss_now() if scored is None else scored})
    best_step = cfg.steps
    if selecting:
        _, best_step, kept = best
        for key, val in kept.items():
            params[key][...] = val
    dev_loss = dev_loss_now()
    curve.append({"step": cfg.steps, "train_loss": losses[-1] if losses else None, "dev_loss": dev_loss})
    return TrainResult(model, adapters, losses, dev_loss, curve, best_step)


def predict(model: ToyModel, tokens: np.ndarray, adapters: AdapterSet | None = None, chunk: int = 512) -> np.ndarray:
    """Argmax class per utterance; ties go to the lower class index."""
    tokens = np.asarray(tokens)
    out = [np.argmax(forward(model, tokens[i : i + chunk], adapters), axis=1) for i in range(0, len(tokens), chunk)]
    return np.concatenate(out) if out else np.zeros(0, np.int64)


def evaluate(model: ToyModel, tokens: np.ndarray, labels: np.ndarray, adapters: AdapterSet | None = None) -> float:
    """Percentage of misclassified utterances."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return 100.0 * float(np.mean(predict(model, tokens, adapters) != labels))


def pseudo_label(teacher: ToyModel, tokens: np.ndarray, adapters: AdapterSet | None = None) -> np.ndarray:
    return predict(teacher, tokens, adapters)
