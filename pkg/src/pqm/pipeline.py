"""The three PQM stages and the experiment matrix, in memory.

Stage 1 quantises a trained FP32 model, stage 2 trains one shared adapter set
on a multi-speaker pool from the target domain, stage 3 trains one adapter
set per target speaker. Every function here is a pure function of its
arguments and the config seed; file handling lives in ``pqm.cli``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import speakersim as ss
from .lora import AdapterSet
from .nfquant import QuantStats, build_codebook
from .tensor import derive_seed
from .toymodel import (
    SELECTION_KINDS,
    ToyModel,
    TrainConfig,
    build_model,
    evaluate,
    fresh_adapters,
    loss,
    pseudo_label,
    quantise_model,
    train,
)

LABEL_SOURCES = ("ground_truth", "teacher", "self")


class ConfigError(ValueError):
    """Invalid or unknown configuration keys."""


@dataclass
class ModelConfig:
    d_model: int = 320


@dataclass
class QuantConfig:
    bits: int = 4
    block_size: int = 64
    select: list[str] = field(default_factory=lambda: ["linear", "conv", "embed"])


@dataclass
class LoraConfig:
    rank: int = 4
    alpha: float | None = None


@dataclass
class BudgetConfig:
    base_steps: int = 400
    pretrain_steps: int = 300
    adapt_steps: int = 100
    teacher_steps: int = 600
    lr: float = 1e-3
    adapt_lr: float = 1e-3
    select_every: int = 5
    select_metric: str = "loss"
    batch_size: int = 32
    optimiser: str = "adam"


@dataclass
class DataConfig:
    source_speakers: int = 50
    pool_speakers: int = 50
    pool_utts: int = 150
    speakers: int = 10
    utts: int = 300


@dataclass
class PipelineConfig:
    seed: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    quant: QuantConfig = field(default_factory=QuantConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    data: DataConfig = field(default_factory=DataConfig)
    label_source: str = "ground_truth"
    sweep_counts: list[int] = field(default_factory=lambda: [0, 5, 10, 20, 40, 60])
    include_fft: bool = False

    def validate(self) -> "PipelineConfig":
        checks = [
            (self.seed >= 0, "seed must be non-negative"),
            (self.model.d_model >= 8, "model.d_model must be >= 8"),
            (2 <= self.quant.bits <= 8, "quant.bits must lie in [2, 8]"),
            (self.quant.block_size >= 1, "quant.block_size must be >= 1"),
            (set(self.quant.select) <= set(SELECTION_KINDS), f"quant.select must be a subset of {sorted(SELECTION_KINDS)}"),
            (1 <= self.lora.rank <= self.model.d_model // 2, "lora.rank must lie in [1, d_model / 2]"),
            (self.lora.alpha is None or self.lora.alpha > 0, "lora.alpha must be positive"),
            (self.budget.lr > 0 and self.budget.adapt_lr > 0, "learning rates must be positive"),
            (self.budget.batch_size >= 1, "budget.batch_size must be >= 1"),
            (self.budget.optimiser in ("adam", "sgd"), "budget.optimiser must be adam or sgd"),
            (min(self.budget.base_steps, self.budget.pretrain_steps, self.budget.adapt_steps, self.budget.teacher_steps) >= 0,
             "step budgets must be non-negative"),
            (self.data.source_speakers >= 1, "data.source_speakers must be >= 1"),
            (self.data.pool_speakers >= 2, "data.pool_speakers must be >= 2"),
            (self.data.pool_utts >= 5 and self.data.utts >= 5, "utterance counts must be >= 5"),
            (self.data.speakers >= 1, "data.speakers must be >= 1"),
            (self.label_source in LABEL_SOURCES, f"label_source must be one of {LABEL_SOURCES}"),
            (0 in self.sweep_counts, "sweep_counts must include 0"),
            (all(c >= 0 for c in self.sweep_counts), "sweep_counts must be non-negative"),
            (max(self.sweep_counts) <= ss.split_sizes(self.data.utts)[0], "sweep_counts exceed the train split"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "PipelineConfig":
        return _build(cls, raw, "").validate()

    def override(self, **dotted: Any) -> "PipelineConfig":
        """Copy with ``section.key`` (or top-level ``key``) values replaced."""
        raw = self.to_dict()
        for key, value in dotted.items():
            *path, leaf = key.split(".")
            node = raw
            for part in path:
                if part not in node or not isinstance(node[part], dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[part]
            if leaf not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[leaf] = value
        return PipelineConfig.from_dict(raw)


def _build(cls, raw: Any, prefix: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix or 'config'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(prefix + k for k in sorted(unknown))}")
    kwargs = {}
    for name, value in raw.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


# -- data ---------------------------------------------------------------


@dataclass
class Task:
    source: list[ss.AdaptationDataset]
    pool: list[ss.AdaptationDataset]
    speakers: list[ss.AdaptationDataset]


def build_task(cfg: PipelineConfig) -> Task:
    """Source-domain data for the base model, a target-domain pool, target speakers."""
    d = cfg.data
    domain = ss.make_domain(cfg.seed)
    source = ss.generate_pool(d.source_speakers, d.pool_utts, cfg.seed, prefix="src")
    pool = ss.generate_pool(d.pool_speakers, d.pool_utts, cfg.seed, domain=domain)
    speakers = ss.generate_adaptation_speakers(d.speakers, d.utts, cfg.seed, domain=domain)
    return Task([ds for _, ds in source], [ds for _, ds in pool], [ds for _, ds in speakers])


def _cfg(cfg: PipelineConfig, stage: str, steps: int, mode: str, lr: float | None = None, select: bool = False) -> TrainConfig:
    b = cfg.budget
    return TrainConfig(
        select_every=b.select_every if select else 0,
        select_metric=b.select_metric,
        lr=b.lr if lr is None else lr,
        steps=steps,
        batch_size=b.batch_size,
        optimiser=b.optimiser,
        seed=derive_seed(cfg.seed, stage) % 2**63,
        mode=mode,
    )


# -- stages -------------------------------------------------------------


def train_base(cfg: PipelineConfig, task: Task) -> ToyModel:
    """FP32 base model trained on source-domain speakers."""
    model = build_model(cfg.model.d_model, derive_seed(cfg.seed, "init") % 2**63)
    data = ss.stack(task.source, "train")
    return train(model, data, _cfg(cfg, "base", cfg.budget.base_steps, "full_finetune")).model


def quantise(cfg: PipelineConfig, model: ToyModel) -> tuple[ToyModel, QuantStats]:
    return quantise_model(model, cfg.quant.select, cfg.quant.block_size, build_codebook(cfg.quant.bits))


def init_adapters(cfg: PipelineConfig, model: ToyModel, speaker: str = "shared") -> AdapterSet:
    return fresh_adapters(model, cfg.lora.rank, derive_seed(cfg.seed, "adapter-init") % 2**63, cfg.lora.alpha, speaker)


def pretrain_lora(cfg: PipelineConfig, qmodel: ToyModel, pool: list[ss.AdaptationDataset]) -> AdapterSet:
    if len(pool) < 2:
        raise ValueError("LoRA pretraining needs a pool of at least 2 speakers")
    result = train(
        qmodel,
        ss.stack(pool, "train"),
        _cfg(cfg, "pretrain", cfg.budget.pretrain_steps, "lora_only"),
        adapters=init_adapters(cfg, qmodel, "pretrained"),
    )
    return result.adapters


def adapt_speaker(cfg: PipelineConfig, qmodel: ToyModel, init: AdapterSet, ds: ss.AdaptationDataset) -> AdapterSet:
    """Stage 3 for one speaker, keeping the adapters with the best dev loss.

    Trains on ``ds.labels`` for the train split and scores on the dev split;
    pass a relabelled dataset (``ds.with_labels``) for pseudo-label training.
    """
    if len(ds.train) == 0:
        raise ValueError(f"speaker {ds.speaker_id} has an empty train split")
    result = train(
        qmodel,
        ds.split("train"),
        _cfg(cfg, "adapt", cfg.budget.adapt_steps, "lora_only", cfg.budget.adapt_lr, select=True),
        adapters=init.copy(ds.speaker_id),
        dev=ds.split("dev") if len(ds.dev) else None,
    )
    return result.adapters


def finetune_speaker(cfg: PipelineConfig, model: ToyModel, ds: ss.AdaptationDataset) -> ToyModel:
    """Full fine-tuning baseline with the same step budget and selection as stage 3."""
    return train(
        model,
        ds.split("train"),
        _cfg(cfg, "fft", cfg.budget.adapt_steps, "full_finetune", cfg.budget.adapt_lr, select=True),
        dev=ds.split("dev") if len(ds.dev) else None,
    ).model


def train_teacher(cfg: PipelineConfig, base: ToyModel, pool: list[ss.AdaptationDataset]) -> ToyModel:
    """A stronger FP32 labeller: the base model fully fine-tuned on the target pool."""
    return train(base, ss.stack(pool, "train"), _cfg(cfg, "teacher", cfg.budget.teacher_steps, "full_finetune")).model


# -- evaluation ---------------------------------------------------------


def speaker_errors(model: ToyModel, speakers: list[ss.AdaptationDataset], adapters: dict[str, AdapterSet] | AdapterSet | None = None) -> dict[str, float]:
    out = {}
    for ds in speakers:
        ad = adapters.get(ds.speaker_id) if isinstance(adapters, dict) else adapters
        out[ds.speaker_id] = evaluate(model, *ds.split("test"), ad)
    return out


def pooled_error(errors: dict[str, float], speakers: list[ss.AdaptationDataset]) -> float:
    """Error over all test utterances of all speakers (utterance-weighted)."""
    n = {ds.speaker_id: len(ds.test) for ds in speakers}
    total = sum(n.values())
    return sum(errors[s] * n[s] for s in errors) / total


def row(system: str, errors: dict[str, float], speakers, model_bytes: int, ratio: float, adapted_params: int) -> dict:
    return {
        "system": system,
        "error_rate": pooled_error(errors, speakers),
        "model_bytes": int(model_bytes),
        "ratio": float(ratio),
        "adapted_params": int(adapted_params),
        "per_speaker": {k: errors[k] for k in sorted(errors)},
    }


def pool_dev_loss(qmodel: ToyModel, pool: list[ss.AdaptationDataset], adapters: AdapterSet) -> float:
    return loss(qmodel, *ss.stack(pool, "dev"), adapters)


def adapt_all(cfg: PipelineConfig, qmodel: ToyModel, init: AdapterSet, speakers: list[ss.AdaptationDataset]) -> dict[str, AdapterSet]:
    return {ds.speaker_id: adapt_speaker(cfg, qmodel, init, ds) for ds in speakers}


def relabel(ds: ss.AdaptationDataset, teacher: ToyModel, teacher_adapters: AdapterSet | None = None) -> ss.AdaptationDataset:
    """Copy of ``ds`` whose every label is the teacher's prediction.

    Only token sequences are shown to the teacher; the ground-truth labels of
    ``ds`` are never read.
    """
    return ds.with_labels(pseudo_label(teacher, ds.tokens, teacher_adapters))


# -- experiments --------------------------------------------------------


@dataclass
class EvalReport:
    title: str
    seed: int
    rows: list[dict]
    config: dict
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for r in self.rows:
            if not 0.0 <= r["error_rate"] <= 100.0:
                raise ValueError(f"error rate {r['error_rate']} of {r['system']} outside [0, 100]")

    def row(self, system: str) -> dict:
        for r in self.rows:
            if r["system"] == system:
                return r
        raise KeyError(system)

    def error(self, system: str) -> float:
        return self.row(system)["error_rate"]

    def to_dict(self) -> dict:
        return {"title": self.title, "seed": self.seed, "rows": self.rows, "config": self.config, "extra": self.extra}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, raw: dict) -> "EvalReport":
        return cls(raw["title"], raw["seed"], raw["rows"], raw["config"], raw.get("extra", {}))


TABLE_COLUMNS = ("System", "Error%", "Size", "Ratio")


def render_table(report: EvalReport) -> str:
    """Fixed-width text table with the columns of ``TABLE_COLUMNS``."""
    cells = [TABLE_COLUMNS] + [
        (r["system"], f"{r['error_rate']:.2f}", f"{r['model_bytes'] / 1e6:.3f}MB", "-" if r["ratio"] == 1.0 else f"{r['ratio']:.2f}")
        for r in report.rows
    ]
    widths = [max(len(c[i]) for c in cells) for i in range(len(TABLE_COLUMNS))]
    lines = [f"# {report.title} (seed {report.seed})"]
    for i, c in enumerate(cells):
        lines.append("  ".join(s.ljust(w) if j == 0 else s.rjust(w) for j, (s, w) in enumerate(zip(c, widths))))
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def adaptation_report(
    cfg: PipelineConfig,
    base: ToyModel,
    qmodel: ToyModel,
    stats: QuantStats,
    pretrained: AdapterSet,
    speakers: list[ss.AdaptationDataset],
    teacher: ToyModel | None = None,
) -> tuple[EvalReport, dict[str, dict[str, AdapterSet]]]:
    """Baseline, LoRA-scratch and LoRA-pretrain rows (plus FFT rows if enabled).

    Stage-3 training labels follow ``cfg.label_source``. Returns the report
    and the per-speaker adapters keyed by init (``scratch``/``pretrain``).
    """
    def train_set(ds):
        if cfg.label_source == "ground_truth":
            return ds
        if cfg.label_source == "teacher":
            if teacher is None:
                raise ValueError("label_source 'teacher' needs a teacher model")
            return relabel(ds, teacher)
        return relabel(ds, qmodel, pretrained)

    fresh = init_adapters(cfg, qmodel)
    adapters = {"scratch": {}, "pretrain": {}}
    for ds in speakers:
        tds = train_set(ds)
        adapters["scratch"][ds.speaker_id] = adapt_speaker(cfg, qmodel, fresh, tds)
        adapters["pretrain"][ds.speaker_id] = adapt_speaker(cfg, qmodel, pretrained, tds)

    n_adapted = fresh.num_params
    rows = [row("FP32-baseline", speaker_errors(base, speakers), speakers, stats.raw_bytes, 1.0, 0)]
    rows.append(row("NF4-baseline", speaker_errors(qmodel, speakers), speakers, stats.quantised_bytes, stats.ratio, 0))
    if cfg.include_fft:
        fp32_err, nf4_err = {}, {}
        for ds in speakers:
            tuned = finetune_speaker(cfg, base, train_set(ds))
            fp32_err[ds.speaker_id] = evaluate(tuned, *ds.split("test"))
            tuned_nf4, _ = quantise(cfg, tuned)
            nf4_err[ds.speaker_id] = evaluate(tuned_nf4, *ds.split("test"))
        rows.append(row("FFT-FP32", fp32_err, speakers, stats.raw_bytes, 1.0, base.num_params))
        rows.append(row("FFT-NF4", nf4_err, speakers, stats.quantised_bytes, stats.ratio, base.num_params))
    rows.append(row("LoRA-scratch-NF4", speaker_errors(qmodel, speakers, adapters["scratch"]), speakers,
                    stats.quantised_bytes, stats.ratio, n_adapted))
    rows.append(row("LoRA-pretrain-NF4", speaker_errors(qmodel, speakers, adapters["pretrain"]), speakers,
                    stats.quantised_bytes, stats.ratio, n_adapted))
    report = EvalReport("speaker adaptation", cfg.seed, rows, cfg.to_dict(), {"label_source": cfg.label_source})
    return report, adapters


def semisup_report(
    cfg: PipelineConfig,
    qmodel: ToyModel,
    stats: QuantStats,
    pretrained: AdapterSet,
    speakers: list[ss.AdaptationDataset],
    teacher: ToyModel,
    ground_truth: dict[str, AdapterSet] | None = None,
) -> tuple[EvalReport, dict[str, np.ndarray]]:
    """Pretrained-LoRA adaptation under each label source.

    ``ground_truth`` may carry per-speaker adapters already adapted from
    ``pretrained`` on true labels under the same config; they are used as-is
    instead of being trained again.

    Returns the report and, per source, the concatenated train labels that
    were used, so callers can audit where labels came from.
    """
    sources = {
        "ground truth": lambda ds: ds,
        "strong teacher": lambda ds: relabel(ds, teacher),
        "self": lambda ds: relabel(ds, qmodel, pretrained),
    }
    n_adapted = pretrained.num_params
    rows = [row("no adaptation", speaker_errors(qmodel, speakers, pretrained), speakers,
                stats.quantised_bytes, stats.ratio, 0)]
    used = {}
    for name, source in sources.items():
        relabelled = [source(ds) for ds in speakers]
        used[name] = np.concatenate([ds.split("train")[1] for ds in relabelled])
        if name == "ground truth" and ground_truth is not None:
            adapted = {ds.speaker_id: ground_truth[ds.speaker_id] for ds in speakers}
        else:
            adapted = {ds.speaker_id: adapt_speaker(cfg, qmodel, pretrained, ds) for ds in relabelled}
        rows.append(row(name, speaker_errors(qmodel, speakers, adapted), speakers,
                        stats.quantised_bytes, stats.ratio, n_adapted))
    teacher_err = pooled_error(speaker_errors(teacher, speakers), speakers)
    report = EvalReport("label sources", cfg.seed, rows, cfg.to_dict(), {"teacher_error_rate": teacher_err})
    return report, used


def sweep_utterances(
    cfg: PipelineConfig, qmodel: ToyModel, adapters: AdapterSet, speakers: list[ss.AdaptationDataset], counts: list[int] | None = None
) -> list[dict]:
    """Mean test error after adapting on the first ``count`` train utterances.

    Count 0 is the unadapted model. Dev and test splits never change.
    """
    counts = list(cfg.sweep_counts if counts is None else counts)
    if 0 not in counts:
        raise ValueError("sweep counts must include 0")
    available = min(len(ds.train) for ds in speakers)
    if max(counts) > available:
        raise ValueError(f"count {max(counts)} exceeds the smallest train split ({available})")
    records = []
    for count in counts:
        subset = [ds.subsample_train(count) for ds in speakers]
        if count == 0:
            errors = speaker_errors(qmodel, subset, adapters)
        else:
            errors = speaker_errors(qmodel, subset, adapt_all(cfg, qmodel, adapters, subset))
        records.append({"count": count, "error": pooled_error(errors, subset)})
    return records
