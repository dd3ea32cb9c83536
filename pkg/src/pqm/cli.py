"""Command-line entry point: ``pqm <command> [options]``.

All commands share one run directory (``--out-dir``). Each command writes
the resolved config beside its outputs and reads earlier stages' artifacts
from the same directory::

    config.json            resolved configuration
    data/*.jsonl           source, pool and speaker datasets
    base.pqm               FP32 checkpoint                (train-base)
    base-nf4.pqm           quantised checkpoint           (quantise)
    quant_stats.json
    adapters/pretrained.pqma                              (pretrain-lora)
    adapters/{scratch,pretrain}/<speaker>.pqma            (adapt)
    adapt_report.json      semisup_report.json  sweep.jsonl
    report.txt, report.json                               (report)

Exit codes: 0 success, 1 validation error, 2 I/O or corrupt data.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

from . import pipeline as pl
from . import speakersim as ss
from .checkpoint import CheckpointError, file_digest, load_adapters, load_model, save_adapters, save_model
from .nfquant import QuantStats
from .toymodel import evaluate

log = logging.getLogger("pqm")

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2

BASE = "base.pqm"
QUANTISED = "base-nf4.pqm"
TEACHER = "teacher.pqm"
STATS = "quant_stats.json"
PRETRAINED = "adapters/pretrained.pqma"
ADAPT_REPORT = "adapt_report.json"
SEMISUP_REPORT = "semisup_report.json"
SWEEP = "sweep.jsonl"
REPORT_INPUTS = (STATS, ADAPT_REPORT)
DATA_FILES = {"source": "data/source.jsonl", "pool": "data/pool.jsonl", "speakers": "data/speakers.jsonl"}


class UsageError(ValueError):
    """Bad arguments or missing prerequisites that the user can fix."""


def load_config(args: argparse.Namespace) -> pl.PipelineConfig:
    raw = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text())
    cfg = pl.PipelineConfig.from_dict(raw)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.bits is not None:
        overrides["quant.bits"] = args.bits
    if args.block_size is not None:
        overrides["quant.block_size"] = args.block_size
    if args.rank is not None:
        overrides["lora.rank"] = args.rank
    if args.select is not None:
        overrides["quant.select"] = [s for s in args.select.split(",") if s and s != "none"]
    return cfg.override(**overrides) if overrides else cfg


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _prepare(args) -> tuple[pl.PipelineConfig, Path]:
    cfg = load_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    return cfg, out


def _task(cfg: pl.PipelineConfig, out: Path) -> pl.Task:
    """Datasets from the run directory, generating them from the config on first use."""
    paths = {k: out / v for k, v in DATA_FILES.items()}
    if not all(p.exists() for p in paths.values()):
        task = pl.build_task(cfg)
        paths["source"].parent.mkdir(parents=True, exist_ok=True)
        for key, p in paths.items():
            ss.write_jsonl(p, getattr(task, key))
    return pl.Task(*(ss.read_jsonl(paths[k]) for k in ("source", "pool", "speakers")))


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run `pqm {hint}` first")
    return path


def _stats(out: Path) -> QuantStats:
    raw = json.loads(_require(out / STATS, "quantise").read_text())
    return QuantStats(raw["raw_bytes"], raw["quantised_bytes"])


def _teacher(cfg, out: Path, base, task: pl.Task, teacher_path: str | None):
    if teacher_path:
        teacher = load_model(teacher_path)
        if teacher.vocab != base.vocab or teacher.classes != base.classes:
            raise UsageError("teacher vocabulary or class count differs from the student")
        return teacher
    path = out / TEACHER
    if path.exists():
        return load_model(path)
    teacher = pl.train_teacher(cfg, base, task.pool)
    save_model(teacher, path)
    return teacher


def cmd_train_base(args) -> int:
    cfg, out = _prepare(args)
    task = _task(cfg, out)
    model = pl.train_base(cfg, task)
    size = save_model(model, out / BASE)
    print(f"wrote {out / BASE} ({size} bytes, {model.num_params} parameters)")
    return EXIT_OK


def cmd_quantise(args) -> int:
    cfg, out = _prepare(args)
    src = Path(args.input) if args.input else _require(out / BASE, "train-base")
    dst = Path(args.output) if args.output else out / QUANTISED
    model = load_model(src)
    if model.quantised:
        raise UsageError(f"{src} is already quantised")
    qmodel, stats = pl.quantise(cfg, model)
    if cfg.quant.select:
        save_model(qmodel, dst)
    elif src.resolve() != dst.resolve():
        shutil.copyfile(src, dst)
    _write_json(out / STATS, {**stats.as_dict(), "select": cfg.quant.select, "bits": cfg.quant.bits,
                              "block_size": cfg.quant.block_size})
    flags = "".join("Y" if kind in cfg.quant.select else "-" for kind in ("linear", "conv", "embed"))
    print("linear/conv/embed  raw_bytes  quantised_bytes  ratio")
    print(f"{flags:<17}  {stats.raw_bytes:>9}  {stats.quantised_bytes:>15}  {stats.ratio:.2f}")
    return EXIT_OK


def cmd_pretrain_lora(args) -> int:
    cfg, out = _prepare(args)
    task = _task(cfg, out)
    qmodel = load_model(_require(out / QUANTISED, "quantise"))
    before = file_digest(out / QUANTISED)
    adapters = pl.pretrain_lora(cfg, qmodel, task.pool)
    (out / "adapters").mkdir(exist_ok=True)
    save_adapters(adapters, out / PRETRAINED)
    fresh = pl.init_adapters(cfg, qmodel)
    summary = {
        "pool_dev_loss_fresh": pl.pool_dev_loss(qmodel, task.pool, fresh),
        "pool_dev_loss_pretrained": pl.pool_dev_loss(qmodel, task.pool, adapters),
        "pool_speakers": len(task.pool),
        "adapter_params": adapters.num_params,
    }
    _write_json(out / "pretrain.json", summary)
    if file_digest(out / QUANTISED) != before:
        raise RuntimeError("quantised checkpoint changed during adapter pretraining")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg, out = _prepare(args)
    task = _task(cfg, out)
    base = load_model(_require(out / BASE, "train-base"))
    qmodel = load_model(_require(out / QUANTISED, "quantise"))
    pretrained = load_adapters(_require(out / PRETRAINED, "pretrain-lora"))
    teacher = _teacher(cfg, out, base, task, args.teacher) if cfg.label_source == "teacher" else None
    report, adapters = pl.adaptation_report(cfg, base, qmodel, _stats(out), pretrained, task.speakers, teacher)
    for init, per_speaker in adapters.items():
        folder = out / "adapters" / init
        folder.mkdir(parents=True, exist_ok=True)
        for speaker, ad in per_speaker.items():
            save_adapters(ad, folder / f"{speaker}.pqma")
    (out / ADAPT_REPORT).write_text(report.to_json())
    print(pl.render_table(report), end="")
    return EXIT_OK


def _truth_adapters(cfg: pl.PipelineConfig, out: Path, task: pl.Task):
    """Ground-truth LoRA-pretrain adapters from ``adapt``, if made under this config."""
    report = out / ADAPT_REPORT
    if cfg.label_source != "ground_truth" or not report.exists():
        return None
    if json.loads(report.read_text()).get("config") != json.loads(cfg.to_json()):
        return None
    paths = {ds.speaker_id: out / "adapters" / "pretrain" / f"{ds.speaker_id}.pqma" for ds in task.speakers}
    if not all(p.exists() for p in paths.values()):
        return None
    return {spk: load_adapters(p) for spk, p in paths.items()}


def cmd_adapt_semisup(args) -> int:
    cfg, out = _prepare(args)
    task = _task(cfg, out)
    base = load_model(_require(out / BASE, "train-base"))
    qmodel = load_model(_require(out / QUANTISED, "quantise"))
    pretrained = load_adapters(_require(out / PRETRAINED, "pretrain-lora"))
    teacher = _teacher(cfg, out, base, task, args.teacher)
    truth = _truth_adapters(cfg, out, task)
    report, _ = pl.semisup_report(cfg, qmodel, _stats(out), pretrained, task.speakers, teacher, truth)
    (out / SEMISUP_REPORT).write_text(report.to_json())
    print(pl.render_table(report), end="")
    return EXIT_OK


def cmd_sweep_utts(args) -> int:
    cfg, out = _prepare(args)
    task = _task(cfg, out)
    qmodel = load_model(_require(out / QUANTISED, "quantise"))
    adapters = load_adapters(Path(args.adapters) if args.adapters else _require(out / PRETRAINED, "pretrain-lora"))
    counts = [int(c) for c in args.counts.split(",")] if args.counts else None
    records = pl.sweep_utterances(cfg, qmodel, adapters, task.speakers, counts)
    with open(out / SWEEP, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    for rec in records:
        print(f"{rec['count']:>4}  {rec['error']:.2f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    adapters = load_adapters(args.adapters) if args.adapters else None
    datasets = ss.read_jsonl(args.data)
    if args.speaker:
        datasets = [ds for ds in datasets if ds.speaker_id == args.speaker]
        if not datasets:
            raise UsageError(f"speaker {args.speaker!r} not in {args.data}")
    tokens, labels = ss.stack(datasets, args.split)
    if len(labels) == 0:
        raise UsageError(f"split {args.split!r} is empty")
    print(f"{evaluate(model, tokens, labels, adapters):.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run_dir or args.out_dir)
    missing = [name for name in REPORT_INPUTS if not (run / name).exists()]
    if missing:
        raise FileNotFoundError(f"{run} is missing {', '.join(missing)} (expected {', '.join(REPORT_INPUTS)})")
    reports = [pl.EvalReport.from_dict(json.loads((run / ADAPT_REPORT).read_text()))]
    if (run / SEMISUP_REPORT).exists():
        reports.append(pl.EvalReport.from_dict(json.loads((run / SEMISUP_REPORT).read_text())))
    stats = json.loads((run / STATS).read_text())
    text = [f"quantisation: {stats['raw_bytes']} -> {stats['quantised_bytes']} bytes, ratio {stats['ratio']:.2f}\n"]
    text += [pl.render_table(r) for r in reports]
    if (run / SWEEP).exists():
        text.append("# utterance sweep\ncount  Error%\n")
        for line in (run / SWEEP).read_text().splitlines():
            rec = json.loads(line)
            text.append(f"{rec['count']:>5}  {rec['error']:.2f}\n")
    rendered = "\n".join(text)
    (run / "report.txt").write_text(rendered)
    _write_json(run / "report.json", {"quantisation": stats, "reports": [r.to_dict() for r in reports]})
    print(rendered, end="")
    return EXIT_OK


def cmd_run(args) -> int:
    """All stages in order: train-base, quantise, pretrain-lora, adapt, adapt-semisup, sweep-utts, report."""
    for step in (cmd_train_base, cmd_quantise, cmd_pretrain_lora, cmd_adapt, cmd_adapt_semisup, cmd_sweep_utts, cmd_report):
        log.info("stage %s", step.__name__[4:])
        step(args)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags below override its keys")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", default="run", help="run directory (default: ./run)")
    common.add_argument("--bits", type=int)
    common.add_argument("--block-size", type=int)
    common.add_argument("--rank", type=int)
    common.add_argument("--select", help="comma list from linear,conv,embed (or 'none')")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pqm", description="Personalisation of a NormalFloat-quantised model")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        p = sub.add_parser(name, parents=[common], help=help)
        p.set_defaults(func=fn)
        return p

    add("train-base", cmd_train_base, "train the FP32 base model on source-domain speakers")
    p = add("quantise", cmd_quantise, "stage 1: NormalFloat-quantise a checkpoint")
    p.add_argument("--in", dest="input", help="FP32 checkpoint (default: <out-dir>/base.pqm)")
    p.add_argument("--out", dest="output", help="output checkpoint (default: <out-dir>/base-nf4.pqm)")
    add("pretrain-lora", cmd_pretrain_lora, "stage 2: train shared adapters on the target-domain pool")
    p = add("adapt", cmd_adapt, "stage 3: per-speaker adapters and the system comparison")
    p.add_argument("--teacher", help="teacher checkpoint when label_source is 'teacher'")
    p = add("adapt-semisup", cmd_adapt_semisup, "stage 3 under ground-truth, teacher and self labels")
    p.add_argument("--teacher", help="teacher checkpoint (default: train one on the pool)")
    p = add("sweep-utts", cmd_sweep_utts, "error versus number of adaptation utterances")
    p.add_argument("--adapters", help="initial adapters (default: pretrained)")
    p.add_argument("--counts", help="comma-separated utterance counts, must include 0")
    p = add("eval", cmd_eval, "error rate of a checkpoint on a dataset file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--adapters")
    p.add_argument("--data", required=True, help="dataset JSONL file")
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--speaker")
    p = add("report", cmd_report, "render the tables of a run directory")
    p.add_argument("--run-dir", help="run directory (default: --out-dir)")
    p = add("run", cmd_run, "every stage in order")
    p.add_argument("--teacher")
    p.add_argument("--adapters")
    p.add_argument("--counts")
    p.add_argument("--in", dest="input")
    p.add_argument("--out", dest="output")
    p.add_argument("--run-dir")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, CheckpointError, OSError, EOFError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (pl.ConfigError, UsageError, ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
