import json

import pytest

from conftest import TINY
from pqm.checkpoint import file_digest, load_model
from pqm.cli import main


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return path


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    assert run("run", "--config", cfg, "--out-dir", root / "a") == 0
    return root, cfg


EXPECTED = [
    "config.json", "data/source.jsonl", "data/pool.jsonl", "data/speakers.jsonl", "base.pqm", "base-nf4.pqm",
    "quant_stats.json", "adapters/pretrained.pqma", "adapt_report.json", "semisup_report.json", "sweep.jsonl",
    "report.txt", "report.json", "teacher.pqm",
]


def test_full_run_writes_every_artifact(full_run):
    root, _ = full_run
    out = root / "a"
    for name in EXPECTED:
        assert (out / name).exists(), name
    assert len(list((out / "adapters" / "pretrain").glob("*.pqma"))) == 3
    assert len(list((out / "adapters" / "scratch").glob("*.pqma"))) == 3
    resolved = json.loads((out / "config.json").read_text())
    assert resolved["model"]["d_model"] == 32 and resolved["seed"] == 3


def test_full_run_is_byte_deterministic(full_run):
    root, cfg = full_run
    assert run("run", "--config", cfg, "--out-dir", root / "b") == 0
    a, b = root / "a", root / "b"
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for rel in files:
        assert file_digest(a / rel) == file_digest(b / rel), rel


def test_report_is_stable_and_parseable(full_run, capsys):
    out = full_run[0] / "a"
    before = (out / "report.txt").read_bytes()
    assert run("report", "--run-dir", out) == 0
    assert (out / "report.txt").read_bytes() == before
    header = [line for line in before.decode().splitlines() if line.startswith("System")][0]
    assert header.split() == ["System", "Error%", "Size", "Ratio"]
    data = json.loads((out / "report.json").read_text())
    assert {r["title"] for r in data["reports"]} == {"speaker adaptation", "label sources"}


def test_report_on_empty_dir_lists_files(tmp_path, capsys):
    assert run("report", "--run-dir", tmp_path) == 2
    err = capsys.readouterr().err
    assert "quant_stats.json" in err and "adapt_report.json" in err


def test_quantise_stats_selection_and_idempotence(full_run, tmp_path, capsys):
    src = full_run[0] / "a" / "base.pqm"
    assert run("quantise", "--in", src, "--out", tmp_path / "q1.pqm", "--out-dir", tmp_path) == 0
    printed = capsys.readouterr().out
    assert "ratio" in printed
    stats = json.loads((tmp_path / "quant_stats.json").read_text())
    assert stats["ratio"] > 3
    assert run("quantise", "--in", src, "--out", tmp_path / "q2.pqm", "--out-dir", tmp_path) == 0
    assert file_digest(tmp_path / "q1.pqm") == file_digest(tmp_path / "q2.pqm")
    assert run("quantise", "--in", src, "--out", tmp_path / "q3.pqm", "--out-dir", tmp_path, "--select", "none") == 0
    assert file_digest(tmp_path / "q3.pqm") == file_digest(src)
    assert json.loads((tmp_path / "quant_stats.json").read_text())["ratio"] == 1.0
    assert run("quantise", "--in", src, "--out", tmp_path / "q4.pqm", "--out-dir", tmp_path, "--select", "linear", "--block-size", "32") == 0
    q4 = load_model(tmp_path / "q4.pqm")
    assert q4["lin1"].quantised and not q4["embed"].quantised and q4["lin1"].qweight.block_size == 32


def test_quantise_errors(full_run, tmp_path):
    out = full_run[0] / "a"
    assert run("quantise", "--in", tmp_path / "missing.pqm", "--out-dir", tmp_path) == 2
    bad = tmp_path / "bad.pqm"
    bad.write_bytes(b"NOPE" + (out / "base.pqm").read_bytes()[4:])
    assert run("quantise", "--in", bad, "--out-dir", tmp_path) == 2
    assert run("quantise", "--in", out / "base-nf4.pqm", "--out", tmp_path / "x.pqm", "--out-dir", tmp_path) == 1
    assert run("quantise", "--in", out / "base.pqm", "--out-dir", tmp_path, "--select", "attention") == 1
    assert run("quantise", "--in", out / "base.pqm", "--out-dir", tmp_path, "--bits", "9") == 1


def test_validation_errors(config_file, tmp_path):
    assert run("pretrain-lora", "--config", config_file, "--out-dir", tmp_path, "--rank", "99") == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"modle": {}}))
    assert run("pretrain-lora", "--config", bad, "--out-dir", tmp_path) == 1
    assert run("pretrain-lora", "--config", config_file, "--out-dir", tmp_path) == 2  # no quantised checkpoint yet


def test_eval_command(full_run, capsys):
    out = full_run[0] / "a"
    spk = sorted((out / "adapters" / "pretrain").glob("*.pqma"))[0]
    args = ["eval", "--checkpoint", out / "base-nf4.pqm", "--data", out / "data" / "speakers.jsonl"]
    assert run(*args, "--adapters", spk, "--speaker", spk.stem) == 0
    err = float(capsys.readouterr().out)
    report = json.loads((out / "adapt_report.json").read_text())
    row = [r for r in report["rows"] if r["system"] == "LoRA-pretrain-NF4"][0]
    assert err == pytest.approx(row["per_speaker"][spk.stem])
    assert run(*args, "--speaker", "nobody") == 1


def test_teacher_vocab_mismatch(full_run, tmp_path):
    from pqm.checkpoint import save_model
    from pqm.toymodel import build_model

    out = full_run[0] / "a"
    odd = tmp_path / "odd.pqm"
    save_model(build_model(32, vocab=10), odd)
    work = tmp_path / "w"
    work.mkdir()
    for name in ("base.pqm", "base-nf4.pqm", "quant_stats.json", "adapters/pretrained.pqma", "data/source.jsonl",
                 "data/pool.jsonl", "data/speakers.jsonl"):
        (work / name).parent.mkdir(parents=True, exist_ok=True)
        (work / name).write_bytes((out / name).read_bytes())
    cfg = full_run[1]
    assert run("adapt-semisup", "--config", cfg, "--out-dir", work, "--teacher", odd) == 1


def test_stage_isolation(full_run, tmp_path):
    import shutil

    out = tmp_path / "copy"
    shutil.copytree(full_run[0] / "a", out)
    before = {n: file_digest(out / n) for n in ("base.pqm", "base-nf4.pqm", "adapters/pretrained.pqma")}
    assert run("sweep-utts", "--config", full_run[1], "--out-dir", out, "--counts", "0,5") == 0
    assert {n: file_digest(out / n) for n in before} == before
    lines = (out / "sweep.jsonl").read_text().splitlines()
    assert [json.loads(x)["count"] for x in lines] == [0, 5]


def test_semisup_reuses_truth_adapters_only_when_config_matches(full_run, tmp_path):
    import shutil

    out = tmp_path / "copy"
    shutil.copytree(full_run[0] / "a", out)
    reused = json.loads((out / "semisup_report.json").read_text())
    adapt = json.loads((out / "adapt_report.json").read_text())
    truth = next(r for r in reused["rows"] if r["system"] == "ground truth")
    pretrain = next(r for r in adapt["rows"] if r["system"] == "LoRA-pretrain-NF4")
    assert truth["error_rate"] == pretrain["error_rate"]

    # without the adapt outputs every row is trained again and must agree
    shutil.rmtree(out / "adapters" / "pretrain")
    assert run("adapt-semisup", "--config", full_run[1], "--out-dir", out) == 0
    assert json.loads((out / "semisup_report.json").read_text()) == reused

    # a config change invalidates the saved adapters
    shutil.copytree(full_run[0] / "a" / "adapters" / "pretrain", out / "adapters" / "pretrain")
    for p in (out / "adapters" / "pretrain").glob("*.pqma"):
        p.write_bytes(b"not an adapter file")
    assert run("adapt-semisup", "--config", full_run[1], "--out-dir", out, "--rank", "1") == 0
