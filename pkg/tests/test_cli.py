import csv
import hashlib
import json
import math
import time
from pathlib import Path

import pytest

from vsedistill import autodiff as ad
from vsedistill import cli
from vsedistill.checkpoint import load_checkpoint
from vsedistill.corpus import load_corpus

TINY = ["--epochs", "1", "--dim", "16", "--layers", "1", "--enc-heads", "2"]
TINY_DEC = ["--tokens", "2", "--depth", "1", "--heads", "2"]


def sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "runs"))
    return tmp_path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """corpus -> pretrain -> finetune, in explicit run directories."""
    d = tmp_path_factory.mktemp("pipe")
    c = d / "c.jsonl"
    assert cli.main(["gen-corpus", "--train", "32", "--val", "8", "--test", "8", "--out", str(c),
                     "--run-dir", str(d / "gen")]) == 0
    assert cli.main(["pretrain", "--corpus", str(c), *TINY, "--run-dir", str(d / "pre")]) == 0
    assert cli.main(["finetune", "--corpus", str(c), "--from", str(d / "pre" / "checkpoint.ckpt"), *TINY, *TINY_DEC,
                     "--run-dir", str(d / "ft")]) == 0
    return d


def test_gen_corpus_counts_and_checksum(work):
    assert cli.main(["gen-corpus", "--seed", "7", "--train", "512", "--out", "c.jsonl"]) == 0
    corpus = load_corpus("c.jsonl")
    assert len(corpus.split("train")) == 512
    first = sha("c.jsonl")
    assert cli.main(["gen-corpus", "--seed", "7", "--train", "512", "--out", "d.jsonl"]) == 0
    assert sha("d.jsonl") == first


def test_gen_corpus_validation_exit_2(work, capsys):
    assert cli.main(["gen-corpus", "--k", "9", "--attributes", "8"]) == 2
    assert "smaller" in capsys.readouterr().err


def test_usage_errors_exit_2(work):
    assert cli.main([]) == 2
    assert cli.main(["frobnicate"]) == 2
    assert cli.main(["pretrain", "--epochs", "many"]) == 2


def test_missing_inputs_exit_3(work, pipeline):
    c = str(pipeline / "c.jsonl")
    assert cli.main(["pretrain", "--corpus", "nope.jsonl"]) == 3
    assert cli.main(["finetune", "--corpus", c, *TINY]) == 3
    assert cli.main(["eval", "--corpus", c, "--checkpoint", "missing.ckpt"]) == 3
    Path("junk.ckpt").write_bytes(b"garbage" * 10)
    assert cli.main(["eval", "--corpus", c, "--checkpoint", "junk.ckpt"]) == 3
    Path("bad.jsonl").write_text("{}\n")
    assert cli.main(["pretrain", "--corpus", "bad.jsonl"]) == 3


def test_stage2_checkpoint_needs_resume(work, pipeline):
    c, s2 = str(pipeline / "c.jsonl"), str(pipeline / "ft" / "checkpoint.ckpt")
    assert cli.main(["finetune", "--corpus", c, "--from", s2, *TINY]) == 2
    assert cli.main(["finetune", "--corpus", c, "--from", s2, "--resume", *TINY]) == 0


def test_manifest_fields(pipeline):
    m = json.loads((pipeline / "ft" / "manifest.json").read_text())
    for key in ("command", "argv", "config", "config_hash", "seed", "version", "inputs", "input_checksums",
                "outputs", "started_at", "finished_at"):
        assert key in m, key
    assert m["command"] == "finetune" and m["version"].startswith("v")
    assert m["outputs"]["checkpoint.ckpt"] == sha(pipeline / "ft" / "checkpoint.ckpt")
    assert m["input_checksums"]["corpus"] == sha(pipeline / "c.jsonl")
    assert m["config"]["train"]["distill"] and m["config"]["model"]["n_mask_tokens"] == 2
    assert list((pipeline / "ft").glob("manifest.json")) == [pipeline / "ft" / "manifest.json"]
    lines = (pipeline / "ft" / "metrics.jsonl").read_text().splitlines()
    assert {"stage", "epoch", "mean_loss", "val_rsum", "wall_time"} <= set(json.loads(lines[0]))


def test_finetune_flags(work, pipeline):
    c, s1 = str(pipeline / "c.jsonl"), str(pipeline / "pre" / "checkpoint.ckpt")
    assert cli.main(["finetune", "--corpus", c, "--from", s1, "--no-distill", *TINY, *TINY_DEC,
                     "--run-dir", "pa"]) == 0
    ck = load_checkpoint("pa/checkpoint.ckpt")
    assert ck.meta["flags"] == ["pretrain", "align"]
    assert cli.main(["finetune", "--corpus", c, "--flags", "align", *TINY, *TINY_DEC, "--run-dir", "a"]) == 0
    assert load_checkpoint("a/checkpoint.ckpt").meta["flags"] == ["align"]
    assert cli.main(["finetune", "--corpus", c, "--from", s1, "--flags", "pretrain", *TINY]) == 2


def test_content_addressed_refuses_overwrite(work, pipeline, capsys):
    c = str(pipeline / "c.jsonl")
    args = ["pretrain", "--corpus", c, *TINY]
    assert cli.main(args) == 0
    dirs = list((work / "runs").iterdir())
    assert len(dirs) == 1 and dirs[0].name.startswith("pretrain-")
    assert cli.main(args) == 2
    assert "--force" in capsys.readouterr().err
    assert cli.main(args + ["--force"]) == 0
    assert cli.main(["pretrain", "--corpus", c, *TINY, "--seed", "1"]) == 0
    assert len(list((work / "runs").iterdir())) == 2


def test_config_file_and_flag_precedence(work, pipeline):
    c = str(pipeline / "c.jsonl")
    Path("run.cfg").write_text(f"# toy run\ncorpus = {c}\nepochs = 2\nlr = 1e-3\ndim=16\nenc-heads = 2\n"
                               "layers = 1\n")
    assert cli.main(["pretrain", "--config", "run.cfg", "--lr", "2e-3", "--run-dir", "r"]) == 0
    cfg = json.loads(Path("r/manifest.json").read_text())["config"]
    assert cfg["train"]["epochs"] == 2 and cfg["train"]["lr"] == 2e-3 and cfg["model"]["model_dim"] == 16
    Path("bad.cfg").write_text("colour = blue\n")
    assert cli.main(["pretrain", "--config", "bad.cfg"]) == 2
    Path("nan.cfg").write_text(f"corpus = {c}\nlr = nan\n")
    assert cli.main(["pretrain", "--config", "nan.cfg"]) == 2
    assert cli.main(["pretrain", "--config", "absent.cfg"]) == 3


def test_eval_writes_reports(work, pipeline):
    args = ["eval", "--corpus", str(pipeline / "c.jsonl"), "--checkpoint", str(pipeline / "ft" / "checkpoint.ckpt")]
    assert cli.main(args + ["--run-dir", "e1"]) == 0
    assert cli.main(args + ["--run-dir", "e2"]) == 0
    rep = json.loads(Path("e1/report.json").read_text())
    assert math.isclose(rep["rsum"], sum(rep[k] for k in ("tr_r1", "tr_r5", "tr_r10", "ir_r1", "ir_r5", "ir_r10")))
    assert sha("e1/report.json") == sha("e2/report.json")
    rows = list(csv.reader(open("e1/report.csv")))
    assert rows[0] == ["direction", "k", "recall"] and len(rows) == 8


def test_replay_reproduces(work, pipeline, capsys):
    for name in ("gen", "pre", "ft"):
        assert cli.main(["replay", str(pipeline / name / "manifest.json"), "--run-dir", f"re-{name}"]) == 0
    assert "reproduced" in capsys.readouterr().out


def test_replay_detects_mismatch(work, pipeline):
    m = json.loads((pipeline / "pre" / "manifest.json").read_text())
    m["outputs"]["checkpoint.ckpt"] = "0" * 64
    Path("m.json").write_text(json.dumps(m))
    assert cli.main(["replay", "m.json", "--run-dir", "re"]) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_abort_exit_4(work, pipeline, capsys):
    assert cli.main(["pretrain", "--corpus", str(pipeline / "c.jsonl"), *TINY, "--lr", "1e300",
                     "--run-dir", "boom"]) == 4
    out = capsys.readouterr().out
    dump = Path(out.split("dump: ")[1].strip())
    assert dump.is_file() and json.loads(dump.read_text())["stage"] == "stage1"


def test_unknown_axis_exit_2(work, pipeline):
    assert cli.main(["ablate", "--axis", "colour", "--corpus", str(pipeline / "c.jsonl")]) == 2
    assert cli.main(["ablate", "--axis", "heads", "--values", "3", "--corpus", str(pipeline / "c.jsonl"), *TINY]) == 2


@pytest.mark.parametrize("axis, values, expect", [
    ("placement", None, {"prefix", "postfix", "surround"}),
    ("distill-kind", None, {"l1", "l2", "negcosine"}),
    ("components", "P,A,PAD", {"pretrain", "align", "pretrain+align+distill"}),
])
def test_ablate_rows(work, pipeline, axis, values, expect):
    args = ["ablate", "--axis", axis, "--corpus", str(pipeline / "c.jsonl"), "--from",
            str(pipeline / "pre" / "checkpoint.ckpt"), *TINY, *TINY_DEC, "--run-dir", "ab"]
    if values:
        args += ["--values", values]
    assert cli.main(args) == 0
    rows = list(csv.DictReader(open("ab/summary.csv")))
    assert {r["value"] for r in rows} == expect and all(r["axis"] == axis for r in rows)
    rsums = [float(r["rsum"]) for r in rows]
    assert all(math.isfinite(x) for x in rsums) and rsums == sorted(rsums, reverse=True)
    for r in rows:
        assert (Path("ab/settings") / r["run_dir"] / "manifest.json").is_file()


def test_ablate_parallel_matches_serial(work, pipeline):
    base = ["ablate", "--axis", "tokens", "--values", "1,2", "--corpus", str(pipeline / "c.jsonl"), *TINY,
            "--depth", "1", "--heads", "2"]
    assert cli.main(base + ["--run-dir", "serial"]) == 0
    assert cli.main(base + ["--jobs", "2", "--run-dir", "par"]) == 0
    assert Path("serial/summary.csv").read_text().replace("serial", "") == \
        Path("par/summary.csv").read_text().replace("par", "")
    assert Path("serial/stage1/checkpoint.ckpt").is_file()


def test_parse_flags():
    assert cli.parse_flags("PAD") == ("pretrain", "align", "distill")
    assert cli.parse_flags("distill+pretrain") == ("pretrain", "distill")
    with pytest.raises(cli.CLIError):
        cli.parse_flags("teleport")


def test_selfcheck_fast_passes_quickly(capsys):
    t0 = time.perf_counter()
    assert cli.main(["selfcheck", "--fast"]) == 0
    assert time.perf_counter() - t0 < 60
    assert "selfcheck passed" in capsys.readouterr().out


def test_selfcheck_names_injected_gradient_bug(monkeypatch, capsys):
    real = ad._gelu_grad
    monkeypatch.setattr(ad, "_gelu_grad", lambda x, t: 1.5 * real(x, t))
    assert cli.main(["selfcheck", "--fast", "--only", "op:gelu,op:relu"]) == 1
    out = capsys.readouterr().out
    assert "FAILED" in out and "op:gelu" in out.split("FAILED")[-1]
    assert "op:relu" not in out.split("FAILED")[-1]
