"""Command-line entry point: corpus generation, both training stages, evaluation, ablations, self-checks.

Every command writes into a run directory (content-addressed by a hash of the
resolved configuration and input checksums, under ``$VSEDISTILL_OUT`` or
``./runs``) holding exactly one ``manifest.json``. ``replay`` re-executes a
manifest and compares the deterministic outputs.

Exit codes: 0 ok, 1 self-check or replay mismatch, 2 usage / validation,
3 missing or unreadable input, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import dataclasses
import datetime as dt
import hashlib
import io
import json
import logging
import os
import shutil
import subprocess
import sys
from pathlib import Path

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .corpus import CorpusConfig, CorpusError, generate_corpus, load_corpus, save_corpus
from .decoder import Placement
from .losses import DistillKind
from .model import ModelConfig
from .retrieval import RECALL_KS, evaluate
from .trainer import STAGE1, STAGE2, NumericalAbort, StageError, TrainConfig, TrainingError, finetune_stage, \
    pretrain_stage

log = logging.getLogger("vsedistill")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3, 4
OUT_ENV = "VSEDISTILL_OUT"
MANIFEST = "manifest.json"
# written every run but not expected to be byte-identical on replay
NONDETERMINISTIC = {"metrics.jsonl", MANIFEST, "nan_dump.json"}

AXES = ("tokens", "depth", "heads", "placement", "distill-kind", "components")
AXIS_DEFAULTS = {
    "tokens": "2,4,8,12,16",
    "depth": "1,2,4,6",
    "heads": "1,2,4,8",
    "placement": "prefix,postfix,surround",
    "distill-kind": "l1,l2,negcosine",
    "components": "pretrain,align,pretrain+align,pretrain+distill,pretrain+align+distill",
}
_SHORT_FLAGS = {"p": "pretrain", "a": "align", "d": "distill"}


class CLIError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# small helpers


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def _require_file(path, what: str) -> Path:
    if path is None:
        raise CLIError(EXIT_INPUT, f"missing input: {what} not given")
    p = Path(path)
    if not p.is_file():
        raise CLIError(EXIT_INPUT, f"missing input: {what} {p} does not exist")
    return p.resolve()


def _load_corpus(path):
    p = _require_file(path, "--corpus")
    try:
        return load_corpus(p), p
    except CorpusError as e:
        raise CLIError(EXIT_INPUT, f"unreadable corpus {p}: {e}") from None


def _load_ckpt(path, what: str):
    p = _require_file(path, what)
    try:
        return load_checkpoint(p), p
    except CheckpointError as e:
        raise CLIError(EXIT_INPUT, f"unreadable checkpoint {p}: {e}") from None


def parse_flags(text: str) -> tuple[str, ...]:
    """'pretrain,align' / 'pretrain+align' / 'PA' -> canonical flag tuple."""
    text = text.strip().lower()
    parts = [p for p in text.replace("+", ",").split(",") if p]
    if len(parts) == 1 and parts[0] not in ("pretrain", "align", "distill") and set(parts[0]) <= set(_SHORT_FLAGS):
        parts = [_SHORT_FLAGS[c] for c in parts[0]]
    bad = [p for p in parts if p not in ("pretrain", "align", "distill")]
    if bad or not parts:
        raise CLIError(EXIT_USAGE, f"bad component flags {text!r}; use names from pretrain, align, distill")
    return tuple(n for n in ("pretrain", "align", "distill") if n in parts)


# ---------------------------------------------------------------------------
# run directories and manifests


class Run:
    """A run directory plus the manifest written into it on completion."""

    def __init__(self, args, command: str, config: dict, inputs: dict[str, Path], seed):
        self.command, self.config, self.seed = command, config, seed
        self.inputs = {k: str(v) for k, v in inputs.items()}
        self.input_checksums = {k: _sha256_file(Path(v)) for k, v in inputs.items()}
        key = json.dumps({"command": command, "config": config, "inputs": self.input_checksums},
                         sort_keys=True, default=str)
        self.config_hash = hashlib.sha256(key.encode()).hexdigest()[:16]
        if getattr(args, "run_dir", None):
            self.dir = Path(args.run_dir).resolve()
        else:
            root = Path(args.out_root or os.environ.get(OUT_ENV, "runs"))
            self.dir = (root / f"{command}-{self.config_hash}").resolve()
        if (self.dir / MANIFEST).exists():
            if not getattr(args, "force", False):
                raise CLIError(EXIT_USAGE, f"run directory {self.dir} already holds a manifest; "
                                           f"pass --force to overwrite or --run-dir to choose another")
            shutil.rmtree(self.dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.argv = list(args._argv)
        self.started = _now()
        self.extra_outputs: dict[str, Path] = {}

    def path(self, name: str) -> Path:
        return self.dir / name

    def finish(self, extra: dict | None = None) -> Path:
        outputs = {}
        for p in sorted(self.dir.rglob("*")):
            if p.is_file() and p.name != MANIFEST:
                outputs[str(p.relative_to(self.dir))] = _sha256_file(p)
        for name, p in self.extra_outputs.items():
            outputs[name] = _sha256_file(p)
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "cwd": os.getcwd(),
            "config": self.config,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "version": version_string(),
            "inputs": self.inputs,
            "input_checksums": self.input_checksums,
            "run_dir": str(self.dir),
            "outputs": {k: outputs[k] for k in sorted(outputs)},
            "extra_outputs": {k: str(v) for k, v in self.extra_outputs.items()},
            "nondeterministic_outputs": sorted(k for k in outputs if Path(k).name in NONDETERMINISTIC),
            "started_at": self.started,
            "finished_at": _now(),
            **(extra or {}),
        }
        path = self.dir / MANIFEST
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


class MetricsLog:
    def __init__(self, path: Path):
        self.f = open(path, "a", encoding="utf-8")

    def __call__(self, rec: dict) -> None:
        self.f.write(json.dumps(rec, sort_keys=True) + "\n")
        self.f.flush()
        log.info("%s epoch %d loss %.4f val rSum %.2f", rec["stage"], rec["epoch"], rec["mean_loss"], rec["val_rsum"])

    def close(self):
        self.f.close()


# ---------------------------------------------------------------------------
# config resolution


def _corpus_config(a) -> CorpusConfig:
    return CorpusConfig(n_train=a.train, n_val=a.val, n_test=a.test, n_attributes=a.attributes, n_values=a.values,
                        k=a.k, n_patches=a.patches, patch_dim=a.patch_dim, noise=a.noise, n_test_folds=a.folds,
                        seed=a.seed)


def _train_config(a, flags=("pretrain", "align", "distill"), **over) -> TrainConfig:
    kw = dict(batch_size=a.batch_size, epochs=a.epochs, lr=a.lr, weight_decay=a.weight_decay, seed=a.seed,
              margin=a.margin, warmup_epochs=a.warmup_epochs,
              pretrain="pretrain" in flags, align="align" in flags, distill="distill" in flags)
    for name in ("distill_kind", "sparse_init", "resume", "align_weight", "distill_weight"):
        if hasattr(a, name):
            kw[name] = getattr(a, name)
    kw.update(over)
    return TrainConfig(**kw)


def _model_config(a, corpus) -> ModelConfig:
    dense_len = max(len(s.dense_tokens) for s in corpus.scenes)
    sparse_len = max(len(v) for s in corpus.scenes for v in s.sparse_views)
    return ModelConfig(model_dim=a.dim, embed_dim=a.dim, n_layers=a.layers, n_heads=a.enc_heads,
                       vocab_size=max(64, corpus.config.vocab_needed), dense_max_len=max(64, dense_len),
                       sparse_max_len=max(12, sparse_len), n_patches=corpus.config.n_patches,
                       patch_dim=corpus.config.patch_dim)


def _decoder_overrides(a) -> dict:
    return {"n_mask_tokens": a.tokens, "placement": Placement.parse(a.placement).value,
            "decoder_layers": a.depth, "decoder_heads": a.heads}


def _finetune_flags(a) -> tuple[str, ...]:
    flags = parse_flags(a.flags) if a.flags else ("pretrain", "align", "distill")
    drop = {n for n in ("pretrain", "align", "distill") if getattr(a, f"no_{n}")}
    return tuple(f for f in flags if f not in drop)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_corpus(a) -> int:
    cfg = _corpus_config(a)
    try:
        cfg.validate()
    except CorpusError as e:
        raise CLIError(EXIT_USAGE, str(e)) from None
    run = Run(a, "gen-corpus", {"corpus": cfg.to_dict(), "out": str(Path(a.out).resolve()) if a.out else None}, {},
              cfg.seed)
    corpus = generate_corpus(cfg)
    out = Path(a.out).resolve() if a.out else run.path("corpus.jsonl")
    save_corpus(corpus, out)
    if a.out:
        run.extra_outputs["corpus"] = out
    run.finish({"n_scenes": len(corpus.scenes)})
    print(f"corpus: {out} ({len(corpus.split('train'))} train / {len(corpus.split('val'))} val / "
          f"{len(corpus.split('test'))} test scenes)")
    print(f"run: {run.dir}")
    return EXIT_OK


def _run_pretrain(a, corpus, run_dir: Path) -> tuple[Path, dict]:
    tc = _train_config(a)
    mc = _model_config(a, corpus)
    metrics = MetricsLog(run_dir / "metrics.jsonl")
    try:
        ckpt = pretrain_stage(corpus, tc, mc, on_epoch=metrics, dump_dir=run_dir)
    finally:
        metrics.close()
    path = save_checkpoint(ckpt, run_dir / "checkpoint.ckpt")
    return path, ckpt.meta


def cmd_pretrain(a) -> int:
    corpus, cpath = _load_corpus(a.corpus)
    cfg = {"train": _train_config(a).to_dict(), "model": _model_config(a, corpus).to_dict(), "corpus": str(cpath)}
    run = Run(a, "pretrain", cfg, {"corpus": cpath}, a.seed)
    path, meta = _run_pretrain(a, corpus, run.dir)
    run.finish({"best_epoch": meta["best_epoch"], "best_val_rsum": meta["best_val_rsum"]})
    print(f"checkpoint: {path}")
    print(f"run: {run.dir}")
    return EXIT_OK


def _finetune_plan(a, corpus, flags, from_path):
    """Resolve (stage-1 checkpoint or None, TrainConfig, ModelConfig) for one fine-tuning run."""
    tc = _train_config(a, flags)
    if from_path is None:
        if tc.pretrain:
            raise CLIError(EXIT_INPUT, "missing input: finetune needs --from <stage-1 checkpoint> "
                                       "(or --no-pretrain to start from fresh encoders)")
        base, stage1 = _model_config(a, corpus), None
    else:
        stage1, _ = _load_ckpt(from_path, "--from")
        if stage1.stage == STAGE2 and not tc.resume:
            raise CLIError(EXIT_USAGE, f"{from_path} is a stage-2 checkpoint; pass --resume to continue it")
        if not tc.pretrain and not tc.resume:
            raise CLIError(EXIT_USAGE, "--from conflicts with --no-pretrain")
        base = stage1.model.config
    try:
        mc = dataclasses.replace(base, **_decoder_overrides(a)) if not (stage1 and stage1.stage == STAGE2) else base
    except ValueError as e:
        raise CLIError(EXIT_USAGE, str(e)) from None
    return stage1, tc, mc


def _run_finetune(a, corpus, flags, from_path, run_dir: Path) -> tuple[Path, object]:
    stage1, tc, mc = _finetune_plan(a, corpus, flags, from_path)
    if flags == ("pretrain",):
        # no fine-tuning at all: the stage-1 model is the result
        path = save_checkpoint(stage1, run_dir / "checkpoint.ckpt")
        return path, stage1
    metrics = MetricsLog(run_dir / "metrics.jsonl")
    try:
        ckpt = finetune_stage(stage1, corpus, tc, mc, on_epoch=metrics, dump_dir=run_dir)
    finally:
        metrics.close()
    return save_checkpoint(ckpt, run_dir / "checkpoint.ckpt"), ckpt


def cmd_finetune(a) -> int:
    corpus, cpath = _load_corpus(a.corpus)
    flags = _finetune_flags(a)
    if flags == ("pretrain",) or not ({"align", "distill"} & set(flags)):
        raise CLIError(EXIT_USAGE, "finetune needs align and/or distill enabled")
    stage1, tc, mc = _finetune_plan(a, corpus, flags, a.from_)
    inputs = {"corpus": cpath}
    if a.from_:
        inputs["from"] = Path(a.from_).resolve()
    cfg = {"train": tc.to_dict(), "model": mc.to_dict(), "corpus": str(cpath),
           "from": str(inputs.get("from")) if a.from_ else None}
    run = Run(a, "finetune", cfg, inputs, a.seed)
    path, ckpt = _run_finetune(a, corpus, flags, a.from_, run.dir)
    run.finish({"best_epoch": ckpt.meta["best_epoch"], "best_val_rsum": ckpt.meta["best_val_rsum"],
                "flags": list(flags)})
    print(f"checkpoint: {path}")
    print(f"run: {run.dir}")
    return EXIT_OK


def _write_report(report, out_dir: Path) -> None:
    (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out_dir / "report.csv").write_text(report.to_csv(), encoding="utf-8")


def _evaluate(ckpt, corpus, split: str, folds: bool, text: str):
    try:
        return evaluate(ckpt, corpus, split=split, folds=folds, text=text)
    except ValueError as e:
        raise CLIError(EXIT_USAGE, str(e)) from None


def cmd_eval(a) -> int:
    corpus, cpath = _load_corpus(a.corpus)
    ckpt, kpath = _load_ckpt(a.checkpoint, "--checkpoint")
    cfg = {"split": a.split, "folds": a.folds, "text": a.text, "corpus": str(cpath), "checkpoint": str(kpath)}
    run = Run(a, "eval", cfg, {"corpus": cpath, "checkpoint": kpath}, None)
    report = _evaluate(ckpt, corpus, a.split, a.folds, a.text)
    _write_report(report, run.dir)
    run.finish({"rsum": report.rsum})
    print(" ".join(f"{d}_r{k}={v:.2f}" for (d, k), v in
                   zip([(d, k) for d in ("tr", "ir") for k in RECALL_KS], report.recalls)) + f" rsum={report.rsum:.2f}")
    print(f"report: {run.path('report.json')}")
    print(f"run: {run.dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablations


def _parse_axis_values(axis: str, text: str) -> list:
    vals = [v.strip() for v in text.split(",") if v.strip()]
    if not vals:
        raise CLIError(EXIT_USAGE, f"no values for axis {axis}")
    try:
        if axis in ("tokens", "depth", "heads"):
            out = [int(v) for v in vals]
            if min(out) < 1:
                raise ValueError("values must be positive")
            return out
        if axis == "placement":
            return [Placement.parse(v).value for v in vals]
        if axis == "distill-kind":
            return [DistillKind.parse(v).value for v in vals]
    except ValueError as e:
        raise CLIError(EXIT_USAGE, f"bad value for axis {axis}: {e}") from None
    return ["+".join(parse_flags(v)) for v in vals]


def _setting_namespace(a, axis: str, value):
    ns = argparse.Namespace(**vars(a))
    ns.flags, ns.no_pretrain, ns.no_align, ns.no_distill = None, False, False, False
    if axis == "tokens":
        ns.tokens = value
    elif axis == "depth":
        ns.depth = value
    elif axis == "heads":
        ns.heads = value
    elif axis == "placement":
        ns.placement = value
    elif axis == "distill-kind":
        ns.distill_kind = value
    else:
        ns.flags = value
    return ns


def ablate_one(job: dict) -> dict:
    """One ablation setting: fine-tune (unless pretrain-only), evaluate, write its own manifest."""
    a = job["ns"]
    corpus = load_corpus(job["corpus"])
    flags = _finetune_flags(a)
    run_dir = Path(job["dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    from_path = job["stage1"] if "pretrain" in flags else None
    started = _now()
    path, ckpt = _run_finetune(a, corpus, flags, from_path, run_dir)
    report = evaluate(ckpt, corpus, split=a.split, folds=a.folds)
    _write_report(report, run_dir)
    tc = _train_config(a, flags)
    manifest = {"command": "ablate-setting", "axis": job["axis"], "value": job["value"], "flags": list(flags),
                "train_config": tc.to_dict(), "model_config": ckpt.model.config.to_dict(),
                "stage1": job["stage1"] if from_path else None, "corpus": job["corpus"], "seed": a.seed,
                "version": version_string(), "started_at": started, "finished_at": _now(),
                "outputs": {p.name: _sha256_file(p) for p in sorted(run_dir.iterdir()) if p.is_file()}}
    (run_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"axis": job["axis"], "value": job["value"], "order": job["order"], "recalls": report.recalls,
            "rsum": report.rsum, "dir": str(run_dir)}


def summary_csv(rows: list[dict]) -> str:
    rows = sorted(rows, key=lambda r: (-r["rsum"], r["order"]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["axis", "value", "tr_r1", "tr_r5", "tr_r10", "ir_r1", "ir_r5", "ir_r10", "rsum", "run_dir"])
    for r in rows:
        w.writerow([r["axis"], r["value"], *[repr(float(x)) for x in r["recalls"]], repr(float(r["rsum"])),
                    Path(r["dir"]).name])
    return buf.getvalue()


def cmd_ablate(a) -> int:
    if a.axis not in AXES:
        raise CLIError(EXIT_USAGE, f"unknown axis {a.axis!r}; expected one of {', '.join(AXES)}")
    values = _parse_axis_values(a.axis, a.values or AXIS_DEFAULTS[a.axis])
    if len(set(map(str, values))) != len(values):
        raise CLIError(EXIT_USAGE, f"duplicate values for axis {a.axis}")
    if a.jobs < 1:
        raise CLIError(EXIT_USAGE, "--jobs must be at least 1")
    corpus, cpath = _load_corpus(a.corpus)
    inputs = {"corpus": cpath}
    if a.from_:
        stage1, kpath = _load_ckpt(a.from_, "--from")
        if stage1.stage != STAGE1:
            raise CLIError(EXIT_USAGE, f"--from must be a stage-1 checkpoint, got {stage1.stage}")
        inputs["from"] = kpath
    # validate every setting before spending any compute
    for v in values:
        ns = _setting_namespace(a, a.axis, v)
        try:
            _train_config(ns, _finetune_flags(ns))
            dataclasses.replace(_model_config(ns, corpus), **_decoder_overrides(ns))
        except (ValueError, TrainingError) as e:
            raise CLIError(EXIT_USAGE, f"setting {a.axis}={v}: {e}") from None
    cfg = {"axis": a.axis, "values": [str(v) for v in values], "train": _train_config(a).to_dict(),
           "model": _model_config(a, corpus).to_dict(), "decoder": _decoder_overrides(a),
           "distill_kind": a.distill_kind, "split": a.split, "folds": a.folds, "corpus": str(cpath),
           "from": str(inputs.get("from")) if a.from_ else None}
    run = Run(a, "ablate", cfg, inputs, a.seed)
    if a.from_:
        stage1_path = str(inputs["from"])
    else:
        (run.dir / "stage1").mkdir()
        stage1_path = str(_run_pretrain(a, corpus, run.dir / "stage1")[0])
    jobs = [{"ns": _setting_namespace(a, a.axis, v), "axis": a.axis, "value": str(v), "order": i,
             "corpus": str(cpath), "stage1": stage1_path,
             "dir": str(run.dir / "settings" / f"{a.axis}={v}")} for i, v in enumerate(values)]
    if a.jobs == 1:
        rows = [ablate_one(j) for j in jobs]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=a.jobs) as pool:
            rows = list(pool.map(ablate_one, jobs))
    run.path("summary.csv").write_text(summary_csv(rows), encoding="utf-8")
    run.finish({"rows": len(rows)})
    for r in sorted(rows, key=lambda r: (-r["rsum"], r["order"])):
        print(f"{a.axis}={r['value']}: rSum {r['rsum']:.2f}")
    print(f"summary: {run.path('summary.csv')}")
    print(f"run: {run.dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# self-check and replay


def cmd_selfcheck(a) -> int:
    from .selfcheck import run_selfcheck
    only = [s for s in a.only.split(",") if s] if a.only else None
    results = run_selfcheck(fast=a.fast, seed=a.seed, emit=print, only=only)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"selfcheck FAILED ({len(failed)}/{len(results)}): {', '.join(failed)}")
        return EXIT_FAIL
    print(f"selfcheck passed ({len(results)} checks)")
    return EXIT_OK


def cmd_replay(a) -> int:
    mpath = _require_file(a.manifest, "manifest")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
        argv = list(manifest["argv"])
    except (json.JSONDecodeError, KeyError) as e:
        raise CLIError(EXIT_INPUT, f"unreadable manifest {mpath}: {e}") from None
    target = Path(a.run_dir).resolve() if a.run_dir else mpath.parent.with_name(mpath.parent.name + "-replay")
    argv = _strip_run_options(argv) + ["--run-dir", str(target), "--force"]
    if manifest["command"] == "gen-corpus" and manifest["config"].get("out"):
        argv = _replace_option(argv, "--out", str(target / "corpus.jsonl"))
    prev = os.getcwd()
    os.chdir(manifest.get("cwd", prev))
    try:
        code = main(argv)
    finally:
        os.chdir(prev)
    if code != EXIT_OK:
        return code
    replayed = json.loads((target / MANIFEST).read_text(encoding="utf-8"))
    skip = set(manifest.get("nondeterministic_outputs", []))
    old = {**manifest["outputs"]}
    new = {**replayed["outputs"]}
    mismatched = sorted(k for k in old if k not in skip and old.get(k) != new.get(k) and k != "corpus")
    if "corpus" in old:
        new_corpus = replayed["outputs"].get("corpus.jsonl", replayed["outputs"].get("corpus"))
        if old["corpus"] != new_corpus:
            mismatched.append("corpus")
    if mismatched:
        print(f"replay MISMATCH in {', '.join(mismatched)}")
        return EXIT_FAIL
    print(f"replay reproduced {len([k for k in old if k not in skip])} outputs in {target}")
    return EXIT_OK


def _strip_run_options(argv: list[str]) -> list[str]:
    out, skip = [], False
    for tok in argv:
        if skip:
            skip = False
            continue
        if tok in ("--run-dir", "--out-root"):
            skip = True
            continue
        if tok == "--force" or tok.startswith("--run-dir=") or tok.startswith("--out-root="):
            continue
        out.append(tok)
    return out


def _replace_option(argv: list[str], opt: str, value: str) -> list[str]:
    out = list(argv)
    for i, tok in enumerate(out):
        if tok == opt and i + 1 < len(out):
            out[i + 1] = value
        elif tok.startswith(opt + "="):
            out[i] = f"{opt}={value}"
    return out


# ---------------------------------------------------------------------------
# parser


def _add_run_options(p):
    p.add_argument("--config", help="flat key=value file; explicit flags win")
    p.add_argument("--run-dir", help="write here instead of the content-addressed directory")
    p.add_argument("--out-root", help=f"root for run directories (default ${OUT_ENV} or ./runs)")
    p.add_argument("--force", action="store_true", help="overwrite an existing run directory")


def _add_model_options(p):
    p.add_argument("--dim", type=int, default=32, help="encoder width (also the embedding size)")
    p.add_argument("--layers", type=int, default=2, help="encoder depth")
    p.add_argument("--enc-heads", type=int, default=2, help="encoder attention heads")


def _add_train_options(p):
    p.add_argument("--corpus", help="corpus JSONL file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--margin", type=float, default=0.2)
    p.add_argument("--warmup-epochs", type=int, default=1, help="epochs of all-negatives loss before mining")


def _add_decoder_options(p):
    p.add_argument("--tokens", type=int, default=8, help="number of mask tokens")
    p.add_argument("--depth", type=int, default=4, help="decoder layers")
    p.add_argument("--heads", type=int, default=4, help="decoder attention heads")
    p.add_argument("--placement", default="surround", choices=[x.value for x in Placement])
    p.add_argument("--distill-kind", default="negcosine", choices=[x.value for x in DistillKind])
    p.add_argument("--sparse-init", default="dense", choices=["dense", "scratch"])
    p.add_argument("--align-weight", type=float, default=1.0)
    p.add_argument("--distill-weight", type=float, default=1.0)


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="vsedistill", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = subs["gen-corpus"] = sub.add_parser("gen-corpus", help="generate a synthetic scene corpus")
    cd = CorpusConfig()
    p.add_argument("--seed", type=int, default=cd.seed)
    p.add_argument("--train", type=int, default=cd.n_train)
    p.add_argument("--val", type=int, default=cd.n_val)
    p.add_argument("--test", type=int, default=cd.n_test)
    p.add_argument("--attributes", type=int, default=cd.n_attributes)
    p.add_argument("--values", type=int, default=cd.n_values)
    p.add_argument("--k", type=int, default=cd.k, help="attributes per sparse view")
    p.add_argument("--noise", type=float, default=cd.noise)
    p.add_argument("--patches", type=int, default=cd.n_patches)
    p.add_argument("--patch-dim", type=int, default=cd.patch_dim)
    p.add_argument("--folds", type=int, default=cd.n_test_folds, help="test folds")
    p.add_argument("--out", help="corpus path (default: <run dir>/corpus.jsonl)")
    _add_run_options(p)
    p.set_defaults(func=cmd_gen_corpus)

    p = subs["pretrain"] = sub.add_parser("pretrain", help="stage 1: align images with dense text")
    _add_train_options(p)
    _add_model_options(p)
    _add_run_options(p)
    p.set_defaults(func=cmd_pretrain)

    p = subs["finetune"] = sub.add_parser("finetune", help="stage 2: sparse alignment and distillation")
    _add_train_options(p)
    _add_model_options(p)
    _add_decoder_options(p)
    p.add_argument("--from", dest="from_", help="stage-1 checkpoint (stage-2 with --resume)")
    p.add_argument("--flags", help="components to enable, e.g. pretrain,align,distill")
    p.add_argument("--no-pretrain", action="store_true", help="start from fresh encoders")
    p.add_argument("--no-align", action="store_true")
    p.add_argument("--no-distill", action="store_true")
    p.add_argument("--resume", action="store_true", help="continue a stage-2 checkpoint")
    _add_run_options(p)
    p.set_defaults(func=cmd_finetune)

    p = subs["eval"] = sub.add_parser("eval", help="bidirectional Recall@K and rSum")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--folds", action="store_true", help="average metrics over test folds")
    p.add_argument("--text", default="sparse", choices=["sparse", "dense"])
    _add_run_options(p)
    p.set_defaults(func=cmd_eval)

    p = subs["ablate"] = sub.add_parser("ablate", help="sweep one axis; one run per setting")
    p.add_argument("--axis", required=False, help=", ".join(AXES))
    p.add_argument("--values", help="comma-separated settings (default: the standard sweep for the axis)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--from", dest="from_", help="shared stage-1 checkpoint (default: pretrain once)")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--folds", action="store_true")
    _add_train_options(p)
    _add_model_options(p)
    _add_decoder_options(p)
    _add_run_options(p)
    p.set_defaults(func=cmd_ablate)

    p = subs["selfcheck"] = sub.add_parser("selfcheck", help="gradient, oracle and round-trip checks")
    p.add_argument("--fast", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--only", help="comma-separated check names")
    p.set_defaults(func=cmd_selfcheck)

    p = subs["replay"] = sub.add_parser("replay", help="re-run a manifest and compare outputs")
    p.add_argument("manifest")
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_replay)
    return parser, subs


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def read_config_file(path: Path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CLIError(EXIT_USAGE, f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def _apply_config_file(sub: argparse.ArgumentParser, path: Path) -> None:
    actions = {a.dest: a for a in sub._actions}
    aliases = {"from": "from_"}
    defaults = {}
    for key, raw in read_config_file(path).items():
        dest = aliases.get(key, key)
        act = actions.get(dest)
        if act is None or dest in ("config", "help"):
            raise CLIError(EXIT_USAGE, f"{path}: unknown key {key!r}")
        try:
            if isinstance(act, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                val = _bool(raw)
            else:
                val = act.type(raw) if act.type else raw
            if act.choices is not None and val not in act.choices:
                raise ValueError(f"{val!r} not in {list(act.choices)}")
        except ValueError as e:
            raise CLIError(EXIT_USAGE, f"{path}: bad value for {key}: {e}") from None
        defaults[dest] = val
    sub.set_defaults(**defaults)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "config", None):
            cfg_path = _require_file(args.config, "--config")
            parser, subs = build_parser()
            _apply_config_file(subs[args.command], cfg_path)
            args = parser.parse_args(argv)
    except SystemExit as e:  # argparse usage errors
        return EXIT_USAGE if e.code else EXIT_OK
    except CLIError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    args._argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except CLIError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        print(f"dump: {e.dump_path}")
        return EXIT_NUMERIC
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, CorpusError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
