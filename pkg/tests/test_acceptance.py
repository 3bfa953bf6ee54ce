"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in the terminal summary (see conftest.py). Runtime
budgets are part of each criterion and are checked alongside the result.
"""

import csv
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from vsedistill import autodiff as ad
from vsedistill import cli
from vsedistill.checkpoint import dumps_checkpoint, load_checkpoint, loads_checkpoint, save_checkpoint
from vsedistill.corpus import CorpusConfig, dumps_corpus, generate_corpus, load_corpus, save_corpus
from vsedistill.losses import hardest_negatives
from vsedistill.model import ModelConfig, VSEModel, dense_embeddings, sparse_embeddings
from vsedistill.retrieval import (RetrievalReport, evaluate, multi_view_ground_truth, ranking_oracle,
                                  recall_at_k)
from vsedistill.selfcheck import (FORWARD_CASES, LOSS_CASES, PRIMITIVE_CASES, hardest_negative_oracle,
                                  random_similarity, run_gradient_case)
from vsedistill.trainer import AdamWState, TrainConfig, finetune_loss, finetune_stage, optimizer_step, \
    pretrain_stage

from conftest import ACCEPTANCE_LINES

SEEDS = range(5)
GRID = ("P", "A", "PA", "PD", "PAD")


def record(n: int, title: str, ok: bool, detail: str, elapsed: float, budget: float) -> None:
    within = elapsed < budget
    passed = ok and within
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {n}: {title} | {detail} | {elapsed:.1f}s (budget {budget:.0f}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
    assert within, line


def test_criterion_1_rsum_arithmetic():
    t0 = time.perf_counter()
    rep = RetrievalReport.from_recalls([82.8, 96.1, 98.3], [68.5, 91.3, 94.9])
    err = abs(rep.rsum - 531.9)
    record(1, "rSum of six reference recalls", err < 1e-9, f"rsum={rep.rsum!r}, |err|={err:.1e}",
           time.perf_counter() - t0, 1)


def test_criterion_2_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(20240)
    results = [run_gradient_case(name, 100, rng) for name in (*LOSS_CASES, *FORWARD_CASES, *PRIMITIVE_CASES)]
    failed = [r.name for r in results if not r.passed]
    worst = max(r.max_rel_err for r in results)
    excluded = sum(r.n_excluded for r in results)
    for r in results:
        print(r.line())
    record(2, "finite-difference gradient suite", not failed,
           f"{len(results)} cases x 100 points, max rel err {worst:.2e}, {excluded} hinge points resampled"
           + (f", failed: {', '.join(failed)}" if failed else ""), time.perf_counter() - t0, 120)


def test_criterion_3_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(777)
    mining_bad = ties = 0
    for _ in range(1000):
        n = int(rng.integers(2, 65))
        S = random_similarity(rng, n, n)
        off = S[~np.eye(n, dtype=bool)].reshape(n, n - 1)
        ties += int(np.any(np.sum(off == off.max(axis=1, keepdims=True), axis=1) > 1))
        got, ref = hardest_negatives(S), hardest_negative_oracle(S)
        mining_bad += not (np.array_equal(got[0], ref[0]) and np.array_equal(got[1], ref[1]))
    rank_bad = 0
    for i in range(1000):
        # half at the 32 x 160 multi-view shape, half at random sizes
        views = 5 if i % 2 == 0 else int(rng.integers(1, 6))
        n_img = 32 if i % 2 == 0 else int(rng.integers(1, 64 // views + 1))
        S = random_similarity(rng, n_img, n_img * views)
        if i % 50 == 0:
            S = np.zeros_like(S)
        i2t, t2i = multi_view_ground_truth(n_img, views)
        for direction, gt, n_items in (("i2t", i2t, n_img * views), ("t2i", t2i, n_img)):
            for k in {1, min(5, n_items), min(10, n_items), n_items}:
                rank_bad += recall_at_k(S, gt, k, direction) != ranking_oracle(S, gt, k, direction)
    record(3, "mining and ranking oracles", mining_bad == 0 and rank_bad == 0,
           f"mining 1000 instances ({ties} with tied maxima), {mining_bad} mismatches; "
           f"recall 1000 instances, {rank_bad} mismatches", time.perf_counter() - t0, 60)


def test_criterion_4_zero_init_identity():
    t0 = time.perf_counter()
    corpus = generate_corpus(CorpusConfig(n_train=32, n_val=4, n_test=4, seed=9))
    rng = np.random.default_rng(4)
    bad = 0
    for i in range(100):
        mc = ModelConfig(n_mask_tokens=int(rng.integers(1, 17)), placement=["prefix", "postfix", "surround"][i % 3],
                         decoder_layers=int(rng.integers(1, 5)), decoder_heads=[1, 2, 4, 8][i % 4])
        model = VSEModel.initialize(mc, np.random.default_rng(i))
        model.add_sparse_branch(np.random.default_rng(1000 + i))
        n = int(rng.integers(1, 6))
        tokens = [list(rng.integers(2, 26, size=int(rng.integers(1, 13)))) for _ in range(n)]
        with ad.no_grad():
            t_s, t_hat = sparse_embeddings(model, tokens)
        bad += t_hat.data.tobytes() != t_s.data.tobytes()

    model = VSEModel.initialize(ModelConfig(), np.random.default_rng(0))
    model.add_sparse_branch(np.random.default_rng(1))
    cfg = TrainConfig(align=False)
    params = model.named_parameters(("sparse", "decoder"))
    train = corpus.split("train")[:16]
    with ad.no_grad():
        teacher = dense_embeddings(model, [s.dense_tokens for s in train]).data
    loss, _ = finetune_loss(model, train, np.zeros(16, dtype=int), teacher, cfg, epoch=0)
    ad.backward(loss)
    optimizer_step(params, AdamWState(), cfg, cfg.lr)
    with ad.no_grad():
        t_s, t_hat = sparse_embeddings(model, [s.sparse_views[0] for s in train])
    gap = float(np.linalg.norm(t_hat.data - t_s.data))
    record(4, "zero-init decoder identity", bad == 0 and gap > 0,
           f"100 inputs, {bad} not bit-exact; after one distillation step ||t_hat - t_s|| = {gap:.3e}",
           time.perf_counter() - t0, 60)


@pytest.fixture(scope="module")
def flag_grid():
    """Full flag grid on the default corpus for five seeds, with every stage-2 epoch's dense checksum."""
    t0 = time.perf_counter()
    scores, freeze = {}, []
    for seed in SEEDS:
        corpus = generate_corpus(CorpusConfig(seed=seed))
        s1 = pretrain_stage(corpus, TrainConfig(seed=seed))
        row = {"P": evaluate(s1, corpus).rsum}
        for name in GRID[1:]:
            cfg = TrainConfig(seed=seed, pretrain="P" in name, align="A" in name, distill="D" in name)
            recs = []
            ck = finetune_stage(s1 if cfg.pretrain else None, corpus, cfg, on_epoch=recs.append)
            expected = s1.model.checksum(("dense",)) if cfg.pretrain else ck.meta["stage1_dense_checksum"]
            freeze.append((seed, name, [r["dense_checksum"] for r in recs], expected, ck.model.checksum(("dense",))))
            row[name] = evaluate(ck, corpus).rsum
        scores[seed] = row
        print(f"seed {seed}: " + ", ".join(f"{k}={v:.1f}" for k, v in row.items()))
    return scores, freeze, time.perf_counter() - t0


def test_criterion_5_freeze_invariant(flag_grid):
    _, freeze, elapsed = flag_grid
    t0 = time.perf_counter()
    bad = [(s, n) for s, n, per_epoch, ref, final in freeze if any(c != ref for c in per_epoch) or final != ref]
    epochs = sum(len(p) for _, _, p, _, _ in freeze)
    record(5, "dense encoder frozen in stage 2", not bad and epochs > 0,
           f"{len(freeze)} stage-2 runs, {epochs} epoch checksums, {len(bad)} changed",
           elapsed + time.perf_counter() - t0, 1800)


def test_criterion_6_flag_grid_ordering(flag_grid):
    scores, _, elapsed = flag_grid
    full_beats_align = sum(scores[s]["PAD"] > scores[s]["A"] for s in SEEDS)
    pretrain_lowest = sum(all(scores[s]["P"] < scores[s][k] for k in GRID[1:]) for s in SEEDS)
    means = {k: np.mean([scores[s][k] for s in SEEDS]) for k in GRID}
    record(6, "flag grid ordering on the default corpus", full_beats_align >= 4 and pretrain_lowest >= 4,
           f"PAD > A in {full_beats_align}/5 seeds, P lowest in {pretrain_lowest}/5; mean test rSum "
           + ", ".join(f"{k}={v:.1f}" for k, v in means.items()), elapsed, 1800)


def _strip_wall_time(path: Path) -> list[dict]:
    return [{k: v for k, v in json.loads(line).items() if k != "wall_time"}
            for line in path.read_text().splitlines()]


def test_criterion_7_cli_determinism(tmp_path, monkeypatch):
    t0 = time.perf_counter()
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "runs"))
    assert cli.main(["gen-corpus", "--out", "corpus.jsonl"]) == 0
    codes = []
    for r in ("a", "b"):
        codes.append(cli.main(["pretrain", "--corpus", "corpus.jsonl", "--run-dir", f"{r}/pre"]))
        codes.append(cli.main(["finetune", "--corpus", "corpus.jsonl", "--from", f"{r}/pre/checkpoint.ckpt",
                               "--flags", "pretrain,align,distill", "--run-dir", f"{r}/ft"]))
        codes.append(cli.main(["eval", "--corpus", "corpus.jsonl", "--checkpoint", f"{r}/ft/checkpoint.ckpt",
                               "--run-dir", f"{r}/eval"]))
    same_report = Path("a/eval/report.json").read_bytes() == Path("b/eval/report.json").read_bytes()
    same_ckpt = all(Path(f"a/{s}/checkpoint.ckpt").read_bytes() == Path(f"b/{s}/checkpoint.ckpt").read_bytes()
                    for s in ("pre", "ft"))
    same_metrics = all(_strip_wall_time(Path(f"a/{s}/metrics.jsonl")) == _strip_wall_time(Path(f"b/{s}/metrics.jsonl"))
                       for s in ("pre", "ft"))
    rsum = json.loads(Path("a/eval/report.json").read_text())["rsum"]
    record(7, "CLI pretrain + finetune + eval determinism",
           codes == [0] * 6 and same_report and same_ckpt and same_metrics,
           f"exit codes {codes}, report.json identical={same_report}, checkpoints identical={same_ckpt}, "
           f"metric logs identical={same_metrics}, rsum={rsum:.2f}", time.perf_counter() - t0, 1800)


def test_criterion_8_ablation_plumbing(tmp_path, monkeypatch):
    t0 = time.perf_counter()
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "runs"))
    toy = ["--epochs", "2"]
    assert cli.main(["gen-corpus", "--train", "64", "--val", "16", "--test", "16", "--out", "toy.jsonl"]) == 0
    assert cli.main(["pretrain", "--corpus", "toy.jsonl", *toy, "--run-dir", "stage1"]) == 0
    expected = {axis: [v for v in cli.AXIS_DEFAULTS[axis].split(",")] for axis in cli.AXES}
    problems, total = [], 0
    for axis in cli.AXES:
        code = cli.main(["ablate", "--axis", axis, "--corpus", "toy.jsonl", "--from", "stage1/checkpoint.ckpt",
                         *toy, "--run-dir", f"ablate-{axis}"])
        if code != 0:
            problems.append(f"{axis}: exit {code}")
            continue
        with open(f"ablate-{axis}/summary.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        total += len(rows)
        header_ok = rows and list(rows[0]) == ["axis", "value", "tr_r1", "tr_r5", "tr_r10", "ir_r1", "ir_r5",
                                               "ir_r10", "rsum", "run_dir"]
        values = sorted(r["value"] for r in rows)
        rsums = [float(r["rsum"]) for r in rows]
        if not header_ok or values != sorted(expected[axis]) or not all(math.isfinite(x) for x in rsums) \
                or rsums != sorted(rsums, reverse=True):
            problems.append(f"{axis}: malformed summary")
        print(f"{axis}: " + ", ".join(f"{r['value']}={float(r['rsum']):.1f}" for r in rows))
    record(8, "ablation sweeps over every axis", not problems,
           f"{len(cli.AXES)} axes, {total} rows" + (f"; problems: {problems}" if problems else ", all rSum finite"),
           time.perf_counter() - t0, 2700)


def test_criterion_9_roundtrips(tmp_path):
    t0 = time.perf_counter()
    corpus = generate_corpus(CorpusConfig(n_train=64, n_val=16, n_test=32, seed=5, n_test_folds=2))
    path = save_corpus(corpus, tmp_path / "c.jsonl")
    back = load_corpus(path)
    corpus_ok = back == corpus and dumps_corpus(back) == path.read_text()
    s1 = pretrain_stage(back, TrainConfig(epochs=2))
    s2 = finetune_stage(s1, back, TrainConfig(epochs=2))
    ckpt_ok = True
    for ck, name in ((s1, "s1"), (s2, "s2")):
        reloaded = load_checkpoint(save_checkpoint(ck, tmp_path / f"{name}.ckpt"))
        ckpt_ok &= dumps_checkpoint(reloaded) == (tmp_path / f"{name}.ckpt").read_bytes()
        ckpt_ok &= loads_checkpoint(dumps_checkpoint(reloaded)).model.checksum() == ck.model.checksum()
        for text in ("sparse", "dense"):
            for folds in (False, True):
                ckpt_ok &= evaluate(reloaded, corpus, text=text, folds=folds).to_json() == \
                    evaluate(ck, corpus, text=text, folds=folds).to_json()
    record(9, "corpus and checkpoint round-trips", corpus_ok and ckpt_ok,
           f"corpus identical={corpus_ok}, checkpoints + evaluation bit-identical={ckpt_ok}",
           time.perf_counter() - t0, 30)
