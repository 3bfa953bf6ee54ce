"""Registry of self-verification checks shared by the CLI and the acceptance tests.

Gradient cases return a ``CheckReport`` per random point, or ``None`` when the
sampled point falls inside a hinge neighborhood (a kink of relu, a near-tie in
hardest-negative mining) where finite differences are not meaningful. The
callers resample those points.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import CheckReport, Tensor

HINGE_DELTA = 1e-4  # ten FD steps; perturbing by h moves a hinge argument by O(h)


def _w_sum(out: Tensor, w: np.ndarray) -> Tensor:
    """Scalar projection <out, w> so that every output coordinate matters."""
    return ad.sum(ad.hadamard(out, Tensor(w)))


def _check_each_input(fn, inputs: list[np.ndarray], rng, label: str) -> CheckReport:
    out_shape = fn(*[Tensor(x) for x in inputs]).shape
    w = rng.standard_normal(out_shape)
    reports = []
    for i in range(len(inputs)):
        def f(x, i=i):
            args = [Tensor(a) for a in inputs]
            args[i] = x
            return _w_sum(fn(*args), w)
        reports.append(ad.grad_check(f, inputs[i], label=f"{label}[{i}]"))
    return _merge(reports, label)


def _merge(reports: list[CheckReport], label: str) -> CheckReport:
    fails = [f for r in reports for f in r.failures]
    return CheckReport(not fails, max((r.max_rel_err for r in reports), default=0.0),
                       sum(r.n_checked for r in reports), sum(r.n_skipped for r in reports), fails, label)


# ---------------------------------------------------------------------------
# primitive cases; each looks its op up on the autodiff module at call time


def _shape(rng, lo=2, hi=4, ndim=2):
    return tuple(int(s) for s in rng.integers(lo, hi + 1, size=ndim))


def _op(name):
    return lambda *a, **k: getattr(ad, name)(*a, **k)


def _away_from_zero(rng, shape, delta=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < delta, np.sign(x + 1e-12) * delta, x)


def _case_binary(name):
    def case(rng):
        sh = _shape(rng)
        a = rng.standard_normal(sh)
        b = rng.standard_normal(sh[-1:]) if rng.random() < 0.5 else rng.standard_normal(sh)
        if name == "div":
            b = _away_from_zero(rng, b.shape, 0.5)
        return _check_each_input(_op(name), [a, b], rng, f"op:{name}")
    return case


def _case_unary(name, make=None, **kw):
    def case(rng):
        x = make(rng) if make else rng.standard_normal(_shape(rng, ndim=int(rng.integers(1, 4))))
        return _check_each_input(lambda t: getattr(ad, name)(t, **kw), [x], rng, f"op:{name}")
    return case


def _case_relu(rng):
    x = _away_from_zero(rng, _shape(rng), HINGE_DELTA * 10)
    return _check_each_input(_op("relu"), [x], rng, "op:relu")


def _case_matmul(rng):
    n, k, m = _shape(rng, ndim=3)
    kind = int(rng.integers(0, 4))
    if kind == 0:
        a, b = rng.standard_normal((n, k)), rng.standard_normal((k, m))
    elif kind == 1:
        a, b = rng.standard_normal((2, n, k)), rng.standard_normal((k, m))
    elif kind == 2:
        a, b = rng.standard_normal((2, 3, n, k)), rng.standard_normal((2, 3, k, m))
    else:
        a, b = rng.standard_normal(k), rng.standard_normal((k, m))
    return _check_each_input(_op("matmul"), [a, b], rng, "op:matmul")


def _case_scalar_mul(rng):
    c = float(rng.standard_normal())
    return _check_each_input(lambda t: ad.scalar_mul(t, c), [rng.standard_normal(_shape(rng))], rng, "op:scalar_mul")


def _case_reduce(name):
    def case(rng):
        x = rng.standard_normal(_shape(rng, ndim=3))
        axis = [None, 0, 1, -1][int(rng.integers(0, 4))]
        return _check_each_input(lambda t: getattr(ad, name)(t, axis=axis), [x], rng, f"op:{name}")
    return case


def _case_dot(rng):
    n = int(rng.integers(2, 6))
    return _check_each_input(_op("dot"), [rng.standard_normal(n), rng.standard_normal(n)], rng, "op:dot")


def _case_concat(rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((int(rng.integers(1, 4)), 3))
    return _check_each_input(lambda x, y: ad.concat_along_axis([x, y], axis=0), [a, b], rng, "op:concat_along_axis")


def _case_reshape(rng):
    x = rng.standard_normal((2, 3, 4))
    return _check_each_input(lambda t: ad.reshape(t, (4, 6)), [x], rng, "op:reshape")


def _case_transpose(rng):
    x = rng.standard_normal((2, 3, 4))
    return _check_each_input(lambda t: ad.transpose(t, (2, 0, 1)), [x], rng, "op:transpose")


def _case_index(rng):
    x = rng.standard_normal((5, 3))
    idx = rng.integers(0, 5, size=7)  # repeats exercise scatter-add
    return _check_each_input(lambda t: ad.index(t, idx), [x], rng, "op:index")


PRIMITIVE_CASES: dict[str, Callable] = {
    "op:add": _case_binary("add"),
    "op:sub": _case_binary("sub"),
    "op:hadamard": _case_binary("hadamard"),
    "op:div": _case_binary("div"),
    "op:scalar_mul": _case_scalar_mul,
    "op:matmul": _case_matmul,
    "op:relu": _case_relu,
    "op:gelu": _case_unary("gelu"),
    "op:sum": _case_reduce("sum"),
    "op:mean_over_axis": _case_reduce("mean_over_axis"),
    "op:dot": _case_dot,
    "op:l2_norm": _case_unary("l2_norm", make=lambda r: _away_from_zero(r, (3, 4))),
    "op:normalize": _case_unary("normalize", make=lambda r: _away_from_zero(r, (3, 4))),
    "op:softmax_lastdim": _case_unary("softmax_lastdim"),
    "op:layer_norm": _case_unary("layer_norm", make=lambda r: r.standard_normal((3, 5))),
    "op:concat_along_axis": _case_concat,
    "op:reshape": _case_reshape,
    "op:transpose": _case_transpose,
    "op:index": _case_index,
}


# ---------------------------------------------------------------------------
# loss cases


def _near_hinge(S: np.ndarray, margin: float) -> bool:
    n = S.shape[0]
    off = S.copy()
    np.fill_diagonal(off, -np.inf)
    top2_rows = np.sort(off, axis=1)[:, -2:]
    top2_cols = np.sort(off, axis=0)[-2:, :]
    if n > 2 and (np.min(top2_rows[:, 1] - top2_rows[:, 0]) < HINGE_DELTA
                  or np.min(top2_cols[1] - top2_cols[0]) < HINGE_DELTA):
        return True
    d = np.diag(S)
    args = np.concatenate([margin - d + off.max(axis=1), margin - d + off.max(axis=0)])
    return bool(np.min(np.abs(args)) < HINGE_DELTA)


def _case_triplet(rng):
    n, d = int(rng.integers(2, 7)), int(rng.integers(2, 6))
    img, txt = rng.standard_normal((n, d)), rng.standard_normal((n, d))
    S = losses.similarity_matrix(img, txt).data
    if _near_hinge(S, losses.DEFAULT_MARGIN):
        return None
    fn = lambda a, b: losses.triplet_hardest_loss(losses.similarity_matrix(a, b))
    return _check_each_input(fn, [img, txt], rng, "loss:triplet")


def _case_distill(kind):
    def case(rng):
        n, d = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        teacher, student = rng.standard_normal((n, d)), rng.standard_normal((n, d))
        if kind == "l1" and np.min(np.abs(student - teacher)) < HINGE_DELTA:
            return None
        return _check_each_input(lambda t: losses.distill_loss(Tensor(teacher), t, kind), [student], rng,
                                 f"loss:distill-{kind}")
    return case


def _case_finetune_objective(rng):
    # alignment between images and reconstructed sparse embeddings plus negcosine distillation
    n, d = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    img, t_hat, teacher = (rng.standard_normal((n, d)) for _ in range(3))
    if _near_hinge(losses.similarity_matrix(img, t_hat).data, losses.DEFAULT_MARGIN):
        return None

    def fn(a, b):
        l_align = losses.triplet_hardest_loss(losses.similarity_matrix(a, b))
        return losses.total_loss(l_align, losses.distill_loss(Tensor(teacher), b))
    return _check_each_input(fn, [img, t_hat], rng, "loss:total")


def _case_warmup(rng):
    n, d = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    img, txt = rng.standard_normal((n, d)), rng.standard_normal((n, d))
    S = losses.similarity_matrix(img, txt).data
    args = S - np.diag(S)[:, None] + losses.DEFAULT_MARGIN
    if np.min(np.abs(np.concatenate([args.ravel(), (S - np.diag(S)[None, :] + losses.DEFAULT_MARGIN).ravel()]))) \
            < HINGE_DELTA:
        return None
    fn = lambda a, b: losses.triplet_sum_loss(losses.similarity_matrix(a, b))
    return _check_each_input(fn, [img, txt], rng, "loss:triplet-sum")


LOSS_CASES: dict[str, Callable] = {
    "loss:triplet": _case_triplet,
    "loss:triplet-sum": _case_warmup,
    "loss:distill-negcosine": _case_distill("negcosine"),
    "loss:distill-l1": _case_distill("l1"),
    "loss:distill-l2": _case_distill("l2"),
    "loss:total": _case_finetune_objective,
}


# ---------------------------------------------------------------------------
# encoder / decoder forward passes (tiny configurations, random directions)


def _tiny_model_config():
    from .model import ModelConfig
    return ModelConfig(model_dim=8, embed_dim=8, n_layers=1, n_heads=2, ff_mult=2, vocab_size=12,
                       dense_max_len=8, sparse_max_len=6, n_patches=4, patch_dim=5, n_mask_tokens=3,
                       decoder_layers=1, decoder_heads=2)


def _perturb(params: dict[str, Tensor], rng) -> None:
    # move zero-initialized tensors (biases, pooling logits, decoder projection) off zero
    for p in params.values():
        p.data = p.data + 0.3 * rng.standard_normal(p.shape)


def _token_batch(rng, B, max_len, vocab):
    return [list(rng.integers(1, vocab, size=int(rng.integers(1, max_len + 1)))) for _ in range(B)]


def _case_text_encoder(rng):
    from .encoders import encode_text_batch, init_encoder
    enc = init_encoder(_tiny_model_config().text_config(), rng)
    _perturb(enc.tensors, rng)
    toks = _token_batch(rng, 3, 6, 12)
    w = rng.standard_normal((3, 8))
    return ad.directional_check(lambda: _w_sum(encode_text_batch(toks, enc)[1], w), enc.tensors, rng,
                                label="forward:text-encoder")


def _case_image_encoder(rng):
    from .encoders import encode_image_batch, init_encoder
    enc = init_encoder(_tiny_model_config().image_config(), rng)
    _perturb(enc.tensors, rng)
    patches = Tensor(rng.standard_normal((3, 4, 5)), requires_grad=True)
    w = rng.standard_normal((3, 8))
    params = {**enc.tensors, "input.patches": patches}
    return ad.directional_check(lambda: _w_sum(encode_image_batch(patches, enc), w), params, rng,
                                label="forward:image-encoder")


def _case_decoder(rng):
    from .decoder import Placement, init_decoder, reconstruct_batch
    from .encoders import pad_tokens
    mc = _tiny_model_config()
    placement = list(Placement)[int(rng.integers(0, 3))].value
    from dataclasses import replace
    dec = init_decoder(replace(mc.decoder_config(), placement=placement), rng)
    _perturb(dec.tensors, rng)
    _, valid = pad_tokens(_token_batch(rng, 3, 6, 12))
    words = Tensor(rng.standard_normal(valid.shape + (8,)), requires_grad=True)
    t_s = Tensor(rng.standard_normal((3, 8)), requires_grad=True)
    w = rng.standard_normal((3, 8))
    params = {**dec.tensors, "input.words": words, "input.t_s": t_s}
    return ad.directional_check(lambda: _w_sum(reconstruct_batch(words, t_s, valid, dec), w), params, rng,
                                label=f"forward:decoder-{placement}")


def _case_finetune_model(rng):
    """The whole stage-2 objective through the encoders and decoder."""
    from .model import VSEModel, sparse_embeddings, image_embeddings
    mc = _tiny_model_config()
    model = VSEModel.initialize(mc, rng)
    model.add_sparse_branch(rng)
    _perturb(model.named_parameters(("image", "sparse", "decoder")), rng)
    B = 3
    toks = _token_batch(rng, B, 6, 12)
    patches = rng.standard_normal((B, 4, 5))
    teacher = rng.standard_normal((B, 8))

    def objective(check_hinge=False):
        _, t_hat = sparse_embeddings(model, toks)
        S = losses.similarity_matrix(image_embeddings(model, patches), t_hat)
        if check_hinge:
            return _near_hinge(S.data, losses.DEFAULT_MARGIN)
        return losses.total_loss(losses.triplet_hardest_loss(S), losses.distill_loss(Tensor(teacher), t_hat))

    with ad.no_grad():
        if objective(True):
            return None
    return ad.directional_check(objective, model.named_parameters(("image", "sparse", "decoder")), rng,
                                label="forward:finetune-objective")


FORWARD_CASES: dict[str, Callable] = {
    "forward:text-encoder": _case_text_encoder,
    "forward:image-encoder": _case_image_encoder,
    "forward:decoder": _case_decoder,
    "forward:finetune-objective": _case_finetune_model,
}

GRADIENT_CASES: dict[str, Callable] = {**PRIMITIVE_CASES, **LOSS_CASES, **FORWARD_CASES}


@dataclass
class CaseResult:
    name: str
    passed: bool
    detail: str
    n_points: int = 0
    n_excluded: int = 0
    max_rel_err: float = 0.0
    failures: list = field(default_factory=list)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def run_gradient_case(name: str, n_points: int, rng: np.random.Generator) -> CaseResult:
    """Evaluate a gradient case at ``n_points`` accepted random points."""
    case = GRADIENT_CASES[name]
    accepted = excluded = 0
    worst, fails = 0.0, []
    while accepted < n_points:
        if excluded > 20 * n_points + 100:
            return CaseResult(name, False, f"could not sample {n_points} points outside hinge neighborhoods",
                              accepted, excluded, worst, fails)
        rep = case(rng)
        if rep is None:
            excluded += 1
            continue
        accepted += 1
        worst = max(worst, rep.max_rel_err)
        fails.extend(rep.failures[:3])
    detail = f"{accepted} points, {excluded} excluded, max rel err {worst:.2e}"
    if fails:
        detail += f", {len(fails)} failing coords; first {fails[0]}"
    return CaseResult(name, not fails, detail, accepted, excluded, worst, fails)


# ---------------------------------------------------------------------------
# oracle and round-trip checks


def hardest_negative_oracle(S: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Brute-force scan, first maximum wins."""
    n = len(S)
    rows, cols = [], []
    for i in range(n):
        best, arg = -np.inf, -1
        for j in range(n):
            if j != i and S[i][j] > best:
                best, arg = S[i][j], j
        rows.append(arg)
    for j in range(n):
        best, arg = -np.inf, -1
        for i in range(n):
            if i != j and S[i][j] > best:
                best, arg = S[i][j], i
        cols.append(arg)
    return np.array(rows), np.array(cols)


def random_similarity(rng: np.random.Generator, n_rows: int, n_cols: int) -> np.ndarray:
    """Random scores, often quantized so that ties are common."""
    S = rng.uniform(-1.0, 1.0, size=(n_rows, n_cols))
    mode = int(rng.integers(0, 3))
    if mode == 1:
        S = np.round(S * 4) / 4
    elif mode == 2:
        S = np.round(S)
    return S


def check_mining_oracle(n_instances: int, rng) -> CaseResult:
    bad = 0
    for _ in range(n_instances):
        n = int(rng.integers(2, 65))
        S = random_similarity(rng, n, n)
        got = losses.hardest_negatives(S)
        ref = hardest_negative_oracle(S)
        if not (np.array_equal(got[0], ref[0]) and np.array_equal(got[1], ref[1])):
            bad += 1
    return CaseResult("oracle:hardest-negative", bad == 0, f"{n_instances} instances, {bad} mismatches")


def check_ranking_oracle(n_instances: int, rng) -> CaseResult:
    from .retrieval import multi_view_ground_truth, ranking_oracle, recall_at_k
    bad = 0
    for _ in range(n_instances):
        views = int(rng.integers(1, 6))
        n_img = int(rng.integers(1, max(2, 64 // views) + 1))
        S = random_similarity(rng, n_img, n_img * views)
        i2t, t2i = multi_view_ground_truth(n_img, views)
        for direction, gt, n_items in (("i2t", i2t, n_img * views), ("t2i", t2i, n_img)):
            k = int(rng.integers(1, n_items + 1))
            if recall_at_k(S, gt, k, direction) != ranking_oracle(S, gt, k, direction):
                bad += 1
    return CaseResult("oracle:recall-at-k", bad == 0, f"{n_instances} instances, {bad} mismatches")


def check_identity(n_instances: int, rng) -> CaseResult:
    from .decoder import init_decoder, reconstruct_batch
    from .encoders import pad_tokens
    dec = init_decoder(_tiny_model_config().decoder_config(), rng)
    bad = 0
    for _ in range(n_instances):
        _, valid = pad_tokens(_token_batch(rng, 3, 6, 12))
        words = Tensor(rng.standard_normal(valid.shape + (8,)))
        t_s = Tensor(rng.standard_normal((3, 8)))
        if not np.array_equal(reconstruct_batch(words, t_s, valid, dec).data, t_s.data):
            bad += 1
    return CaseResult("identity:zero-init-decoder", bad == 0, f"{n_instances} inputs, {bad} not bit-exact")


def check_corpus_roundtrip(n_instances: int, rng) -> CaseResult:
    from .corpus import CorpusConfig, dumps_corpus, generate_corpus, loads_corpus
    bad = 0
    for _ in range(n_instances):
        c = generate_corpus(CorpusConfig(n_train=6, n_val=2, n_test=2, seed=int(rng.integers(0, 2**31))))
        text = dumps_corpus(c)
        back = loads_corpus(text)
        if back != c or dumps_corpus(back) != text:
            bad += 1
    return CaseResult("roundtrip:corpus", bad == 0, f"{n_instances} corpora, {bad} mismatches")


def check_checkpoint_roundtrip(n_instances: int, rng) -> CaseResult:
    from .checkpoint import dumps_checkpoint, loads_checkpoint
    from .model import VSEModel
    from .trainer import AdamWState, Checkpoint, TrainConfig
    bad = 0
    for _ in range(n_instances):
        model = VSEModel.initialize(_tiny_model_config(), rng)
        model.add_sparse_branch(rng)
        opt = AdamWState(3, {"image.proj.b": rng.standard_normal(8)}, {"image.proj.b": rng.random(8)})
        ck = Checkpoint("stage2", model, TrainConfig(), opt, {"note": "selfcheck"})
        blob = dumps_checkpoint(ck)
        back = loads_checkpoint(blob)
        if back.model.checksum() != model.checksum() or dumps_checkpoint(back) != blob:
            bad += 1
    return CaseResult("roundtrip:checkpoint", bad == 0, f"{n_instances} checkpoints, {bad} mismatches")


ORACLE_CHECKS: dict[str, Callable[[int, np.random.Generator], CaseResult]] = {
    "oracle:hardest-negative": check_mining_oracle,
    "oracle:recall-at-k": check_ranking_oracle,
    "identity:zero-init-decoder": check_identity,
    "roundtrip:corpus": check_corpus_roundtrip,
    "roundtrip:checkpoint": check_checkpoint_roundtrip,
}


def run_selfcheck(fast: bool = False, seed: int = 0, emit: Callable[[str], None] | None = None,
                  only: list[str] | None = None) -> list[CaseResult]:
    """Run every registered check; ``fast`` shrinks point and instance counts."""
    rng = np.random.default_rng(seed)
    n_grad = {"op": 3 if fast else 20, "loss": 5 if fast else 50, "forward": 2 if fast else 10}
    n_oracle = {"oracle": 100 if fast else 1000, "identity": 20 if fast else 100, "roundtrip": 2 if fast else 10}
    results = []
    for name in GRADIENT_CASES:
        if only and name not in only:
            continue
        t0 = time.perf_counter()
        try:
            res = run_gradient_case(name, n_grad[name.split(":")[0]], rng)
        except Exception as e:  # a broken op must be reported, not crash the harness
            res = CaseResult(name, False, f"raised {type(e).__name__}: {e}")
        res.detail += f" ({time.perf_counter() - t0:.1f}s)"
        results.append(res)
        if emit:
            emit(res.line())
    for name, fn in ORACLE_CHECKS.items():
        if only and name not in only:
            continue
        try:
            res = fn(n_oracle[name.split(":")[0]], rng)
        except Exception as e:
            res = CaseResult(name, False, f"raised {type(e).__name__}: {e}")
        results.append(res)
        if emit:
            emit(res.line())
    return results
