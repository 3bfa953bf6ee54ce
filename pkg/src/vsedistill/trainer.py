"""Two-stage training: image/dense pretraining, then sparse fine-tuning with distillation."""

from __future__ import annotations

import json
import logging
import math
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Corpus, Scene
from .losses import distill_loss, similarity_matrix, total_loss, triplet_hardest_loss, triplet_sum_loss
from .model import ModelConfig, VSEModel, dense_embeddings, image_embeddings, sparse_embeddings
from .retrieval import evaluate

log = logging.getLogger(__name__)

STAGE1, STAGE2 = "stage1", "stage2"


class TrainingError(ValueError):
    pass


class StageError(TrainingError):
    """A checkpoint was handed to the wrong stage."""


class NumericalAbort(RuntimeError):
    def __init__(self, message: str, dump_path: Path):
        super().__init__(f"{message} (batch dumped to {dump_path})")
        self.dump_path = dump_path


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 10
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    milestones: tuple[float, ...] = (0.6, 0.85)
    lr_decay: float = 0.1
    seed: int = 0
    margin: float = 0.2
    warmup_epochs: int = 1
    pretrain: bool = True
    align: bool = True
    distill: bool = True
    distill_kind: str = "negcosine"
    align_weight: float = 1.0
    distill_weight: float = 1.0
    sparse_init: str = "dense"
    resume: bool = False

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(float(m) for m in self.milestones))
        if self.batch_size < 2:
            raise TrainingError(f"batch_size must be >= 2 for hardest-negative mining, got {self.batch_size}")
        if self.epochs < 0:
            raise TrainingError(f"epochs must be nonnegative, got {self.epochs}")
        if not (math.isfinite(self.lr) and self.lr > 0):
            raise TrainingError(f"lr must be a positive finite number, got {self.lr}")
        if self.sparse_init not in ("dense", "scratch"):
            raise TrainingError(f"sparse_init must be 'dense' or 'scratch', got {self.sparse_init!r}")

    @property
    def flags(self) -> tuple[str, ...]:
        return tuple(n for n in ("pretrain", "align", "distill") if getattr(self, n))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: (tuple(v) if k == "milestones" else v) for k, v in d.items() if k in names})


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: dict[str, Tensor], state: AdamWState, config: TrainConfig, lr: float) -> None:
    """Decoupled-weight-decay Adam update, in place."""
    missing = [k for k, p in params.items() if p.grad is None]
    if missing:
        raise TrainingError(f"parameters without gradients: {', '.join(missing)}")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = p.grad
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * (g * g) if v is None else b2 * v + (1.0 - b2) * (g * g)
        state.m[k], state.v[k] = m, v
        data = p.data
        if config.weight_decay:
            data = data * (1.0 - lr * config.weight_decay)
        p.data = data - lr * (m / c1) / (np.sqrt(v / c2) + config.eps)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Step schedule: multiply by ``lr_decay`` at each milestone fraction of the run."""
    marks = [max(1, math.floor(f * config.epochs)) for f in config.milestones]
    return config.lr * config.lr_decay ** sum(1 for m in marks if epoch >= m)


# ---------------------------------------------------------------------------
# batching


def _stage_rng(config: TrainConfig, stage: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(stage,)))


def scene_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in out if len(b) >= 2]


def view_batches(n: int, n_views: int, batch_size: int, rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """Every (scene, view) pair once per epoch; scenes within a batch are distinct."""
    view_order = np.stack([rng.permutation(n_views) for _ in range(n)])
    out = []
    for r in range(n_views):
        for b in scene_batches(n, batch_size, rng):
            out.append((b, view_order[b, r]))
    return out


# ---------------------------------------------------------------------------
# losses per batch


def contrastive_loss(S: Tensor, config: TrainConfig, epoch: int) -> Tensor:
    """Hardest-negative triplet loss, or the all-negatives sum during warm-up epochs."""
    if epoch < config.warmup_epochs:
        return triplet_sum_loss(S, config.margin)
    return triplet_hardest_loss(S, config.margin)


def pretrain_loss(model: VSEModel, scenes: list[Scene], config: TrainConfig, epoch: int | None = None) -> Tensor:
    img = image_embeddings(model, np.stack([s.patches for s in scenes]))
    txt = dense_embeddings(model, [s.dense_tokens for s in scenes])
    S = similarity_matrix(img, txt)
    return triplet_hardest_loss(S, config.margin) if epoch is None else contrastive_loss(S, config, epoch)


def finetune_loss(model: VSEModel, scenes: list[Scene], views: np.ndarray, teacher: np.ndarray | None,
                  config: TrainConfig, epoch: int | None = None) -> tuple[Tensor, dict]:
    tokens = [s.sparse_views[int(v)] for s, v in zip(scenes, views)]
    t_s, t_hat = sparse_embeddings(model, tokens, use_decoder=config.distill)
    l_align = l_distill = None
    if config.align:
        img = image_embeddings(model, np.stack([s.patches for s in scenes]))
        S = similarity_matrix(img, t_hat)
        l_align = triplet_hardest_loss(S, config.margin) if epoch is None else contrastive_loss(S, config, epoch)
    if config.distill:
        l_distill = distill_loss(Tensor(teacher), t_hat, config.distill_kind)
    loss = total_loss(l_align, l_distill, config.align_weight, config.distill_weight)
    parts = {"align": None if l_align is None else l_align.item(),
             "distill": None if l_distill is None else l_distill.item()}
    return loss, parts


# ---------------------------------------------------------------------------
# checkpoint object (serialization lives in checkpoint.py)


@dataclass
class Checkpoint:
    stage: str
    model: VSEModel
    train_config: TrainConfig
    optimizer: AdamWState = field(default_factory=AdamWState)
    meta: dict = field(default_factory=dict)

    @property
    def model_config(self) -> ModelConfig:
        return self.model.config


EpochLog = Callable[[dict], None]


def _dump_batch(dump_dir: Path | None, payload: dict) -> Path:
    d = Path(dump_dir) if dump_dir is not None else Path(tempfile.mkdtemp(prefix="vsedistill-nan-"))
    d.mkdir(parents=True, exist_ok=True)
    path = d / "nan_dump.json"
    path.write_text(json.dumps(payload, indent=2, default=str) + "\n")
    return path


def _check_finite(loss: Tensor, stage: str, epoch: int, step: int, scene_ids, dump_dir, extra=None) -> None:
    if np.isfinite(loss.data).all():
        return
    payload = {"stage": stage, "epoch": epoch, "step": step, "loss": repr(loss.item()),
               "scene_ids": [int(i) for i in scene_ids], **(extra or {})}
    path = _dump_batch(dump_dir, payload)
    raise NumericalAbort(f"non-finite loss in {stage} epoch {epoch} step {step}", path)


def _check_params(params: dict[str, Tensor], stage: str, epoch: int, step: int, scene_ids, dump_dir) -> None:
    bad = [k for k, p in params.items() if not np.isfinite(p.data).all()]
    if bad:
        path = _dump_batch(dump_dir, {"stage": stage, "epoch": epoch, "step": step, "non_finite_params": bad,
                                      "scene_ids": [int(i) for i in scene_ids]})
        raise NumericalAbort(f"non-finite parameters after {stage} epoch {epoch} step {step}: {bad[0]}", path)


def _validate_lengths(corpus: Corpus, mc: ModelConfig) -> None:
    for s in corpus.scenes:
        if len(s.dense_tokens) > mc.dense_max_len:
            raise TrainingError(f"scene {s.scene_id}: dense length {len(s.dense_tokens)} > {mc.dense_max_len}")
        for v in s.sparse_views:
            if len(v) > mc.sparse_max_len:
                raise TrainingError(f"scene {s.scene_id}: sparse length {len(v)} > {mc.sparse_max_len}")
    if corpus.config.vocab_needed > mc.vocab_size:
        raise TrainingError(f"corpus needs {corpus.config.vocab_needed} token ids, vocab_size is {mc.vocab_size}")
    if corpus.config.patch_dim != mc.patch_dim or corpus.config.n_patches > mc.n_patches:
        raise TrainingError("corpus patch grid does not match the image encoder configuration")


DECODER_FIELDS = ("n_mask_tokens", "placement", "decoder_layers", "decoder_heads", "sparse_max_len")


def _merge_decoder_config(base: ModelConfig, new: ModelConfig) -> ModelConfig:
    """Take decoder hyperparameters from ``new``; encoder fields must agree with the pretrained model."""
    b, n = base.to_dict(), new.to_dict()
    clash = [k for k in b if k not in DECODER_FIELDS and b[k] != n[k]]
    if clash:
        raise TrainingError(f"model config differs from the stage-1 encoders in: {', '.join(clash)}")
    return ModelConfig.from_dict({**b, **{k: n[k] for k in DECODER_FIELDS}})


def _snapshot(model: VSEModel, opt: AdamWState) -> tuple[VSEModel, AdamWState]:
    return model.clone(), AdamWState(opt.step, {k: v.copy() for k, v in opt.m.items()},
                                     {k: v.copy() for k, v in opt.v.items()})


def pretrain_stage(corpus: Corpus, config: TrainConfig, model_config: ModelConfig | None = None,
                   on_epoch: EpochLog | None = None, dump_dir=None, resume: Checkpoint | None = None) -> Checkpoint:
    """Align images with dense descriptions; keeps the epoch with the best validation rSum."""
    mc = model_config or ModelConfig(n_patches=corpus.config.n_patches, patch_dim=corpus.config.patch_dim)
    _validate_lengths(corpus, mc)
    rng = _stage_rng(config, 1)
    if resume is not None:
        if resume.stage != STAGE1:
            raise StageError(f"pretraining can only resume a {STAGE1} checkpoint, got {resume.stage}")
        model, opt = _snapshot(resume.model, resume.optimizer)
    else:
        model = VSEModel.initialize(mc, np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0,))))
        opt = AdamWState()
    train, val = corpus.split("train"), corpus.split("val")
    trainable = model.named_parameters(("image", "dense"))
    history = []
    best = (-math.inf, 0, *_snapshot(model, opt))
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, config)
        losses = []
        for step, idx in enumerate(scene_batches(len(train), config.batch_size, rng)):
            batch = [train[i] for i in idx]
            for p in trainable.values():
                p.grad = None
            loss = pretrain_loss(model, batch, config, epoch)
            _check_finite(loss, STAGE1, epoch, step, [s.scene_id for s in batch], dump_dir)
            ad.backward(loss)
            optimizer_step(trainable, opt, config, lr)
            _check_params(trainable, STAGE1, epoch, step, [s.scene_id for s in batch], dump_dir)
            losses.append(loss.item())
        val_rsum = evaluate(model, val, text="dense").rsum if val else float("nan")
        rec = {"stage": STAGE1, "epoch": epoch + 1, "mean_loss": float(np.mean(losses)) if losses else float("nan"),
               "val_rsum": val_rsum, "lr": lr, "wall_time": time.perf_counter() - t0}
        history.append(rec)
        log.info("stage1 epoch %d loss %.4f val rSum %.2f", epoch + 1, rec["mean_loss"], val_rsum)
        if on_epoch:
            on_epoch(rec)
        if val_rsum > best[0]:
            best = (val_rsum, epoch + 1, *_snapshot(model, opt))
    best_rsum, best_epoch, best_model, best_opt = best
    if config.epochs == 0:
        best_model, best_opt = model, opt
    ckpt = Checkpoint(STAGE1, best_model, config, best_opt, {
        "best_epoch": best_epoch,
        "best_val_rsum": None if math.isinf(best_rsum) else best_rsum,
        "history": [{k: v for k, v in h.items() if k != "wall_time"} for h in history],
        "dense_checksum": best_model.checksum(("dense",)),
    })
    ckpt.meta["stage1_dense_checksum"] = ckpt.meta["dense_checksum"]
    return ckpt


def finetune_stage(stage1: Checkpoint | None, corpus: Corpus, config: TrainConfig,
                   model_config: ModelConfig | None = None, on_epoch: EpochLog | None = None,
                   dump_dir=None) -> Checkpoint:
    """Fine-tune on image/sparse pairs with the dense encoder frozen as the distillation teacher.

    ``stage1`` may be None only when ``config.pretrain`` is False (fresh
    encoders). A stage-2 checkpoint is accepted only with ``config.resume``.
    """
    if not (config.align or config.distill):
        raise TrainingError("fine-tuning needs at least one of align / distill")
    if stage1 is None:
        if config.pretrain:
            raise StageError("fine-tuning with pretrain enabled needs a stage-1 checkpoint")
        mc = model_config or ModelConfig(n_patches=corpus.config.n_patches, patch_dim=corpus.config.patch_dim)
        model = VSEModel.initialize(mc, np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0,))))
        base_meta = {"stage1_dense_checksum": model.checksum(("dense",))}
        resumed = False
    elif stage1.stage == STAGE1:
        model = stage1.model.clone()
        if model_config is not None:
            model.config = _merge_decoder_config(model.config, model_config)
        base_meta = {"stage1_dense_checksum": stage1.meta.get("dense_checksum", model.checksum(("dense",)))}
        resumed = False
    elif stage1.stage == STAGE2:
        if not config.resume:
            raise StageError("got a stage-2 checkpoint; set resume to continue fine-tuning it")
        model = stage1.model.clone()
        base_meta = {"stage1_dense_checksum": stage1.meta["stage1_dense_checksum"],
                     "resumed_from_epochs": len(stage1.meta.get("history", []))}
        resumed = True
    else:
        raise StageError(f"unknown checkpoint stage {stage1.stage!r}")

    mc = model.config
    _validate_lengths(corpus, mc)
    rng = _stage_rng(config, 2)
    if not resumed:
        branch_rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(3,)))
        model.add_sparse_branch(branch_rng, from_dense=config.sparse_init == "dense")
        opt = AdamWState()
    else:
        _, opt = _snapshot(model, stage1.optimizer)

    train, val = corpus.split("train"), corpus.split("val")
    components = (["image"] if config.align else []) + ["sparse"] + (["decoder"] if config.distill else [])
    trainable = model.named_parameters(components)
    teacher = None
    if config.distill:
        with ad.no_grad():
            teacher = np.concatenate([dense_embeddings(model, [s.dense_tokens for s in train[i:i + 64]]).data
                                      for i in range(0, len(train), 64)])
    dense_before = model.checksum(("dense",))
    n_views = len(train[0].sparse_views)
    history = []
    best = (-math.inf, 0, *_snapshot(model, opt))
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, config)
        losses = []
        for step, (idx, views) in enumerate(view_batches(len(train), n_views, config.batch_size, rng)):
            batch = [train[i] for i in idx]
            for p in trainable.values():
                p.grad = None
            loss, _ = finetune_loss(model, batch, views, None if teacher is None else teacher[idx], config, epoch)
            _check_finite(loss, STAGE2, epoch, step, [s.scene_id for s in batch], dump_dir,
                          {"views": [int(v) for v in views]})
            ad.backward(loss)
            optimizer_step(trainable, opt, config, lr)
            _check_params(trainable, STAGE2, epoch, step, [s.scene_id for s in batch], dump_dir)
            losses.append(loss.item())
        val_rsum = evaluate(model, val).rsum if val else float("nan")
        rec = {"stage": STAGE2, "epoch": epoch + 1, "mean_loss": float(np.mean(losses)) if losses else float("nan"),
               "val_rsum": val_rsum, "lr": lr, "wall_time": time.perf_counter() - t0,
               "dense_checksum": model.checksum(("dense",))}
        if rec["dense_checksum"] != dense_before:
            raise TrainingError("dense encoder changed during fine-tuning")
        history.append(rec)
        log.info("stage2 epoch %d loss %.4f val rSum %.2f", epoch + 1, rec["mean_loss"], val_rsum)
        if on_epoch:
            on_epoch(rec)
        if val_rsum > best[0]:
            best = (val_rsum, epoch + 1, *_snapshot(model, opt))
    best_rsum, best_epoch, best_model, best_opt = best
    if config.epochs == 0:
        best_model, best_opt = model, opt
    meta = dict(base_meta)
    meta.update({
        "best_epoch": best_epoch,
        "best_val_rsum": None if math.isinf(best_rsum) else best_rsum,
        "history": [{k: v for k, v in h.items() if k != "wall_time"} for h in history],
        "dense_checksum": best_model.checksum(("dense",)),
        "flags": list(config.flags),
    })
    return Checkpoint(STAGE2, best_model, config, best_opt, meta)
