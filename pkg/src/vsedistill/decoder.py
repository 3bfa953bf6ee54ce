"""Mask-token decoder for the sparse-text branch.

K learnable mask tokens are placed around the sparse word embeddings, the
joint sequence runs through a bidirectional Transformer, and the decoded mask
positions are averaged and projected back to the embedding space. The result
is added to the pooled sparse embedding.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .encoders import affine_norm, attention_mask, init_block, transformer_block


class Placement(str, enum.Enum):
    PREFIX = "prefix"
    SURROUND = "surround"
    POSTFIX = "postfix"

    @classmethod
    def parse(cls, value) -> "Placement":
        if isinstance(value, Placement):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown placement {value!r}; expected prefix, surround or postfix") from None


@dataclass(frozen=True)
class DecoderConfig:
    n_mask_tokens: int = 8
    placement: str = "surround"
    n_layers: int = 4
    n_heads: int = 4
    model_dim: int = 32
    embed_dim: int = 32
    ff_mult: int = 4
    max_seq_len: int = 12

    def __post_init__(self):
        object.__setattr__(self, "placement", Placement.parse(self.placement).value)
        for name in ("n_mask_tokens", "n_layers", "n_heads", "model_dim", "embed_dim", "ff_mult", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DecoderParams:
    config: DecoderConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def mask_tokens(self) -> Tensor:
        return self.tensors["mask_tokens"]


def place_tokens(placement, seq_len: int, n_mask: int) -> np.ndarray:
    """Order of the joint decoder sequence.

    Entry ``p`` is the source slot shown at position ``p``: values below
    ``n_mask`` are mask tokens, ``n_mask + j`` is word ``j``. Surround puts
    ceil(K/2) masks before the words and floor(K/2) after.
    """
    placement = Placement.parse(placement)
    if seq_len < 1 or n_mask < 1:
        raise ValueError(f"place_tokens needs seq_len >= 1 and K >= 1, got {seq_len}, {n_mask}")
    masks = list(range(n_mask))
    words = [n_mask + j for j in range(seq_len)]
    if placement is Placement.PREFIX:
        order = masks + words
    elif placement is Placement.POSTFIX:
        order = words + masks
    else:
        before = math.ceil(n_mask / 2)
        order = masks[:before] + words + masks[before:]
    return np.asarray(order, dtype=np.int64)


def init_decoder(config: DecoderConfig, rng: np.random.Generator) -> DecoderParams:
    D, K = config.model_dim, config.n_mask_tokens
    t = {
        "mask_tokens": Tensor(rng.standard_normal((K, D)) * 0.5, requires_grad=True),
        "pos_emb": Tensor(rng.standard_normal((config.max_seq_len + K, D)) * 0.5, requires_grad=True),
    }
    for i in range(config.n_layers):
        t.update(init_block(rng, f"layers.{i}.", D, config.ff_mult))
    t["ln_f.g"] = Tensor(np.ones(D), requires_grad=True)
    t["ln_f.b"] = Tensor(np.zeros(D), requires_grad=True)
    # zero projection: training starts from t_hat == t_s
    t["proj.w"] = Tensor(np.zeros((D, config.embed_dim)), requires_grad=True)
    t["proj.b"] = Tensor(np.zeros(config.embed_dim), requires_grad=True)
    return DecoderParams(config, t)


def _layouts(lengths: np.ndarray, config: DecoderConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gather indices into [masks, words(padded)] for each row, plus validity and mask positions."""
    K = config.n_mask_tokens
    B = len(lengths)
    L = int(lengths.max())
    total = L + K
    gather = np.full((B, total), K, dtype=np.int64)  # padding reads word 0, masked out below
    valid = np.zeros((B, total), dtype=bool)
    mask_pos = np.zeros((B, K), dtype=np.int64)
    for b, n in enumerate(lengths):
        order = place_tokens(config.placement, int(n), K)
        gather[b, :len(order)] = order
        valid[b, :len(order)] = True
        mask_pos[b] = np.flatnonzero(order < K)
    return gather, valid, mask_pos


def decode_tokens(words: Tensor, valid_words: np.ndarray, params: DecoderParams) -> Tensor:
    """Average decoded mask-token state projected to d, shape (B, d). Zero at init."""
    cfg, p = params.config, params.tensors
    B, L, width = words.shape
    if width != cfg.model_dim:
        raise ShapeError(f"decoder: word embedding width {width} != decoder model_dim {cfg.model_dim}")
    lengths = np.asarray(valid_words, dtype=bool).sum(axis=1)
    if (lengths == 0).any():
        raise ShapeError("decoder: empty word-embedding sequence")
    if lengths.max() > cfg.max_seq_len:
        raise ShapeError(f"decoder: sequence length {lengths.max()} > decoder max_seq_len {cfg.max_seq_len}")
    gather, valid, mask_pos = _layouts(lengths, cfg)
    masks = p["mask_tokens"] + np.zeros((B, 1, 1))
    joint = ad.concat_along_axis([masks, words], axis=1)
    rows = np.arange(B)[:, None]
    x = joint[rows, gather] + p["pos_emb"][: gather.shape[1]]
    attn_mask = None if valid.all() else attention_mask(valid)
    for i in range(cfg.n_layers):
        x = transformer_block(x, p, f"layers.{i}.", cfg.n_heads, attn_mask)
    x = affine_norm(x, p["ln_f.g"], p["ln_f.b"])
    decoded = x[rows, mask_pos]
    mean = ad.mean_over_axis(decoded, axis=1)
    return mean @ p["proj.w"] + p["proj.b"]


def reconstruct_batch(words: Tensor, t_s: Tensor, valid_words: np.ndarray, params: DecoderParams) -> Tensor:
    """t_hat = projected mean of decoded mask tokens + t_s, batched (B, d)."""
    if t_s.shape[-1] != params.config.embed_dim:
        raise ShapeError(f"decoder: sparse embedding width {t_s.shape[-1]} != embed_dim {params.config.embed_dim}")
    return decode_tokens(words, valid_words, params) + t_s


def reconstruct(word_embeddings: Tensor, t_s: Tensor, params: DecoderParams) -> Tensor:
    """Single-sequence form: (L, d) word embeddings and (d,) pooled embedding -> (d,)."""
    if word_embeddings.ndim != 2 or word_embeddings.shape[0] == 0:
        raise ShapeError(f"decoder: expected non-empty (L, d) word embeddings, got {word_embeddings.shape}")
    L, w = word_embeddings.shape
    words = ad.reshape(word_embeddings, (1, L, w))
    ts = ad.reshape(t_s, (1, t_s.shape[-1]))
    out = reconstruct_batch(words, ts, np.ones((1, L), dtype=bool), params)
    return ad.reshape(out, (out.shape[1],))
