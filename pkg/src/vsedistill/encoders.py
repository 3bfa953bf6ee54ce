"""Tiny pre-LN Transformer encoders for patches and token sequences.

Both encoders finish with a learned softmax-weighted pooling over positions,
a simplified stand-in for generalized pooling: one logit per absolute
position, padded positions masked to ``-inf``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

PAD_ID = 0


class EncoderInputError(ValueError):
    """Token ids or patch grids violate the encoder's input contract."""


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "text"  # "text" or "image"
    model_dim: int = 32
    embed_dim: int = 32
    n_layers: int = 2
    n_heads: int = 2
    ff_mult: int = 4
    vocab_size: int = 64
    max_seq_len: int = 64
    n_patches: int = 16
    patch_dim: int = 16

    def __post_init__(self):
        if self.kind not in ("text", "image"):
            raise ValueError(f"encoder kind must be 'text' or 'image', got {self.kind!r}")
        for name in ("model_dim", "embed_dim", "n_layers", "n_heads", "ff_mult", "vocab_size",
                     "max_seq_len", "n_patches", "patch_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")

    @property
    def max_positions(self) -> int:
        return self.max_seq_len if self.kind == "text" else self.n_patches

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderParams:
    config: EncoderConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: Tensor(v.data.copy(), requires_grad=True)
                                           for k, v in self.tensors.items()})


# ---------------------------------------------------------------------------
# shared Transformer pieces


def _dense_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)


def init_block(rng: np.random.Generator, prefix: str, dim: int, ff_mult: int) -> dict[str, Tensor]:
    hidden = dim * ff_mult
    arrays = {
        "ln1.g": np.ones(dim), "ln1.b": np.zeros(dim),
        "attn.wq": _dense_init(rng, dim, dim), "attn.wk": _dense_init(rng, dim, dim),
        "attn.wv": _dense_init(rng, dim, dim), "attn.wo": _dense_init(rng, dim, dim) / np.sqrt(2.0),
        "attn.bo": np.zeros(dim),
        "ln2.g": np.ones(dim), "ln2.b": np.zeros(dim),
        "ff.w1": _dense_init(rng, dim, hidden), "ff.b1": np.zeros(hidden),
        "ff.w2": _dense_init(rng, hidden, dim) / np.sqrt(2.0), "ff.b2": np.zeros(dim),
    }
    return {f"{prefix}{k}": Tensor(v, requires_grad=True) for k, v in arrays.items()}


def affine_norm(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return ad.layer_norm(x) * g + b


def attention_mask(valid: np.ndarray) -> np.ndarray:
    """Additive key mask of shape (B, 1, 1, L): 0 where valid, -inf at padding."""
    return np.where(valid, 0.0, -np.inf)[:, None, None, :]


def self_attention(x: Tensor, p: dict[str, Tensor], prefix: str, n_heads: int, mask: np.ndarray | None) -> Tensor:
    """Bidirectional multi-head self-attention over x of shape (B, L, D)."""
    B, L, D = x.shape
    dh = D // n_heads

    def heads(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (B, L, n_heads, dh)), (0, 2, 1, 3))

    q = heads(x @ p[prefix + "attn.wq"])
    k = heads(x @ p[prefix + "attn.wk"])
    v = heads(x @ p[prefix + "attn.wv"])
    scores = ad.scalar_mul(q @ ad.transpose(k, (0, 1, 3, 2)), 1.0 / np.sqrt(dh))
    if mask is not None:
        scores = scores + mask
    ctx = ad.softmax_lastdim(scores) @ v
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, L, D))
    return ctx @ p[prefix + "attn.wo"] + p[prefix + "attn.bo"]


def transformer_block(x: Tensor, p: dict[str, Tensor], prefix: str, n_heads: int,
                      mask: np.ndarray | None) -> Tensor:
    h = affine_norm(x, p[prefix + "ln1.g"], p[prefix + "ln1.b"])
    x = x + self_attention(h, p, prefix, n_heads, mask)
    h = affine_norm(x, p[prefix + "ln2.g"], p[prefix + "ln2.b"])
    h = ad.gelu(h @ p[prefix + "ff.w1"] + p[prefix + "ff.b1"])
    return x + (h @ p[prefix + "ff.w2"] + p[prefix + "ff.b2"])


# ---------------------------------------------------------------------------
# pooling


def pool(sequence: Tensor, weights: Tensor, valid: np.ndarray | None = None) -> Tensor:
    """Softmax-weighted sum over positions.

    ``sequence`` is (L, d) or (B, L, d); ``weights`` holds one logit per
    position (at least L of them). Positions where ``valid`` is False get an
    ``-inf`` logit and contribute nothing.
    """
    single = sequence.ndim == 2
    seq = ad.reshape(sequence, (1,) + sequence.shape) if single else sequence
    B, L, _ = seq.shape
    if L == 0:
        raise EncoderInputError("pool: empty sequence")
    if weights.shape[0] < L:
        raise ShapeError(f"pool: {weights.shape[0]} position weights for a length-{L} sequence")
    logits = weights[:L] if weights.shape[0] != L else weights
    logits = ad.reshape(logits, (1, L)) + np.zeros((B, 1))
    if valid is not None:
        valid = np.asarray(valid, dtype=bool).reshape(B, L)
        if not valid.any(axis=1).all():
            raise EncoderInputError("pool: a sequence has no valid positions")
        logits = logits + np.where(valid, 0.0, -np.inf)
    w = ad.reshape(ad.softmax_lastdim(logits), (B, 1, L))
    out = ad.reshape(w @ seq, (B, seq.shape[2]))
    return ad.reshape(out, (seq.shape[2],)) if single else out


# ---------------------------------------------------------------------------
# encoders


def init_encoder(config: EncoderConfig, rng: np.random.Generator) -> EncoderParams:
    D = config.model_dim
    t: dict[str, Tensor] = {}
    if config.kind == "text":
        t["tok_emb"] = Tensor(rng.standard_normal((config.vocab_size, D)) * 0.5, requires_grad=True)
    else:
        t["patch_in.w"] = Tensor(_dense_init(rng, config.patch_dim, D), requires_grad=True)
        t["patch_in.b"] = Tensor(np.zeros(D), requires_grad=True)
    t["pos_emb"] = Tensor(rng.standard_normal((config.max_positions, D)) * 0.5, requires_grad=True)
    for i in range(config.n_layers):
        t.update(init_block(rng, f"layers.{i}.", D, config.ff_mult))
    t["ln_f.g"] = Tensor(np.ones(D), requires_grad=True)
    t["ln_f.b"] = Tensor(np.zeros(D), requires_grad=True)
    t["proj.w"] = Tensor(_dense_init(rng, D, config.embed_dim), requires_grad=True)
    t["proj.b"] = Tensor(np.zeros(config.embed_dim), requires_grad=True)
    t["pool.w"] = Tensor(np.zeros(config.max_positions), requires_grad=True)
    return EncoderParams(config, t)


def _encode_sequence(x: Tensor, params: EncoderParams, valid: np.ndarray) -> tuple[Tensor, Tensor]:
    cfg, p = params.config, params.tensors
    L = x.shape[1]
    x = x + p["pos_emb"][:L]
    mask = None if valid.all() else attention_mask(valid)
    for i in range(cfg.n_layers):
        x = transformer_block(x, p, f"layers.{i}.", cfg.n_heads, mask)
    x = affine_norm(x, p["ln_f.g"], p["ln_f.b"])
    words = x @ p["proj.w"] + p["proj.b"]
    return words, pool(words, p["pool.w"], None if valid.all() else valid)


def pad_tokens(sequences: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad token sequences with PAD_ID; returns (ids (B, L), valid mask (B, L))."""
    if not sequences:
        raise EncoderInputError("no sequences to encode")
    L = max(len(s) for s in sequences)
    ids = np.full((len(sequences), L), PAD_ID, dtype=np.int64)
    valid = np.zeros((len(sequences), L), dtype=bool)
    for b, s in enumerate(sequences):
        ids[b, :len(s)] = s
        valid[b, :len(s)] = True
    return ids, valid


def encode_text_batch(sequences: list[list[int]], params: EncoderParams) -> tuple[Tensor, Tensor, np.ndarray]:
    """Encode a batch of token sequences.

    Returns (word embeddings (B, L, d), pooled embeddings (B, d), valid mask (B, L)).
    """
    cfg = params.config
    if cfg.kind != "text":
        raise EncoderInputError("encode_text needs a text encoder")
    for b, s in enumerate(sequences):
        if len(s) == 0:
            raise EncoderInputError(f"empty token sequence at batch index {b}")
        if len(s) > cfg.max_seq_len:
            raise EncoderInputError(f"sequence {b} has length {len(s)} > max_seq_len {cfg.max_seq_len}")
        bad = [t for t in s if not 0 <= t < cfg.vocab_size]
        if bad:
            raise EncoderInputError(f"out-of-vocabulary token id {bad[0]} at batch index {b} "
                                    f"(vocab_size {cfg.vocab_size})")
    ids, valid = pad_tokens(sequences)
    x = params["tok_emb"][ids]
    words, pooled = _encode_sequence(x, params, valid)
    return words, pooled, valid


def encode_text(tokens: list[int], params: EncoderParams) -> tuple[Tensor, Tensor]:
    """Encode one sequence: (word embeddings (L, d), pooled (d,))."""
    words, pooled, _ = encode_text_batch([list(tokens)], params)
    L, d = words.shape[1], words.shape[2]
    return ad.reshape(words, (L, d)), ad.reshape(pooled, (d,))


def encode_image_batch(patches, params: EncoderParams) -> Tensor:
    """Encode patch grids of shape (B, P, patch_dim) to (B, d)."""
    cfg = params.config
    if cfg.kind != "image":
        raise EncoderInputError("encode_image needs an image encoder")
    arr = patches.data if isinstance(patches, Tensor) else np.asarray(patches, dtype=np.float64)
    if arr.ndim != 3:
        raise EncoderInputError(f"patch batch must be 3-D (B, P, F), got shape {arr.shape}")
    B, P, F = arr.shape
    if F != cfg.patch_dim:
        raise EncoderInputError(f"patch width {F} does not match configured patch_dim {cfg.patch_dim}")
    if P > cfg.n_patches or P == 0:
        raise EncoderInputError(f"{P} patches; encoder supports 1..{cfg.n_patches}")
    x = patches if isinstance(patches, Tensor) else Tensor(arr)
    x = x @ params["patch_in.w"] + params["patch_in.b"]
    _, pooled = _encode_sequence(x, params, np.ones((B, P), dtype=bool))
    return pooled


def encode_image(patches, params: EncoderParams) -> Tensor:
    arr = patches.data if isinstance(patches, Tensor) else np.asarray(patches, dtype=np.float64)
    if arr.ndim != 2:
        raise EncoderInputError(f"patch grid must be 2-D (P, F), got shape {arr.shape}")
    x = ad.reshape(patches, (1,) + arr.shape) if isinstance(patches, Tensor) else arr[None]
    out = encode_image_batch(x, params)
    return ad.reshape(out, (out.shape[1],))
