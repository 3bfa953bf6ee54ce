"""Parameter container tying the three encoders and the decoder together."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .decoder import DecoderConfig, DecoderParams, init_decoder, reconstruct_batch
from .encoders import EncoderConfig, EncoderParams, encode_image_batch, encode_text_batch, init_encoder

COMPONENTS = ("image", "dense", "sparse", "decoder")


@dataclass(frozen=True)
class ModelConfig:
    model_dim: int = 32
    embed_dim: int = 32
    n_layers: int = 2
    n_heads: int = 2
    ff_mult: int = 4
    vocab_size: int = 64
    dense_max_len: int = 64
    sparse_max_len: int = 12
    n_patches: int = 16
    patch_dim: int = 16
    n_mask_tokens: int = 8
    placement: str = "surround"
    decoder_layers: int = 4
    decoder_heads: int = 4

    def __post_init__(self):
        # the decoder consumes projected word embeddings directly
        if self.embed_dim != self.model_dim:
            raise ValueError(f"embed_dim ({self.embed_dim}) must equal model_dim ({self.model_dim})")
        for name in ("n_heads", "decoder_heads"):
            if getattr(self, name) < 1 or self.model_dim % getattr(self, name):
                raise ValueError(f"{name}={getattr(self, name)} must divide model_dim {self.model_dim}")
        for name in ("n_layers", "decoder_layers", "n_mask_tokens", "sparse_max_len", "dense_max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    def image_config(self) -> EncoderConfig:
        return EncoderConfig(kind="image", model_dim=self.model_dim, embed_dim=self.embed_dim,
                             n_layers=self.n_layers, n_heads=self.n_heads, ff_mult=self.ff_mult,
                             n_patches=self.n_patches, patch_dim=self.patch_dim)

    def text_config(self) -> EncoderConfig:
        return EncoderConfig(kind="text", model_dim=self.model_dim, embed_dim=self.embed_dim,
                             n_layers=self.n_layers, n_heads=self.n_heads, ff_mult=self.ff_mult,
                             vocab_size=self.vocab_size, max_seq_len=self.dense_max_len)

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(n_mask_tokens=self.n_mask_tokens, placement=self.placement,
                             n_layers=self.decoder_layers, n_heads=self.decoder_heads,
                             model_dim=self.model_dim, embed_dim=self.embed_dim, ff_mult=self.ff_mult,
                             max_seq_len=self.sparse_max_len)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class VSEModel:
    config: ModelConfig
    image: EncoderParams
    dense: EncoderParams
    sparse: EncoderParams | None = None
    decoder: DecoderParams | None = None

    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator) -> "VSEModel":
        return cls(config, init_encoder(config.image_config(), rng), init_encoder(config.text_config(), rng))

    def add_sparse_branch(self, rng: np.random.Generator, from_dense: bool = True) -> None:
        self.sparse = self.dense.copy() if from_dense else init_encoder(self.config.text_config(), rng)
        self.decoder = init_decoder(self.config.decoder_config(), rng)

    def component(self, name: str):
        return getattr(self, name)

    def named_parameters(self, components=COMPONENTS) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for comp in components:
            part = getattr(self, comp)
            if part is None:
                continue
            for k, t in part.tensors.items():
                out[f"{comp}.{k}"] = t
        return out

    def load_named_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise KeyError(f"missing parameter arrays: {missing[:5]}")
        for k, t in params.items():
            if arrays[k].shape != t.shape:
                raise ValueError(f"parameter {k}: stored shape {arrays[k].shape} != expected {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)

    def clone(self) -> "VSEModel":
        def cp(part):
            if part is None:
                return None
            t = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in part.tensors.items()}
            return type(part)(part.config, t)
        return VSEModel(self.config, cp(self.image), cp(self.dense), cp(self.sparse), cp(self.decoder))

    def checksum(self, components=COMPONENTS) -> str:
        return params_checksum(self.named_parameters(components))


def params_checksum(params: dict[str, Tensor]) -> str:
    """SHA-256 over names, shapes and little-endian float64 bytes, in sorted name order."""
    h = hashlib.sha256()
    for k in sorted(params):
        arr = np.ascontiguousarray(params[k].data, dtype="<f8")
        h.update(k.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# embedding helpers


def image_embeddings(model: VSEModel, patches: np.ndarray) -> Tensor:
    return encode_image_batch(patches, model.image)


def dense_embeddings(model: VSEModel, token_lists: list[list[int]]) -> Tensor:
    return encode_text_batch(token_lists, model.dense)[1]


def sparse_embeddings(model: VSEModel, token_lists: list[list[int]], use_decoder: bool = True) -> tuple[Tensor, Tensor]:
    """(t_s, t_hat) for sparse views; falls back to the dense encoder when no sparse branch exists."""
    encoder = model.sparse if model.sparse is not None else model.dense
    words, t_s, valid = encode_text_batch(token_lists, encoder)
    if use_decoder and model.decoder is not None:
        return t_s, reconstruct_batch(words, t_s, valid, model.decoder)
    return t_s, t_s


def batched(fn, items: list, batch_size: int = 64) -> np.ndarray:
    with ad.no_grad():
        parts = [fn(items[i:i + batch_size]).data for i in range(0, len(items), batch_size)]
    return np.concatenate(parts, axis=0)


def embed_split(model: VSEModel, scenes, text: str = "sparse", batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Image embeddings (n, d) and text embeddings: (5n, d) views in scene order, or (n, d) dense."""
    images = batched(lambda ss: image_embeddings(model, np.stack([s.patches for s in ss])), list(scenes), batch_size)
    if text == "dense":
        texts = batched(lambda ts: dense_embeddings(model, ts), [s.dense_tokens for s in scenes], batch_size)
    else:
        views = [v for s in scenes for v in s.sparse_views]
        texts = batched(lambda ts: sparse_embeddings(model, ts)[1], views, batch_size)
    return images, texts
