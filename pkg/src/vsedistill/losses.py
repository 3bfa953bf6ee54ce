"""Cosine similarity, hardest-negative triplet loss and distillation objectives."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, ShapeError, Tensor

DEFAULT_MARGIN = 0.2


class DistillKind(str, enum.Enum):
    NEG_COSINE = "negcosine"
    L1 = "l1"
    L2 = "l2"

    @classmethod
    def parse(cls, value) -> "DistillKind":
        if isinstance(value, DistillKind):
            return value
        key = str(value).lower().replace("-", "").replace("_", "")
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown distillation kind {value!r}; expected negcosine, l1 or l2") from None


@dataclass(frozen=True)
class LossConfig:
    margin: float = DEFAULT_MARGIN
    distill_kind: str = "negcosine"
    align_weight: float = 1.0
    distill_weight: float = 1.0

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError(f"margin must be nonnegative, got {self.margin}")
        object.__setattr__(self, "distill_kind", DistillKind.parse(self.distill_kind).value)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def cosine_similarity(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    na, nb = ad.l2_norm(a), ad.l2_norm(b)
    if np.any(na.data == 0.0) or np.any(nb.data == 0.0):
        raise DomainError("cosine_similarity: zero vector")
    return ad.div(ad.dot(a, b), na * nb)


def similarity_matrix(images, texts) -> Tensor:
    """Cosine similarities, rows = images, columns = texts."""
    images, texts = _t(images), _t(texts)
    if images.ndim != 2 or texts.ndim != 2 or images.shape[1] != texts.shape[1]:
        raise ShapeError(f"similarity_matrix: expected (n, d) and (m, d), got {images.shape} and {texts.shape}")
    for name, x in (("image", images), ("text", texts)):
        zero = np.flatnonzero((x.data * x.data).sum(axis=1) == 0.0)
        if zero.size:
            raise DomainError(f"similarity_matrix: zero {name} vector at index {int(zero[0])}")
    return ad.normalize(images) @ ad.transpose(ad.normalize(texts))


def hardest_negatives(S: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per row, the hardest off-diagonal text; per column, the hardest off-diagonal image.

    Ties go to the lowest index.
    """
    S = np.asarray(S, dtype=np.float64)
    n = S.shape[0]
    if S.ndim != 2 or S.shape[1] != n:
        raise ShapeError(f"hardest_negatives: expected a square matrix, got {S.shape}")
    if n < 2:
        raise ValueError("hardest_negatives: need n >= 2 so that negatives exist")
    masked = S.copy()
    np.fill_diagonal(masked, -np.inf)
    return masked.argmax(axis=1), masked.argmax(axis=0)


def triplet_hardest_loss(S, margin: float = DEFAULT_MARGIN) -> Tensor:
    """Sum over positive pairs of both hardest-negative hinge terms."""
    S = _t(S)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ShapeError(f"triplet_hardest_loss: expected a square matrix, got {S.shape}")
    n = S.shape[0]
    if n < 2:
        raise ValueError("triplet_hardest_loss: need n >= 2 so that negatives exist")
    if margin < 0:
        raise ValueError(f"margin must be nonnegative, got {margin}")
    row_neg, col_neg = hardest_negatives(S.data)
    idx = np.arange(n)
    pos = S[idx, idx]
    cost_text = ad.relu(pos * -1.0 + S[idx, row_neg] + margin)
    cost_image = ad.relu(pos * -1.0 + S[col_neg, idx] + margin)
    return ad.sum(cost_text) + ad.sum(cost_image)


def triplet_sum_loss(S, margin: float = DEFAULT_MARGIN) -> Tensor:
    """Hinge summed over every negative; used for warm-up epochs before hardest-negative mining."""
    S = _t(S)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ShapeError(f"triplet_sum_loss: expected a square matrix, got {S.shape}")
    n = S.shape[0]
    if n < 2:
        raise ValueError("triplet_sum_loss: need n >= 2 so that negatives exist")
    idx = np.arange(n)
    pos = S[idx, idx]
    off_diag = 1.0 - np.eye(n)
    cost_text = ad.relu(S - ad.reshape(pos, (n, 1)) + margin) * off_diag
    cost_image = ad.relu(S - ad.reshape(pos, (1, n)) + margin) * off_diag
    return ad.sum(cost_text) + ad.sum(cost_image)


def distill_loss(t_dense, t_hat, kind="negcosine") -> Tensor:
    """Dense-to-sparse distillation; batched inputs (B, d) are summed over the batch."""
    t_dense, t_hat = _t(t_dense), _t(t_hat)
    if t_dense.shape != t_hat.shape:
        raise ShapeError(f"distill_loss: shapes {t_dense.shape} and {t_hat.shape} differ")
    kind = DistillKind.parse(kind)
    if kind is DistillKind.NEG_COSINE:
        per = 1.0 - cosine_similarity(t_dense, t_hat)
    else:
        diff = t_hat - t_dense
        per = ad.mean_over_axis(ad.hadamard(diff, diff) if kind is DistillKind.L2 else _abs(diff), axis=-1)
    return ad.sum(per) if per.ndim else per


def _abs(x: Tensor) -> Tensor:
    return ad.relu(x) + ad.relu(x * -1.0)


def total_loss(l_align: Tensor | None, l_distill: Tensor | None,
               align_weight: float = 1.0, distill_weight: float = 1.0) -> Tensor:
    """Joint objective; either term may be absent for the ablation grid."""
    terms = []
    if l_align is not None:
        terms.append(l_align if align_weight == 1.0 else l_align * align_weight)
    if l_distill is not None:
        terms.append(l_distill if distill_weight == 1.0 else l_distill * distill_weight)
    if not terms:
        raise ValueError("total_loss: no terms")
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out
