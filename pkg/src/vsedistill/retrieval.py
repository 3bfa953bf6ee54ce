"""Bidirectional Recall@K / rSum evaluation.

Similarity matrices are indexed (image, text). Image->text ("text retrieval")
queries by row; text->image ("image retrieval") queries by column. Ranking is
by descending similarity with ties broken toward the lower item index.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

RECALL_KS = (1, 5, 10)
DIRECTIONS = ("i2t", "t2i")
REPORT_SCHEMA_VERSION = 1


class RetrievalError(ValueError):
    pass


def _queries(S: np.ndarray, direction: str) -> np.ndarray:
    if direction == "i2t":
        return np.asarray(S, dtype=np.float64)
    if direction == "t2i":
        return np.asarray(S, dtype=np.float64).T
    raise RetrievalError(f"unknown direction {direction!r}; expected 'i2t' or 't2i'")


def _relevant_lists(ground_truth, n_queries: int, n_items: int) -> list[list[int]]:
    if isinstance(ground_truth, Mapping):
        rel = [ground_truth.get(q, ()) for q in range(n_queries)]
    else:
        rel = list(ground_truth)
    if len(rel) != n_queries:
        raise RetrievalError(f"ground truth covers {len(rel)} queries, matrix has {n_queries}")
    out = []
    for q, items in enumerate(rel):
        items = sorted({int(i) for i in (items if np.iterable(items) else [items])})
        if not items:
            raise RetrievalError(f"query {q} has an empty relevant set")
        if items[0] < 0 or items[-1] >= n_items:
            raise RetrievalError(f"query {q} references item outside 0..{n_items - 1}")
        out.append(items)
    return out


def _check_k(k: int, n_items: int) -> None:
    if not 1 <= k <= n_items:
        raise RetrievalError(f"k={k} out of range 1..{n_items}")


def best_ranks(S: np.ndarray, ground_truth, direction: str = "i2t") -> np.ndarray:
    """0-based rank of the best-placed relevant item for every query."""
    Q = _queries(S, direction)
    nq, n = Q.shape
    rel = _relevant_lists(ground_truth, nq, n)
    width = max(len(r) for r in rel)
    idx = np.array([r + [r[0]] * (width - len(r)) for r in rel], dtype=np.int64)
    scores = np.take_along_axis(Q, idx, axis=1)  # (nq, width)
    ranks = np.empty(nq, dtype=np.int64)
    cols = np.arange(n)
    for start in range(0, nq, 256):
        stop = min(start + 256, nq)
        q = Q[start:stop, None, :]
        s = scores[start:stop, :, None]
        ahead = (q > s) | ((q == s) & (cols[None, None, :] < idx[start:stop, :, None]))
        ranks[start:stop] = ahead.sum(axis=2).min(axis=1)
    return ranks


def recall_at_k(S: np.ndarray, ground_truth, k: int, direction: str = "i2t") -> float:
    """Percentage of queries with a relevant item among the top ``k``."""
    Q = _queries(S, direction)
    _check_k(k, Q.shape[1])
    ranks = best_ranks(S, ground_truth, direction)
    return 100.0 * float(np.count_nonzero(ranks < k)) / len(ranks)


def ranking_oracle(S: np.ndarray, ground_truth, k: int, direction: str = "i2t") -> float:
    """Full-sort reference implementation of ``recall_at_k``."""
    Q = _queries(S, direction)
    _check_k(k, Q.shape[1])
    rel = _relevant_lists(ground_truth, *Q.shape)
    hits = 0
    for q in range(Q.shape[0]):
        row = Q[q].tolist()
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        if set(order[:k]) & set(rel[q]):
            hits += 1
    return 100.0 * hits / Q.shape[0]


def multi_view_ground_truth(n_images: int, views_per_image: int) -> tuple[list[list[int]], list[list[int]]]:
    """Image q owns texts q*V .. q*V+V-1 (i2t); each text has one image (t2i)."""
    i2t = [list(range(q * views_per_image, (q + 1) * views_per_image)) for q in range(n_images)]
    t2i = [[j // views_per_image] for j in range(n_images * views_per_image)]
    return i2t, t2i


@dataclass
class RetrievalReport:
    tr_r1: float
    tr_r5: float
    tr_r10: float
    ir_r1: float
    ir_r5: float
    ir_r10: float
    rsum: float
    split: str = ""
    n_images: int = 0
    n_texts: int = 0
    n_folds: int = 1
    model_checksum: str = ""
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_recalls(cls, tr: Sequence[float], ir: Sequence[float], **meta) -> "RetrievalReport":
        tr = [float(x) for x in tr]
        ir = [float(x) for x in ir]
        return cls(*tr, *ir, rsum=sum(tr) + sum(ir), **meta)

    @property
    def recalls(self) -> tuple[float, ...]:
        return (self.tr_r1, self.tr_r5, self.tr_r10, self.ir_r1, self.ir_r5, self.ir_r10)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = REPORT_SCHEMA_VERSION
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["direction", "k", "recall"])
        for direction, values in (("i2t", self.recalls[:3]), ("t2i", self.recalls[3:])):
            for k, v in zip(RECALL_KS, values):
                w.writerow([direction, k, repr(v)])
        w.writerow(["rsum", "", repr(self.rsum)])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> "RetrievalReport":
        d = {k: v for k, v in d.items() if k != "schema_version"}
        return cls(**d)


def report_from_similarity(S: np.ndarray, views_per_image: int, **meta) -> RetrievalReport:
    n_images = S.shape[0]
    i2t, t2i = multi_view_ground_truth(n_images, views_per_image)
    tr_ranks = best_ranks(S, i2t, "i2t")
    ir_ranks = best_ranks(S, t2i, "t2i")
    tr = [100.0 * np.count_nonzero(tr_ranks < k) / n_images for k in RECALL_KS]
    ir = [100.0 * np.count_nonzero(ir_ranks < k) / len(ir_ranks) for k in RECALL_KS]
    return RetrievalReport.from_recalls(tr, ir, n_images=n_images, n_texts=S.shape[1], **meta)


def _cosine_matrix(images: np.ndarray, texts: np.ndarray) -> np.ndarray:
    def unit(x):
        if not np.isfinite(x).all():
            bad = int(np.flatnonzero(~np.isfinite(x).all(axis=1))[0])
            raise RetrievalError(f"non-finite embedding at index {bad}")
        n = np.linalg.norm(x, axis=1, keepdims=True)
        if np.any(n == 0.0):
            raise RetrievalError(f"zero embedding at index {int(np.flatnonzero(n[:, 0] == 0.0)[0])}")
        return x / n
    return unit(images) @ unit(texts).T


def evaluate_embeddings(images: np.ndarray, texts: np.ndarray, views_per_image: int,
                        folds: Sequence[int] | None = None, **meta) -> RetrievalReport:
    """Report for precomputed embeddings; with ``folds`` each fold is scored alone and metrics averaged."""
    images = np.asarray(images, dtype=np.float64)
    texts = np.asarray(texts, dtype=np.float64)
    if len(texts) != len(images) * views_per_image:
        raise RetrievalError(f"{len(texts)} texts for {len(images)} images x {views_per_image} views")
    if folds is None or len(set(folds)) <= 1:
        return report_from_similarity(_cosine_matrix(images, texts), views_per_image, **meta)
    folds = np.asarray(folds)
    parts = []
    for f in sorted(set(folds.tolist())):
        sel = np.flatnonzero(folds == f)
        tsel = (sel[:, None] * views_per_image + np.arange(views_per_image)).reshape(-1)
        parts.append(report_from_similarity(_cosine_matrix(images[sel], texts[tsel]), views_per_image))
    avg = np.mean([p.recalls for p in parts], axis=0)
    return RetrievalReport.from_recalls(avg[:3], avg[3:], n_images=len(images), n_texts=len(texts),
                                        n_folds=len(parts), **meta)


def evaluate(model_or_checkpoint, corpus, split: str = "test", folds: bool = False,
             text: str = "sparse") -> RetrievalReport:
    """Embed every image and text of ``split`` and score both retrieval directions."""
    from .model import embed_split

    model = getattr(model_or_checkpoint, "model", model_or_checkpoint)
    scenes = corpus.split(split) if hasattr(corpus, "split") else list(corpus)
    if not scenes:
        raise RetrievalError(f"split {split!r} is empty")
    try:
        images, texts = embed_split(model, scenes, text=text)
    except ValueError as e:
        raise RetrievalError(f"embedding split {split!r} (scene ids {scenes[0].scene_id}..{scenes[-1].scene_id}) "
                             f"failed: {e}") from e
    views = 1 if text == "dense" else len(scenes[0].sparse_views)
    fold_tags = [s.fold for s in scenes] if folds else None
    return evaluate_embeddings(images, texts, views, folds=fold_tags, split=split,
                               model_checksum=model.checksum())
