"""Seeded synthetic image / dense-text / sparse-text corpus.

A scene is a tuple of ``A`` attribute values (each in ``range(V)``). Its
"image" is a grid of patch feature vectors: patch ``p`` shows the prototype of
slot ``p % A`` at the scene's value for that slot, plus Gaussian noise. The
dense text enumerates every attribute as ``(SLOT_a, VAL_v, SEP)``; each of the
five sparse views enumerates a random ``k``-subset of slots the same way.

Token ids: 0 = PAD, 1 = SEP, ``2 + a`` = SLOT_a, ``2 + A + v`` = VAL_v.

File format (UTF-8 JSON lines). Line 1 is a header::

    {"schema": "vsedistill.corpus", "version": 1, "n_scenes": N, "config": {...}}

followed by one object per scene with keys ``scene_id``, ``split``
("train" | "val" | "test"), ``fold``, ``attributes``, ``patches`` (list of
rows, floats at 17 significant digits), ``dense_tokens``, ``sparse_views``
(5 token lists) and ``view_slots`` (the slot subset behind each view).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SCHEMA = "vsedistill.corpus"
SCHEMA_VERSION = 1
N_VIEWS = 5
PAD, SEP = 0, 1
SPLITS = ("train", "val", "test")


class CorpusError(ValueError):
    """Invalid corpus configuration or unreadable corpus file."""


@dataclass(frozen=True)
class CorpusConfig:
    n_train: int = 512
    n_val: int = 64
    n_test: int = 64
    n_attributes: int = 8
    n_values: int = 8
    k: int = 2
    n_patches: int = 16
    patch_dim: int = 16
    noise: float = 0.1
    n_test_folds: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.k >= self.n_attributes:
            raise CorpusError(f"k ({self.k}) must be smaller than the number of attributes ({self.n_attributes})")
        if self.k < 1:
            raise CorpusError(f"k must be at least 1, got {self.k}")
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 1:
                raise CorpusError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("n_attributes", "n_values", "n_patches", "patch_dim"):
            if getattr(self, name) < 1:
                raise CorpusError(f"{name} must be positive, got {getattr(self, name)}")
        if self.noise < 0:
            raise CorpusError(f"noise must be nonnegative, got {self.noise}")
        if not 1 <= self.n_test_folds <= self.n_test:
            raise CorpusError(f"n_test_folds must lie in 1..n_test, got {self.n_test_folds}")
        total = self.n_train + self.n_val + self.n_test
        if total > self.n_values ** self.n_attributes:
            raise CorpusError(f"{total} scenes cannot have distinct attribute tuples "
                              f"with {self.n_attributes} slots of {self.n_values} values")

    @property
    def n_scenes(self) -> int:
        return self.n_train + self.n_val + self.n_test

    @property
    def vocab_needed(self) -> int:
        return 2 + self.n_attributes + self.n_values

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Scene:
    scene_id: int
    split: str
    fold: int
    attributes: tuple[int, ...]
    patches: np.ndarray
    dense_tokens: list[int]
    sparse_views: list[list[int]]
    view_slots: list[tuple[int, ...]]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.scene_id == other.scene_id and self.split == other.split and self.fold == other.fold
                and tuple(self.attributes) == tuple(other.attributes)
                and self.patches.shape == other.patches.shape
                and np.array_equal(self.patches, other.patches)
                and self.dense_tokens == other.dense_tokens
                and self.sparse_views == other.sparse_views
                and [tuple(v) for v in self.view_slots] == [tuple(v) for v in other.view_slots])


@dataclass
class Corpus:
    config: CorpusConfig
    scenes: list[Scene] = field(default_factory=list)

    def split(self, name: str) -> list[Scene]:
        if name not in SPLITS:
            raise CorpusError(f"unknown split {name!r}")
        return [s for s in self.scenes if s.split == name]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return self.config == other.config and self.scenes == other.scenes


def attribute_tokens(slot: int, value: int, n_attributes: int) -> list[int]:
    return [2 + slot, 2 + n_attributes + value, SEP]


def describe(attributes, slots, n_attributes: int) -> list[int]:
    out: list[int] = []
    for a in slots:
        out.extend(attribute_tokens(a, attributes[a], n_attributes))
    return out


def decode_tokens(tokens: list[int], n_attributes: int) -> dict[int, int]:
    """Inverse of ``describe``: slot -> value."""
    if len(tokens) % 3:
        raise CorpusError(f"token sequence length {len(tokens)} is not a multiple of 3")
    out = {}
    for i in range(0, len(tokens), 3):
        slot_tok, val_tok, sep = tokens[i:i + 3]
        if sep != SEP or not 2 <= slot_tok < 2 + n_attributes or val_tok < 2 + n_attributes:
            raise CorpusError(f"malformed attribute triple {tokens[i:i + 3]}")
        out[slot_tok - 2] = val_tok - 2 - n_attributes
    return out


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _prototypes(config: CorpusConfig) -> np.ndarray:
    rng = _rng(config.seed, 0)
    return rng.standard_normal((config.n_attributes, config.n_values, config.patch_dim))


def _split_of(scene_id: int, config: CorpusConfig) -> tuple[str, int]:
    if scene_id < config.n_train:
        return "train", 0
    if scene_id < config.n_train + config.n_val:
        return "val", 0
    j = scene_id - config.n_train - config.n_val
    fold_size = math.ceil(config.n_test / config.n_test_folds)
    return "test", min(j // fold_size, config.n_test_folds - 1)


def make_scene(scene_id: int, attributes: tuple[int, ...], config: CorpusConfig,
               prototypes: np.ndarray | None = None) -> Scene:
    """Build the patches and token views of one scene; a pure function of (seed, id, attributes)."""
    protos = _prototypes(config) if prototypes is None else prototypes
    A = config.n_attributes
    rng = _rng(config.seed, 2, scene_id)
    slots = np.arange(config.n_patches) % A
    patches = protos[slots, np.asarray(attributes)[slots]]
    patches = patches + config.noise * rng.standard_normal(patches.shape)
    n_subsets = math.comb(A, config.k)
    chosen: list[tuple[int, ...]] = []
    while len(chosen) < N_VIEWS:
        subset = tuple(sorted(int(x) for x in rng.choice(A, size=config.k, replace=False)))
        if subset in chosen and n_subsets >= N_VIEWS:
            continue
        chosen.append(subset)
    split, fold = _split_of(scene_id, config)
    return Scene(
        scene_id=scene_id,
        split=split,
        fold=fold,
        attributes=tuple(int(v) for v in attributes),
        patches=patches,
        dense_tokens=describe(attributes, range(A), A),
        sparse_views=[describe(attributes, s, A) for s in chosen],
        view_slots=chosen,
    )


def generate_corpus(config: CorpusConfig) -> Corpus:
    config.validate()
    protos = _prototypes(config)
    seen: set[tuple[int, ...]] = set()
    scenes = []
    for scene_id in range(config.n_scenes):
        attempt = 0
        while True:
            rng = _rng(config.seed, 1, scene_id, attempt)
            attrs = tuple(int(v) for v in rng.integers(0, config.n_values, size=config.n_attributes))
            if attrs not in seen:
                break
            attempt += 1
        seen.add(attrs)
        scenes.append(make_scene(scene_id, attrs, config, protos))
    return Corpus(config, scenes)


# ---------------------------------------------------------------------------
# serialization


def _fmt_rows(arr: np.ndarray) -> str:
    return "[" + ",".join("[" + ",".join(format(float(v), ".17g") for v in row) + "]" for row in arr) + "]"


def _scene_line(s: Scene) -> str:
    head = json.dumps({"scene_id": s.scene_id, "split": s.split, "fold": s.fold,
                       "attributes": list(s.attributes)})[:-1]
    tail = json.dumps({"dense_tokens": s.dense_tokens, "sparse_views": s.sparse_views,
                       "view_slots": [list(v) for v in s.view_slots]})[1:]
    return f'{head}, "patches": {_fmt_rows(s.patches)}, {tail}'


def dumps_corpus(corpus: Corpus) -> str:
    header = {"schema": SCHEMA, "version": SCHEMA_VERSION, "n_scenes": len(corpus.scenes),
              "config": corpus.config.to_dict()}
    lines = [json.dumps(header, sort_keys=True)] + [_scene_line(s) for s in corpus.scenes]
    return "\n".join(lines) + "\n"


def save_corpus(corpus: Corpus, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_corpus(corpus), encoding="utf-8")
    return path


def loads_corpus(text: str) -> Corpus:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise CorpusError("empty corpus file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise CorpusError(f"corpus header is not valid JSON: {e}") from None
    if not isinstance(header, dict) or header.get("schema") != SCHEMA:
        raise CorpusError("not a corpus file (schema tag missing)")
    if header.get("version") != SCHEMA_VERSION:
        raise CorpusError(f"corpus schema version {header.get('version')} != supported {SCHEMA_VERSION}")
    try:
        config = CorpusConfig(**header["config"])
    except (KeyError, TypeError) as e:
        raise CorpusError(f"corpus header config unreadable: {e}") from None
    body = lines[1:]
    if len(body) != header.get("n_scenes"):
        raise CorpusError(f"corpus truncated: header announces {header.get('n_scenes')} scenes, found {len(body)}")
    scenes = []
    for lineno, line in enumerate(body, start=2):
        try:
            rec = json.loads(line)
            scenes.append(Scene(
                scene_id=int(rec["scene_id"]),
                split=str(rec["split"]),
                fold=int(rec["fold"]),
                attributes=tuple(int(v) for v in rec["attributes"]),
                patches=np.asarray(rec["patches"], dtype=np.float64),
                dense_tokens=[int(t) for t in rec["dense_tokens"]],
                sparse_views=[[int(t) for t in v] for v in rec["sparse_views"]],
                view_slots=[tuple(int(a) for a in v) for v in rec["view_slots"]],
            ))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise CorpusError(f"corpus line {lineno} unreadable: {e}") from None
    return Corpus(config, scenes)


def load_corpus(path) -> Corpus:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise CorpusError(f"{path}: not UTF-8: {e}") from None
    return loads_corpus(text)
