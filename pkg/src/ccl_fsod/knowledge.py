"""Category similarity ("knowledge") matrices built from side information.

Five construction cases are supported:

1. cosine between k-means centers of attribute-model embeddings,
2. cosine between binary attribute label vectors,
3. case 1 for base/base pairs and case 2 for every other pair,
4. cosine between category word vectors,
5. cosine between flattened attribute-word tables.

Every matrix is symmetric with unit diagonal and entries in [0, 1]; negative
cosines are clamped to 0.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import io
from .kmeans import kmeans

DEFAULT_NUM_ATTRIBUTES = 64
DEFAULT_CASE = 3
DEFAULT_K = 5


class KnowledgeError(ValueError):
    """Bad or missing side information."""


@dataclass(frozen=True)
class AttributeLabelVector:
    category_id: int
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 1:
            raise KnowledgeError(f"category {self.category_id}: label vector must be 1-d")
        if not np.isin(bits, (0, 1)).all():
            raise KnowledgeError(f"category {self.category_id}: label entries must be 0 or 1")
        if not bits.any():
            raise KnowledgeError(f"category {self.category_id}: label vector has no attribute set")
        bits = bits.astype(np.float64)
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)


@dataclass(frozen=True)
class CategoryEmbeddingSet:
    category_id: int
    embeddings: np.ndarray

    def __post_init__(self):
        emb = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        if emb.ndim != 2 or emb.shape[0] == 0:
            raise KnowledgeError(f"category {self.category_id}: need a non-empty 2-d embedding array")
        object.__setattr__(self, "embeddings", emb)


@dataclass(frozen=True)
class TextEmbeddingTable:
    """Word vectors for categories and attributes plus the "null" vector."""

    category_vectors: Mapping[int, np.ndarray] = field(default_factory=dict)
    attribute_vectors: Mapping[int, np.ndarray] = field(default_factory=dict)
    null_vector: np.ndarray | None = None


@dataclass(frozen=True)
class KnowledgeMatrix:
    values: np.ndarray
    category_names: tuple = ()

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise KnowledgeError(f"knowledge matrix must be square, got {values.shape}")
        if not np.array_equal(values, values.T):
            raise KnowledgeError("knowledge matrix must be symmetric")
        if not np.all(np.diag(values) == 1.0):
            raise KnowledgeError("knowledge matrix diagonal must be 1")
        if values.min() < 0.0 or values.max() > 1.0:
            raise KnowledgeError("knowledge matrix entries must lie in [0, 1]")
        values.flags.writeable = False
        names = tuple(self.category_names) or tuple(str(i) for i in range(values.shape[0]))
        if len(names) != values.shape[0]:
            raise KnowledgeError("category_names length does not match matrix size")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "category_names", names)

    @property
    def C(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, idx):
        return self.values[idx]

    @classmethod
    def ones(cls, C: int, category_names: Sequence[str] = ()) -> "KnowledgeMatrix":
        return cls(np.ones((C, C)), tuple(category_names))


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    # one sqrt of the product keeps a.a / sqrt(a.a * a.a) exactly 1
    return float(np.dot(a, b) / math.sqrt(float(np.dot(a, a)) * float(np.dot(b, b))))


def _clamp(x: float) -> float:
    return min(max(x, 0.0), 1.0)


def cluster_category_embeddings(embedding_set: CategoryEmbeddingSet, K: int, seed: int = 0) -> np.ndarray:
    emb = embedding_set.embeddings
    if emb.shape[0] < K:
        raise KnowledgeError(
            f"category {embedding_set.category_id}: {emb.shape[0]} embeddings, need at least K={K}"
        )
    centers, _ = kmeans(emb, K, seed=seed)
    return centers


def embedding_similarity(centers_a, centers_b) -> float:
    """Mean pairwise cosine between two sets of cluster centers, clamped to [0, 1]."""
    a = np.atleast_2d(np.asarray(centers_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(centers_b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise KnowledgeError(f"center dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    for name, m in (("centers_a", a), ("centers_b", b)):
        norms = np.linalg.norm(m, axis=1)
        if np.any(norms == 0):
            raise KnowledgeError(f"{name} row {int(np.flatnonzero(norms == 0)[0])} has zero norm")
    # fsum is order independent, so swapping the arguments gives the same value
    cosines = [_cosine(x, y) for x in a for y in b]
    return _clamp(math.fsum(cosines) / len(cosines))


def label_similarity(a: AttributeLabelVector, b: AttributeLabelVector) -> float:
    if a.bits.shape != b.bits.shape:
        raise KnowledgeError(
            f"label lengths differ: category {a.category_id} has {a.bits.size}, "
            f"category {b.category_id} has {b.bits.size}"
        )
    return _clamp(_cosine(a.bits, b.bits))


def text_similarity_category(e1, e2) -> float:
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    if not e1.any() or not e2.any():
        raise KnowledgeError("word vector is all zeros")
    return _clamp(_cosine(e1, e2))


def attribute_word_features(labels: AttributeLabelVector, table: TextEmbeddingTable) -> np.ndarray:
    """Stack per-attribute word vectors (null vector for absent attributes), flattened."""
    if table.null_vector is None:
        raise KnowledgeError("text table has no null vector")
    null = np.asarray(table.null_vector, dtype=np.float64)
    rows = []
    for i, bit in enumerate(labels.bits):
        if bit:
            if i not in table.attribute_vectors:
                raise KnowledgeError(f"no word vector for attribute index {i}")
            rows.append(np.asarray(table.attribute_vectors[i], dtype=np.float64))
        else:
            rows.append(null)
    return np.concatenate(rows)


def text_similarity_attribute(labels_a, labels_b, table: TextEmbeddingTable) -> float:
    fa = attribute_word_features(labels_a, table)
    fb = attribute_word_features(labels_b, table)
    if not fa.any() or not fb.any():
        raise KnowledgeError("attribute-word feature is all zeros")
    return _clamp(_cosine(fa, fb))


def build_knowledge_matrix(
    case: int,
    C: int,
    *,
    base_set=(),
    embedding_sets: Mapping[int, CategoryEmbeddingSet] | None = None,
    labels: Mapping[int, AttributeLabelVector] | None = None,
    text_table: TextEmbeddingTable | None = None,
    K: int = DEFAULT_K,
    seed: int = 0,
    category_names: Sequence[str] = (),
) -> KnowledgeMatrix:
    """Fill a C x C knowledge matrix with the similarity of the chosen case.

    Case 3 uses embedding similarity when both categories are in ``base_set``
    and label similarity otherwise. The diagonal is forced to 1 and each
    off-diagonal value is computed once and mirrored.
    """
    if case not in (1, 2, 3, 4, 5):
        raise KnowledgeError(f"unknown case {case}")
    base_set = frozenset(int(c) for c in base_set)
    if case == 3 and not base_set <= set(range(C)):
        raise KnowledgeError(f"base set {sorted(base_set - set(range(C)))} outside 0..{C - 1}")

    def require(mapping, needed, what):
        mapping = mapping or {}
        missing = sorted(c for c in needed if c not in mapping)
        if missing:
            raise KnowledgeError(f"case {case}: missing {what} for categories {missing}")

    everyone = range(C)
    centers = {}
    if case in (1, 3):
        needed = everyone if case == 1 else sorted(base_set)
        require(embedding_sets, needed, "embedding sets")
        centers = {c: cluster_category_embeddings(embedding_sets[c], K, seed) for c in needed}
    if case == 2 or (case == 3 and len(base_set) < C):
        # any base/novel pair in case 3 needs the labels of both sides
        require(labels, everyone, "attribute labels")
    if case == 4:
        require(text_table.category_vectors if text_table else None, everyone, "category word vectors")
    if case == 5:
        require(labels, everyone, "attribute labels")
        if text_table is None:
            raise KnowledgeError("case 5: missing text table")

    values = np.eye(C)
    for i in range(C):
        for j in range(i + 1, C):
            if case == 1 or (case == 3 and i in base_set and j in base_set):
                s = embedding_similarity(centers[i], centers[j])
            elif case in (2, 3):
                s = label_similarity(labels[i], labels[j])
            elif case == 4:
                s = text_similarity_category(text_table.category_vectors[i], text_table.category_vectors[j])
            else:
                s = text_similarity_attribute(labels[i], labels[j], text_table)
            values[i, j] = values[j, i] = s
    return KnowledgeMatrix(values, tuple(category_names))


def top_counter_categories(zeta: KnowledgeMatrix, c: int, k_e: int) -> list[int]:
    """The ``k_e`` categories most similar to ``c``; ties go to the lower index."""
    C = zeta.C
    if not 0 <= c < C:
        raise KnowledgeError(f"category {c} outside 0..{C - 1}")
    if k_e < 1 or k_e >= C:
        raise KnowledgeError(f"k_e must be in [1, {C - 1}], got {k_e}")
    others = [j for j in range(C) if j != c]
    others.sort(key=lambda j: (-zeta.values[c, j], j))
    return others[:k_e]


# -- file formats ----------------------------------------------------------


def load_attribute_labels(path) -> tuple[list[str], dict[int, AttributeLabelVector]]:
    """Read ``{category_name: [0/1, ...]}``; category ids follow file order."""
    raw = json.loads(Path(path).read_text())
    names = list(raw)
    lengths = {len(v) for v in raw.values()}
    if len(lengths) > 1:
        raise KnowledgeError(f"{path}: label vectors have differing lengths {sorted(lengths)}")
    labels = {}
    for i, name in enumerate(names):
        try:
            labels[i] = AttributeLabelVector(i, np.asarray(raw[name]))
        except KnowledgeError as exc:
            raise KnowledgeError(f"{path}: category {name!r}: {exc}") from None
    return names, labels


def load_embedding_sets(directory, category_names: Sequence[str], only=None) -> dict[int, CategoryEmbeddingSet]:
    """One matrix file per category, named ``<category>.bin`` or ``<category>.csv``."""
    sets = {}
    for i, name in enumerate(category_names):
        if only is not None and i not in only:
            continue
        try:
            path = io.find_matrix(directory, name)
        except FileNotFoundError:
            continue
        sets[i] = CategoryEmbeddingSet(i, io.read_matrix(path))
    return sets


def load_text_table(directory, num_attributes: int | None = None) -> TextEmbeddingTable:
    """Directory holding ``categories``, ``attributes`` and ``null`` matrices (rows in id order)."""
    directory = Path(directory)
    cats, attrs, null = {}, {}, None
    try:
        cats = dict(enumerate(io.read_matrix(io.find_matrix(directory, "categories"))))
    except FileNotFoundError:
        pass
    try:
        attrs = dict(enumerate(io.read_matrix(io.find_matrix(directory, "attributes"))))
    except FileNotFoundError:
        pass
    try:
        null = io.read_matrix(io.find_matrix(directory, "null"))[0]
    except FileNotFoundError:
        pass
    return TextEmbeddingTable(cats, attrs, null)


def write_matrix_csv(zeta: KnowledgeMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(zeta.category_names)
        for row in zeta.values:
            writer.writerow([repr(float(v)) for v in row])


def read_matrix_csv(path) -> KnowledgeMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise KnowledgeError(f"{path}: empty file")
    names, body = rows[0], rows[1:]
    values = np.array([[float(v) for v in row] for row in body], dtype=np.float64)
    if values.shape != (len(names), len(names)):
        raise KnowledgeError(f"{path}: expected {len(names)}x{len(names)} values, got {values.shape}")
    return KnowledgeMatrix(values, tuple(names))
