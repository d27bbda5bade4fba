"""Per-category FIFO memory of ground-truth embeddings."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .kmeans import kmeans


@dataclass(frozen=True)
class PrototypeCenters:
    centers: np.ndarray  # (rows, d)
    labels: np.ndarray  # (rows,) category id per row

    def __len__(self):
        return len(self.labels)


class PrototypeBank:
    """Bounded queue of embeddings for each of ``C`` categories.

    Capacity is ``2 * k_shot`` per category; pushing onto a full queue drops
    the oldest entry. Augmented samples are never stored.
    """

    def __init__(self, C: int, d: int, k_shot: int):
        if C < 1 or d < 1 or k_shot < 1:
            raise ValueError("C, d and k_shot must be positive")
        self.C = C
        self.d = d
        self.k_shot = k_shot
        self.capacity = 2 * k_shot
        self._queues = [deque(maxlen=self.capacity) for _ in range(C)]
        self._pushed = [0] * C

    def push(self, category: int, embedding, is_augmented: bool = False) -> "PrototypeBank":
        embedding = np.asarray(embedding, dtype=np.float64)
        if embedding.shape != (self.d,):
            raise ValueError(f"embedding shape {embedding.shape} does not match ({self.d},)")
        if not 0 <= category < self.C:
            raise ValueError(f"category {category} outside 0..{self.C - 1}")
        if is_augmented:
            return self
        self._queues[category].append(embedding.copy())
        self._pushed[category] += 1
        return self

    def __len__(self):
        return sum(len(q) for q in self._queues)

    def count(self, category: int) -> int:
        return len(self._queues[category])

    def entries(self, category: int) -> np.ndarray:
        q = self._queues[category]
        return np.array(q) if q else np.empty((0, self.d))

    def raw(self) -> PrototypeCenters:
        """All stored embeddings, grouped by category (no clustering)."""
        rows, labels = [], []
        for c in range(self.C):
            for e in self._queues[c]:
                rows.append(e)
                labels.append(c)
        return PrototypeCenters(np.array(rows).reshape(-1, self.d), np.array(labels, dtype=np.int64))

    def snapshot(self) -> dict:
        """Immutable copy of queue contents keyed by category."""
        return {c: self.entries(c) for c in range(self.C) if self._queues[c]}

    def centers(self, n_k: int = 1, seed: int = 0) -> PrototypeCenters:
        """Cluster each non-empty queue into ``n_k`` centers.

        Queues holding fewer than ``n_k`` embeddings contribute their mean.
        """
        if n_k < 1:
            raise ValueError("n_k must be positive")
        rows, labels = [], []
        for c in range(self.C):
            q = self._queues[c]
            if not q:
                continue
            X = np.array(q)
            k = n_k if len(q) >= n_k else 1
            centers, _ = kmeans(X, k, seed=seed)
            rows.append(centers)
            labels.extend([c] * k)
        if not rows:
            return PrototypeCenters(np.empty((0, self.d)), np.empty(0, dtype=np.int64))
        return PrototypeCenters(np.vstack(rows), np.array(labels, dtype=np.int64))

    # -- checkpoints -------------------------------------------------------

    def dump(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        io.write_matrix(directory / "bank.bin", self.raw().centers)
        io.dump_json(
            directory / "bank.json",
            {
                "C": self.C,
                "d": self.d,
                "k_shot": self.k_shot,
                "counts": {str(c): len(q) for c, q in enumerate(self._queues)},
                "pushed": {str(c): n for c, n in enumerate(self._pushed)},
            },
        )

    @classmethod
    def restore(cls, directory) -> "PrototypeBank":
        directory = Path(directory)
        index = io.load_json(directory / "bank.json")
        bank = cls(index["C"], index["d"], index["k_shot"])
        rows = io.read_matrix(directory / "bank.bin")
        at = 0
        for c in range(bank.C):
            n = index["counts"][str(c)]
            for e in rows[at:at + n]:
                bank._queues[c].append(np.array(e))
            at += n
            bank._pushed[c] = index["pushed"][str(c)]
        return bank
