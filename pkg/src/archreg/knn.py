"""Memory saving: store perturbations for a sampled subset of sentences and
rebuild the rest from their cosine nearest neighbors in that subset."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .model import Sample

NORM_FLOOR = 1e-12


def sentence_vector(sample: Sample, W: np.ndarray) -> np.ndarray:
    """Mean of the embedding columns of the sentence's tokens."""
    return W[:, sample.tokens].mean(axis=1)


def sentence_vectors(samples: Sequence[Sample], W: np.ndarray) -> np.ndarray:
    return np.stack([sentence_vector(s, W) for s in samples])


def cosine_sim(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu <= NORM_FLOOR or nv <= NORM_FLOOR:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(np.dot(u, v) / (nu * nv))


def sample_cache_set(n: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted ids of a uniform floor(n*p)-subset of range(n)."""
    if not 0.0 < p <= 1.0:
        raise ValueError("cache proportion must lie in (0, 1]")
    size = int(np.floor(n * p))
    if size == 0:
        raise ValueError(f"floor({n} * {p}) = 0: empty cache set")
    if size == n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=size, replace=False))


@dataclass
class NeighborIndex:
    cache_set: np.ndarray
    neighbors: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self._cached = set(int(i) for i in self.cache_set)

    def is_cached(self, sample_id: int) -> bool:
        return sample_id in self._cached

    def dump(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i in sorted(self.neighbors):
                fh.write(f"{i}: {','.join(str(int(j)) for j in self.neighbors[i])}\n")


def build_neighbor_index(vectors: np.ndarray, cache_set: Sequence[int], k: int,
                         chunk: int = 256) -> NeighborIndex:
    """Exhaustive cosine top-k in the cache set for every id outside it.

    Neighbor lists are ordered by descending similarity, ties by smaller id.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    cache_set = np.sort(np.asarray(cache_set, dtype=np.int64))
    if cache_set.size == 0:
        raise ValueError("empty cache set")
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms <= NORM_FLOOR):
        raise ValueError("zero sentence vector")
    uncached = np.setdiff1d(np.arange(len(vectors)), cache_set)
    keep = min(k, cache_set.size)
    ref = vectors[cache_set]
    index = NeighborIndex(cache_set)
    for start in range(0, uncached.size, chunk):
        rows = uncached[start:start + chunk]
        # elementwise product + reduction: identical vectors get identical scores
        dots = np.sum(vectors[rows][:, None, :] * ref[None, :, :], axis=2)
        sims = dots / (norms[rows][:, None] * norms[cache_set][None, :])
        for r, i in enumerate(rows):
            # lexsort: last key primary; cache_set is sorted so ids break ties
            order = np.lexsort((cache_set, -sims[r]))
            index.neighbors[int(i)] = cache_set[order[:keep]]
    return index


def random_neighbor_index(n: int, cache_set: Sequence[int], k: int,
                          rng: np.random.Generator) -> NeighborIndex:
    """Neighbor lists drawn uniformly without replacement from the cache set."""
    if k < 1:
        raise ValueError("k must be >= 1")
    cache_set = np.sort(np.asarray(cache_set, dtype=np.int64))
    if cache_set.size == 0:
        raise ValueError("empty cache set")
    keep = min(k, cache_set.size)
    index = NeighborIndex(cache_set)
    for i in np.setdiff1d(np.arange(n), cache_set):
        index.neighbors[int(i)] = rng.choice(cache_set, size=keep, replace=False)
    return index


def construct_perturbation(sample_id: int, index: NeighborIndex,
                           cache: Mapping[int, np.ndarray] | object, length: int) -> np.ndarray:
    """Every row equals the mean over neighbors of each neighbor's row mean."""
    rows = []
    for j in index.neighbors[sample_id]:
        entry = cache.get(int(j))
        if entry is None:
            raise KeyError(f"neighbor {int(j)} of sample {sample_id} has no cached perturbation")
        rows.append(entry.mean(axis=0))
    word = np.mean(rows, axis=0)
    return np.tile(word, (length, 1))
