"""Answer clustering and the frequency / normalized-entropy confidence scores."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .trajectory import AnswerSample, normalize_answer

MODES = ("auto", "embedding", "exact-match")

# merge candidates whose average similarity differs by less than this are ties
_TIE_EPS = 1e-12


@dataclass(frozen=True)
class ClusteringConfig:
    similarity_threshold: float = 0.9
    eta: float = 0.1
    mode: str = "auto"

    def __post_init__(self) -> None:
        if not 0.0 < self.similarity_threshold < 1.0:
            raise ValueError(
                f"similarity_threshold must lie strictly in (0, 1), got {self.similarity_threshold}"
            )
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class Cluster:
    representative: str
    members: tuple[int, ...]
    frequency: float
    penalized_confidence: float
    embedding: tuple[float, ...] | None = None


def normalized_entropy(clusters: Iterable[Cluster | float], m: int) -> float:
    """Entropy of the cluster frequency distribution divided by ``log m``.

    Accepts clusters or bare frequencies. 0 means all mass on one cluster,
    1 means ``m`` singletons.
    """
    if m < 2:
        raise ValueError(f"normalized entropy needs at least 2 samples, got M={m}")
    h = 0.0
    for c in clusters:
        f = c.frequency if isinstance(c, Cluster) else float(c)
        if f > 0.0:
            h -= f * math.log(f)
    return h / math.log(m)


def penalized_confidence(frequency: float, ne: float, eta: float) -> float:
    return frequency - eta * ne


def _group_exact(samples: Sequence[AnswerSample]) -> list[list[int]]:
    groups: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(normalize_answer(s.text), []).append(i)
    return list(groups.values())


def average_linkage(vectors: np.ndarray, threshold: float) -> list[list[int]]:
    """Agglomerative clustering on cosine similarity with average linkage.

    Merges the most similar pair of clusters until the best average
    similarity drops below ``threshold``. Clusters are identified by their
    smallest member index and ties go to the lexicographically smallest
    pair of identifiers. Returns member index lists.
    """
    x = np.asarray(vectors, dtype=float)
    n = x.shape[0]
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ValueError("cannot cluster zero-norm embeddings")
    x = x / norms[:, None]

    # points with the same direction have similarity 1 and would merge first
    # anyway; collapse them up front and carry their counts as weights
    _, first, inverse = np.unique(np.round(x, 12), axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    group_of = rank[inverse]
    members: list[list[int]] = [[] for _ in range(len(order))]
    for i in range(n):
        members[group_of[i]].append(i)
    reps = x[first[order]]

    k = len(members)
    sizes = np.array([len(m) for m in members], dtype=float)
    sim = reps @ reps.T
    np.fill_diagonal(sim, -np.inf)
    alive = np.ones(k, dtype=bool)
    upper = np.triu(np.ones((k, k), dtype=bool), 1)
    while alive.sum() > 1:
        masked = np.where(upper & alive[:, None] & alive[None, :], sim, -np.inf)
        best = masked.max()
        if best < threshold:
            break
        flat = np.flatnonzero(masked >= best - _TIE_EPS)[0]
        i, j = divmod(int(flat), k)
        merged = (sizes[i] * sim[i] + sizes[j] * sim[j]) / (sizes[i] + sizes[j])
        sim[i, :] = merged
        sim[:, i] = merged
        sim[i, i] = -np.inf
        sizes[i] += sizes[j]
        members[i].extend(members[j])
        alive[j] = False
    return [sorted(members[i]) for i in range(k) if alive[i]]


def resolve_mode(samples: Sequence[AnswerSample], config: ClusteringConfig) -> str:
    if config.mode != "auto":
        return config.mode
    return "embedding" if all(s.embedding is not None for s in samples) else "exact-match"


def cluster_answers(samples: Sequence[AnswerSample], config: ClusteringConfig) -> list[Cluster]:
    """Cluster one turn's samples, ordered by descending frequency then representative."""
    if not samples:
        raise ValueError("cannot cluster an empty sample list")
    mode = resolve_mode(samples, config)
    if mode == "embedding":
        if any(s.embedding is None for s in samples):
            raise ValueError("embedding mode requires an embedding on every sample")
        groups = average_linkage(
            np.array([s.embedding for s in samples], dtype=float), config.similarity_threshold
        )
    else:
        groups = _group_exact(samples)

    m = len(samples)
    freqs = [len(g) / m for g in groups]
    ne = normalized_entropy(freqs, m) if m >= 2 else 0.0
    clusters = [
        Cluster(
            representative=samples[g[0]].text,
            members=tuple(g),
            frequency=f,
            penalized_confidence=penalized_confidence(f, ne, config.eta),
            embedding=samples[g[0]].embedding,
        )
        for g, f in zip(groups, freqs)
    ]
    clusters.sort(key=lambda c: (-c.frequency, c.representative, c.members[0]))
    return clusters


def equivalent(a: Cluster, b: Cluster, config: ClusteringConfig) -> bool:
    """Whether two clusters (possibly from different turns) denote the same answer."""
    if normalize_answer(a.representative) == normalize_answer(b.representative):
        return True
    if config.mode == "exact-match" or a.embedding is None or b.embedding is None:
        return False
    va = np.asarray(a.embedding, dtype=float)
    vb = np.asarray(b.embedding, dtype=float)
    cos = float(va @ vb / (np.linalg.norm(va) * np.linalg.norm(vb)))
    return cos >= config.similarity_threshold
