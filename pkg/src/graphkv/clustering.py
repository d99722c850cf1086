"""Agglomerative hierarchical clustering cut at a fixed cluster count.

All linkages share one Lance-Williams update path over a dense distance
matrix. Ward and centroid work on squared Euclidean distances; the others on
plain Euclidean distances.

Cluster slots are indexed by their smallest member, so the first minimum of the
upper triangle in row-major order is exactly the pair with the smallest
``(min member of left, min member of right)`` among ties.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from graphkv.errors import DomainError

Linkage = Literal["ward", "single", "average", "complete", "centroid"]
LINKAGES: tuple[str, ...] = ("ward", "single", "average", "complete", "centroid")
MONOTONE_LINKAGES: tuple[str, ...] = ("ward", "single", "average", "complete")

_SQUARED = {"ward", "centroid"}


@dataclass(frozen=True)
class ClusterConfig:
    linkage: Linkage = "ward"
    clusters: int = 1

    def __post_init__(self):
        if self.linkage not in LINKAGES:
            raise DomainError(f"unknown linkage {self.linkage!r}; expected one of {LINKAGES}")
        if self.clusters < 1:
            raise DomainError("cluster count must be >= 1")


@dataclass
class Merge:
    left: tuple[int, ...]
    right: tuple[int, ...]
    distance: float


@dataclass
class ClusterAssignment:
    labels: list[int]
    merges: list[Merge] = field(default_factory=list)
    op_count: int = 0

    @property
    def num_clusters(self) -> int:
        return len(set(self.labels))

    def members(self) -> list[list[int]]:
        groups: list[list[int]] = [[] for _ in range(self.num_clusters)]
        for i, lab in enumerate(self.labels):
            groups[lab].append(i)
        return groups

    def partition(self) -> frozenset[frozenset[int]]:
        return frozenset(frozenset(g) for g in self.members())

    def trace_json(self) -> list[dict]:
        return [{"left": list(m.left), "right": list(m.right), "distance": m.distance} for m in self.merges]


def _as_matrix(embs: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    if len(embs) == 0:
        raise DomainError("need at least one embedding")
    dims = {np.shape(e) for e in embs}
    if len(dims) != 1:
        raise DomainError(f"embedding dimension mismatch: {sorted(dims)}")
    x = np.asarray(embs, dtype=float)
    if x.ndim != 2:
        raise DomainError("embeddings must be 1-D vectors")
    return x


def pairwise_distances(embs: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    """Symmetric Euclidean distance matrix with an exact zero diagonal."""
    x = _as_matrix(embs)
    diff = x[:, None, :] - x[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    d = np.minimum(d, d.T)
    np.fill_diagonal(d, 0.0)
    return d


def labels_from_groups(groups: Sequence[Sequence[int]], m: int) -> list[int]:
    """Label clusters 0..c-1 in order of their smallest member."""
    labels = [-1] * m
    for lab, g in enumerate(sorted(groups, key=min)):
        for i in g:
            labels[i] = lab
    return labels


def _lance_williams(linkage: str, d_ki, d_kj, d_ij, n_i, n_j, n_k):
    if linkage == "single":
        return np.minimum(d_ki, d_kj)
    if linkage == "complete":
        return np.maximum(d_ki, d_kj)
    if linkage == "average":
        return (n_i * d_ki + n_j * d_kj) / (n_i + n_j)
    if linkage == "centroid":
        n = n_i + n_j
        return (n_i * d_ki + n_j * d_kj) / n - (n_i * n_j) * d_ij / (n * n)
    # ward
    t = n_i + n_j + n_k
    return ((n_i + n_k) * d_ki + (n_j + n_k) * d_kj - n_k * d_ij) / t


def _report(linkage: str, d: float) -> float:
    if linkage == "ward":
        # squared-distance Ward recurrence carries twice the variance increase
        return d / 2.0
    if linkage == "centroid":
        return float(np.sqrt(max(d, 0.0)))
    return d


def agglomerate(embs: Sequence[np.ndarray] | np.ndarray, cfg: ClusterConfig) -> ClusterAssignment:
    """Merge closest clusters until ``cfg.clusters`` remain.

    Reported merge distances: Euclidean for single/complete/average, centroid
    distance for centroid, and the within-cluster sum-of-squares increase for
    Ward.
    """
    x = _as_matrix(embs)
    m = len(x)
    c = cfg.clusters
    if c > m:
        raise DomainError(f"cluster count {c} exceeds number of items {m}")

    d = pairwise_distances(x)
    if cfg.linkage in _SQUARED:
        d = d * d
    ops = m * m * x.shape[1]

    active = np.ones(m, dtype=bool)
    sizes = np.ones(m)
    members: list[list[int]] = [[i] for i in range(m)]
    work = d.copy()
    work[np.tril_indices(m)] = np.inf
    merges: list[Merge] = []

    for _ in range(m - c):
        flat = int(np.argmin(work))
        i, j = divmod(flat, m)
        dist = float(work[i, j])
        merges.append(Merge(tuple(members[i]), tuple(members[j]), _report(cfg.linkage, dist)))

        others = np.flatnonzero(active)
        others = others[(others != i) & (others != j)]
        new = _lance_williams(cfg.linkage, d[others, i], d[others, j], d[i, j], sizes[i], sizes[j], sizes[others])
        d[others, i] = new
        d[i, others] = new
        ops += m * m + len(others)

        # slot i keeps the smaller min-member; slot j is retired
        active[j] = False
        sizes[i] += sizes[j]
        members[i] = sorted(members[i] + members[j])
        members[j] = []
        work[j, :] = np.inf
        work[:, j] = np.inf
        lo = others[others < i]
        hi = others[others > i]
        work[lo, i] = new[others < i]
        work[i, hi] = new[others > i]

    groups = [members[i] for i in np.flatnonzero(active)]
    return ClusterAssignment(labels_from_groups(groups, m), merges, ops)
