"""Query-to-subgraph retrieval.

Two strategies:

``node-edge-topk``
    Top-k nodes and top-k edges by cosine similarity to the query. Selected
    nodes are then joined pairwise along shortest (undirected) paths, but only
    when ``path_length * edge_cost`` does not exceed the summed similarity of
    the two endpoints. A cheap stand-in for prize-collecting Steiner trees.

``ego-topk``
    Radius-``hops`` ego networks around the ``ego_cap`` best-scoring nodes,
    ranked by the similarity of their mean node embedding to the query; the
    union of the best k is returned.

Similarity ties are broken by ascending node id / edge index.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Literal

import numpy as np

from graphkv.encoders import TextEncoder
from graphkv.errors import DomainError
from graphkv.graph_store import QueryRecord, Subgraph, TextualGraph

Strategy = Literal["node-edge-topk", "ego-topk"]

STRATEGY_ALIASES = {"g-retriever": "node-edge-topk", "grag": "ego-topk"}


@dataclass(frozen=True)
class RetrievalConfig:
    strategy: Strategy = "node-edge-topk"
    k: int = 3
    edge_cost: float = 0.5
    hops: int = 2
    ego_cap: int = 10

    def __post_init__(self):
        object.__setattr__(self, "strategy", STRATEGY_ALIASES.get(self.strategy, self.strategy))
        if self.strategy not in ("node-edge-topk", "ego-topk"):
            raise DomainError(f"unknown retrieval strategy {self.strategy!r}")
        if self.k < 1:
            raise DomainError("k must be >= 1")
        if self.hops < 1:
            raise DomainError("hops must be >= 1")
        if self.edge_cost < 0:
            raise DomainError("edge cost must be >= 0")
        if self.ego_cap < 1:
            raise DomainError("ego entity cap must be >= 1")


def _top(ids: list[int], scores: np.ndarray, k: int) -> list[int]:
    # lexsort: last key is primary; ascending id resolves ties
    order = np.lexsort((np.asarray(ids), -scores))
    return [ids[i] for i in order[:k]]


def node_scores(g: TextualGraph, q: np.ndarray, enc: TextEncoder) -> tuple[list[int], np.ndarray]:
    ids = sorted(g.nodes)
    if not ids:
        return ids, np.zeros(0)
    return ids, np.stack([enc.embed(g.nodes[n]) for n in ids]) @ q


def edge_scores(g: TextualGraph, q: np.ndarray, enc: TextEncoder) -> np.ndarray:
    if not g.edges:
        return np.zeros(0)
    return np.stack([enc.embed(e.attr) for e in g.edges]) @ q


def shortest_path(g: TextualGraph, source: int, target: int) -> list[int] | None:
    """Edge indices along a BFS shortest path, ignoring edge direction.

    Neighbors are expanded in (neighbor id, edge index) order so the path is
    deterministic.
    """
    if source == target:
        return []
    adj = g.incident()
    parent: dict[int, tuple[int, int]] = {source: (-1, -1)}
    frontier = deque([source])
    while frontier:
        u = frontier.popleft()
        for v, ei in adj[u]:
            if v in parent:
                continue
            parent[v] = (u, ei)
            if v == target:
                path = []
                while v != source:
                    v, ei = parent[v]
                    path.append(ei)
                return path[::-1]
            frontier.append(v)
    return None


def _node_edge_topk(cfg: RetrievalConfig, g: TextualGraph, q: np.ndarray, enc: TextEncoder) -> Subgraph:
    ids, ns = node_scores(g, q, enc)
    sim = dict(zip(ids, ns))
    nodes = set(_top(ids, ns, cfg.k))
    edges: set[int] = set()
    if g.edges:
        es = edge_scores(g, q, enc)
        for ei in _top(list(range(len(g.edges))), es, cfg.k):
            edges.add(ei)
            nodes.update((g.edges[ei].src, g.edges[ei].dst))

    selected = sorted(nodes)
    for a_pos, a in enumerate(selected):
        for b in selected[a_pos + 1:]:
            gain = sim[a] + sim[b]
            path = shortest_path(g, a, b)
            if not path or len(path) * cfg.edge_cost > gain:
                continue
            for ei in path:
                edges.add(ei)
                nodes.update((g.edges[ei].src, g.edges[ei].dst))
    return Subgraph(g, frozenset(nodes), frozenset(edges))


def ego_network(g: TextualGraph, center: int, hops: int) -> Subgraph:
    """Nodes within ``hops`` (undirected) of ``center`` and the edges they induce."""
    adj = g.incident()
    dist = {center: 0}
    frontier = deque([center])
    while frontier:
        u = frontier.popleft()
        if dist[u] == hops:
            continue
        for v, _ in adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                frontier.append(v)
    members = frozenset(dist)
    edges = frozenset(i for i, e in enumerate(g.edges) if e.src in members and e.dst in members)
    return Subgraph(g, members, edges)


def _ego_topk(cfg: RetrievalConfig, g: TextualGraph, q: np.ndarray, enc: TextEncoder) -> Subgraph:
    ids, ns = node_scores(g, q, enc)
    centers = _top(ids, ns, cfg.ego_cap)
    egos = [ego_network(g, c, cfg.hops) for c in centers]
    scores = []
    for ego in egos:
        pooled = np.stack([enc.embed(g.nodes[n]) for n in sorted(ego.node_ids)]).mean(axis=0)
        norm = np.linalg.norm(pooled)
        scores.append(float(pooled @ q / norm) if norm > 0 else 0.0)
    # equal-scoring egos keep their center's rank order
    best = _top(list(range(len(egos))), np.asarray(scores), cfg.k)
    chosen = [egos[i] for i in best]
    return Subgraph(
        g,
        frozenset().union(*(e.node_ids for e in chosen)),
        frozenset().union(*(e.edge_ids for e in chosen)),
    )


def retrieve(cfg: RetrievalConfig, g: TextualGraph, q: QueryRecord, enc: TextEncoder) -> Subgraph:
    """Retrieve the query-relevant subgraph of ``g`` for query ``q``."""
    if g.num_nodes == 0:
        raise DomainError("cannot retrieve from a graph with no nodes")
    qv = enc.embed(q.question)
    if cfg.strategy == "node-edge-topk":
        return _node_edge_topk(cfg, g, qv, enc)
    return _ego_topk(cfg, g, qv, enc)
