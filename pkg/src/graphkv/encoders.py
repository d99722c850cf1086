"""Deterministic text embeddings and a frozen message-passing subgraph encoder."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from graphkv.errors import DomainError
from graphkv.graph_store import Subgraph

_TOKEN_RE = re.compile(r"\w+", re.UNICODE)

STOPWORDS = frozenset(
    "a an and are as at be by does for from how in is it of on or the this to what which who whom with".split()
)


def text_tokens(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def feature_tokens(text: str) -> list[str]:
    """Lowercased word tokens minus stopwords, pure numbers and single characters."""
    return [w for w in text_tokens(text) if len(w) > 1 and not w.isdigit() and w not in STOPWORDS]


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


@dataclass(frozen=True, eq=False)
class TextEncoder:
    """Salted feature hashing followed by a seeded random projection to ``dim``.

    Each content token (see ``feature_tokens``) is hashed with a salted
    blake2b; the hash seeds a Gaussian column, i.e. the column of a random
    projection from the full 64-bit bucket space. A text is the normalized
    sum of its token columns, so texts sharing tokens are close while
    distinct tokens are nearly orthogonal instead of colliding outright as
    they would in ``dim`` plain buckets.
    """

    dim: int = 64
    seed: int = 0
    salt: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise DomainError("embedding dim must be positive")
        object.__setattr__(self, "_token_cache", lru_cache(maxsize=65536)(self._token_uncached))
        object.__setattr__(self, "_cache", lru_cache(maxsize=65536)(self._embed_uncached))

    def token_hash(self, token: str) -> int:
        h = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=self.salt.to_bytes(8, "little", signed=True))
        return int.from_bytes(h.digest(), "little")

    def _token_uncached(self, token: str) -> np.ndarray:
        col = np.random.default_rng([self.token_hash(token), self.seed]).standard_normal(self.dim)
        col.setflags(write=False)
        return col

    def token_vector(self, token: str) -> np.ndarray:
        return self._token_cache(token)

    def _embed_uncached(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim)
        for tok in feature_tokens(text):
            v += self.token_vector(tok)
        n = np.linalg.norm(v)
        if n > 0:
            v = v / n
        v.setflags(write=False)
        return v

    def embed(self, text: str) -> np.ndarray:
        return self._cache(text)


def embed_text(enc: TextEncoder, text: str) -> np.ndarray:
    """Unit-norm embedding of ``text`` (zero vector if it has no tokens)."""
    return enc.embed(text)


@dataclass(frozen=True, eq=False)
class GnnEncoder:
    """Frozen, seeded mean-aggregation GNN with per-layer multi-head linear maps.

    Each layer: ``h <- mean_over_heads(tanh(W_head @ (h + mean(incoming messages))))``
    where a message along an edge is the neighbor state scaled elementwise by
    the edge-text embedding. Edges carry messages in both directions.
    """

    dim: int = 64
    layers: int = 4
    heads: int = 4
    seed: int = 0
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.layers < 0 or self.heads < 1:
            raise DomainError("layers must be >= 0 and heads >= 1")
        rng = np.random.default_rng([self.seed, 0x6E6E])
        w = rng.standard_normal((self.layers, self.heads, self.dim, self.dim)) / np.sqrt(self.dim)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def node_update(self, layer: int, x: np.ndarray) -> np.ndarray:
        """Per-node transform of one layer applied to aggregated states ``x`` (n, dim)."""
        return np.tanh(np.einsum("hij,nj->hni", self.weights[layer], x)).mean(axis=0)

    def op_count(self, num_nodes: int, num_edges: int) -> int:
        """Multiply-accumulate count of one forward pass (cost proxy)."""
        per_layer = self.heads * num_nodes * self.dim * self.dim + 4 * num_edges * self.dim + num_nodes * self.dim
        return self.layers * per_layer + num_nodes * self.dim


def encode_subgraph(gnn: GnnEncoder, enc: TextEncoder, s: Subgraph) -> np.ndarray:
    """Pool a subgraph into one unit-norm embedding."""
    if len(s.node_ids) == 0:
        raise DomainError("cannot encode an empty subgraph")
    if gnn.dim != enc.dim:
        raise DomainError(f"GNN dim {gnn.dim} != text encoder dim {enc.dim}")
    g = s.graph
    order = sorted(s.node_ids)
    index = {n: i for i, n in enumerate(order)}
    h = np.stack([enc.embed(g.nodes[n]) for n in order])

    edges = [g.edges[i] for i in sorted(s.edge_ids)]
    if edges:
        src = np.array([index[e.src] for e in edges] + [index[e.dst] for e in edges])
        dst = np.array([index[e.dst] for e in edges] + [index[e.src] for e in edges])
        mod = np.stack([enc.embed(e.attr) for e in edges]) * np.sqrt(enc.dim)
        mod = np.concatenate([mod, mod])
        deg = np.bincount(dst, minlength=len(order)).astype(float)
        deg[deg == 0] = 1.0

    for layer in range(gnn.layers):
        x = h
        if edges:
            agg = np.zeros_like(h)
            np.add.at(agg, dst, h[src] * mod)
            x = h + agg / deg[:, None]
        h = gnn.node_update(layer, x)

    pooled = h.mean(axis=0)
    n = np.linalg.norm(pooled)
    return pooled / n if n > 0 else pooled
