"""Bundled and synthetic datasets.

``scene_graph`` is the small image scene graph shipped with the package.
``scene_graph_queries`` generates templated attribute/relation questions over
it. ``collapse_batch`` builds a graph of disjoint topic components whose
queries all retrieve (nearly) the same component, so a batch collapses onto
one representative prompt per topic.
"""

from __future__ import annotations

import hashlib
import random
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from graphkv.graph_store import (
    Edge,
    QueryRecord,
    TextualGraph,
    dump_queries,
    load_queries,
    parse_graph_csv,
    serialize_subgraph,
)


@dataclass
class Dataset:
    graph: TextualGraph
    queries: list[QueryRecord]
    digest: str
    name: str = ""

    @classmethod
    def from_files(cls, nodes: Path | str, edges: Path | str, queries: Path | str, *, directed: bool = True) -> "Dataset":
        paths = Path(nodes), Path(edges), Path(queries)
        # parse from the paths so diagnostics name the offending file
        graph = parse_graph_csv(paths[0], paths[1], directed=directed)
        digest = _digest(*(p.read_bytes() for p in paths))
        return cls(graph, load_queries(paths[2]), digest, name=str(queries))

    @classmethod
    def in_memory(cls, graph: TextualGraph, queries: Sequence[QueryRecord], name: str = "") -> "Dataset":
        block = serialize_subgraph(graph.full_subgraph()).encode()
        return cls(graph, list(queries), _digest(block, dump_queries(queries).encode()), name=name)

    def write(self, directory: Path | str, stem: str) -> tuple[Path, Path, Path]:
        """Write ``<stem>_nodes.csv``, ``<stem>_edges.csv`` and ``<stem>_queries.jsonl``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        block = serialize_subgraph(self.graph.full_subgraph())
        node_part, edge_part = block.split("src,edge attr,dst\n", 1)
        paths = (d / f"{stem}_nodes.csv", d / f"{stem}_edges.csv", d / f"{stem}_queries.jsonl")
        paths[0].write_text(node_part)
        paths[1].write_text("src,edge attr,dst\n" + edge_part)
        paths[2].write_text(dump_queries(self.queries))
        return paths


def _digest(*parts: bytes) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(len(p).to_bytes(8, "little"))
        h.update(p)
    return h.hexdigest()[:16]


def _data_bytes(name: str) -> bytes:
    return resources.files("graphkv").joinpath("data", name).read_bytes()


def scene_graph_files() -> tuple[bytes, bytes, bytes]:
    return (
        _data_bytes("scene_graph_nodes.csv"),
        _data_bytes("scene_graph_edges.csv"),
        _data_bytes("scene_graph_queries.jsonl"),
    )


def scene_graph() -> TextualGraph:
    nodes, edges, _ = scene_graph_files()
    return parse_graph_csv(nodes, edges)


_ATTR_RE = re.compile(r"attribute: ([^;]+)")


def _name(attr: str) -> str:
    return attr.split(";", 1)[0].removeprefix("name: ")


def scene_graph_queries(g: TextualGraph, m: int, seed: int = 0) -> list[QueryRecord]:
    """``m`` templated questions: attribute lookups and relation lookups."""
    pool: list[tuple[str, str]] = []
    for n in sorted(g.nodes):
        attr = g.nodes[n]
        hit = _ATTR_RE.search(attr)
        if hit:
            value = hit.group(1).split(",")[0].strip()
            pool.append((f"What is the color of the {_name(attr)}?", value))
    for e in g.edges:
        a, b = _name(g.nodes[e.src]), _name(g.nodes[e.dst])
        pool.append((f"How is the {a} positioned relative to the {b}?", e.attr))
    rng = random.Random(seed)
    out = []
    while len(out) < m:
        batch = pool[:]
        rng.shuffle(batch)
        out.extend(batch)
    return [QueryRecord(i, q, a) for i, (q, a) in enumerate(out[:m])]


_TOPICS = ("amber", "cobalt", "sienna", "teal", "olive", "indigo", "coral", "slate")
_VALUES = ("north", "south", "east", "west", "upper", "lower", "inner", "outer", "front", "rear")
_FILLER = "recorded during the survey and checked against the archive"


def collapse_batch(
    m: int = 100,
    groups: int = 2,
    nodes_per_group: int = 4,
    seed: int = 0,
) -> Dataset:
    """Disjoint topic components; each query asks about one node of one topic.

    Queries are short (``"<topic> n<j>?"``) and every node text repeats its
    topic word, so retrieval stays inside the query's component.
    """
    if groups > len(_TOPICS):
        raise ValueError(f"at most {len(_TOPICS)} groups supported")
    rng = random.Random(seed)
    nodes: dict[int, str] = {}
    edges: list[Edge] = []
    answers: dict[tuple[int, int], str] = {}
    for gi in range(groups):
        topic = _TOPICS[gi]
        base = gi * nodes_per_group
        for j in range(nodes_per_group):
            value = rng.choice(_VALUES)
            answers[gi, j] = value
            nodes[base + j] = f"name: {topic} n{j}; value: {value}; notes: {topic} {topic} {_FILLER}"
        for j in range(nodes_per_group - 1):
            edges.append(Edge(base + j, f"{topic} link", base + j + 1))
        if nodes_per_group > 2:
            edges.append(Edge(base + nodes_per_group - 1, f"{topic} loop", base))
    graph = TextualGraph(nodes, tuple(edges))
    queries = []
    for i in range(m):
        gi = i * groups // m
        j = rng.randrange(nodes_per_group)
        queries.append(QueryRecord(i, f"{_TOPICS[gi]} n{j}?", answers[gi, j]))
    order = list(range(m))
    rng.shuffle(order)
    shuffled = [QueryRecord(new_id, queries[old].question, queries[old].answer) for new_id, old in enumerate(order)]
    return Dataset.in_memory(graph, shuffled, name=f"collapse-{groups}x{m}")


def scene_graph_batch(m: int = 100, seed: int = 0, graph: Optional[TextualGraph] = None) -> Dataset:
    g = graph or scene_graph()
    return Dataset.in_memory(g, scene_graph_queries(g, m, seed), name=f"scene-graph-{m}")
