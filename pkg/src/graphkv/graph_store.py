"""Textual graphs, subgraphs, CSV ingestion and subgraph union.

Graphs are stored as two CSV blocks::

    node id,node attr
    0,"name: cords; attribute: blue"
    src,edge attr,dst
    0,to the right of,21

Edges have no explicit id; an edge is identified by its row position in the
edge file.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence, Union

from graphkv.errors import DomainError, GraphIntegrityError, GraphParseError

NODE_HEADER = ("node id", "node attr")
EDGE_HEADER = ("src", "edge attr", "dst")

ByteSource = Union[bytes, str, Path, BinaryIO]


@dataclass(frozen=True)
class Edge:
    src: int
    attr: str
    dst: int


@dataclass(frozen=True)
class TextualGraph:
    nodes: dict[int, str]
    edges: tuple[Edge, ...]
    directed: bool = True
    _adjacency: dict = field(default=None, repr=False, compare=False, hash=False)

    def __post_init__(self):
        for i, e in enumerate(self.edges):
            for end in (e.src, e.dst):
                if end not in self.nodes:
                    raise GraphIntegrityError(f"edge {i} references missing node id {end}")

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def incident(self) -> dict[int, list[tuple[int, int]]]:
        """Undirected incidence lists: node -> sorted [(neighbor, edge index)]."""
        if self._adjacency is None:
            adj: dict[int, list[tuple[int, int]]] = {n: [] for n in self.nodes}
            for i, e in enumerate(self.edges):
                adj[e.src].append((e.dst, i))
                if e.dst != e.src:
                    adj[e.dst].append((e.src, i))
            for lst in adj.values():
                lst.sort()
            object.__setattr__(self, "_adjacency", adj)
        return self._adjacency

    def full_subgraph(self) -> "Subgraph":
        return Subgraph(self, frozenset(self.nodes), frozenset(range(len(self.edges))))


@dataclass(frozen=True, eq=False)
class Subgraph:
    """A node/edge subset of a parent graph; edges are parent edge indices."""

    graph: TextualGraph = field(repr=False)
    node_ids: frozenset[int]
    edge_ids: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "node_ids", frozenset(self.node_ids))
        object.__setattr__(self, "edge_ids", frozenset(self.edge_ids))
        missing = self.node_ids - self.graph.nodes.keys()
        if missing:
            raise DomainError(f"node ids not in parent graph: {sorted(missing)}")
        for i in self.edge_ids:
            if not 0 <= i < len(self.graph.edges):
                raise DomainError(f"edge index {i} out of range")
            e = self.graph.edges[i]
            if e.src not in self.node_ids or e.dst not in self.node_ids:
                raise DomainError(f"edge {i} endpoint outside the subgraph's node set")

    def __eq__(self, other):
        if not isinstance(other, Subgraph):
            return NotImplemented
        return (
            self.graph is other.graph
            and self.node_ids == other.node_ids
            and self.edge_ids == other.edge_ids
        )

    def __hash__(self):
        return hash((id(self.graph), self.node_ids, self.edge_ids))

    def __len__(self):
        return len(self.node_ids)

    def issuperset(self, other: "Subgraph") -> bool:
        return self.node_ids >= other.node_ids and self.edge_ids >= other.edge_ids


@dataclass(frozen=True)
class QueryRecord:
    query_id: int
    question: str
    answer: str = ""

    def __post_init__(self):
        if not self.question:
            raise DomainError(f"query {self.query_id} has an empty question")


def _read_text(source: ByteSource) -> tuple[str, str]:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source).decode("utf-8"), "<bytes>"
    if isinstance(source, (str, Path)):
        return Path(source).read_bytes().decode("utf-8"), str(source)
    data = source.read()
    name = getattr(source, "name", "<stream>")
    if isinstance(data, str):
        return data, str(name)
    return data.decode("utf-8"), str(name)


def _rows(text: str, source: str, header: tuple[str, ...]):
    reader = csv.reader(io.StringIO(text))
    first = next(reader, None)
    if first is None:
        # a completely empty file is a valid empty block
        return
    if tuple(first) != header:
        raise GraphParseError(source, reader.line_num, f"expected header {','.join(header)!r}, got {','.join(first)!r}")
    for row in reader:
        if not row:
            continue
        if len(row) != len(header):
            raise GraphParseError(source, reader.line_num, f"expected {len(header)} fields, got {len(row)}")
        yield reader.line_num, row


def _int_field(value: str, source: str, line: int) -> int:
    try:
        n = int(value.strip())
    except ValueError:
        raise GraphParseError(source, line, f"node id must be an integer, got {value!r}") from None
    if n < 0:
        raise GraphParseError(source, line, f"node id must be non-negative, got {n}")
    return n


def _parse_node_rows(text: str, source: str) -> dict[int, str]:
    nodes: dict[int, str] = {}
    for line, (nid, attr) in _rows(text, source, NODE_HEADER):
        n = _int_field(nid, source, line)
        if n in nodes:
            raise GraphParseError(source, line, f"duplicate node id {n}")
        nodes[n] = attr
    return nodes


def _parse_edge_rows(text: str, source: str) -> list[tuple[int, Edge]]:
    out = []
    for line, (src, attr, dst) in _rows(text, source, EDGE_HEADER):
        out.append((line, Edge(_int_field(src, source, line), attr, _int_field(dst, source, line))))
    return out


def _build(nodes, edge_rows, source, directed):
    edges: list[Edge] = []
    seen: set[Edge] = set()
    for line, e in edge_rows:
        for end in (e.src, e.dst):
            if end not in nodes:
                raise GraphIntegrityError(f"{source}:{line}: edge references missing node id {end}")
        if e in seen:
            raise GraphIntegrityError(f"{source}:{line}: duplicate edge ({e.src}, {e.attr!r}, {e.dst})")
        seen.add(e)
        edges.append(e)
    if not directed:
        for e in list(edges):
            rev = Edge(e.dst, e.attr, e.src)
            if rev not in seen:
                seen.add(rev)
                edges.append(rev)
    return TextualGraph(nodes, tuple(edges), directed=directed)


def parse_graph_csv(node_file: ByteSource, edge_file: ByteSource, *, directed: bool = True) -> TextualGraph:
    """Parse a node CSV and an edge CSV into a graph.

    Edge row order is preserved as edge indices. With ``directed=False`` the
    reverse of every edge is appended after the original rows (unless already
    present).
    """
    node_text, node_src = _read_text(node_file)
    edge_text, edge_src = _read_text(edge_file)
    nodes = _parse_node_rows(node_text, node_src)
    return _build(nodes, _parse_edge_rows(edge_text, edge_src), edge_src, directed)


def parse_serialized(text: str, *, source: str = "<serialized>") -> TextualGraph:
    """Parse the combined node-block + edge-block text emitted by serialize_subgraph."""
    lines = text.splitlines(keepends=True)
    edge_start = next((i for i, ln in enumerate(lines) if ln.rstrip("\r\n") == ",".join(EDGE_HEADER)), None)
    if edge_start is None:
        raise GraphParseError(source, len(lines) + 1, "missing edge header")
    nodes = _parse_node_rows("".join(lines[:edge_start]), source)
    edge_rows = [(ln + edge_start, e) for ln, e in _parse_edge_rows("".join(lines[edge_start:]), source)]
    return _build(nodes, edge_rows, source, True)


def merge_subgraphs(members: Sequence[Subgraph]) -> Subgraph:
    """Union of node and edge sets of subgraphs sharing one parent graph."""
    if not members:
        raise DomainError("cannot merge an empty list of subgraphs")
    graph = members[0].graph
    if any(s.graph is not graph for s in members):
        raise DomainError("subgraphs belong to different parent graphs")
    if len(members) == 1:
        return members[0]
    nodes = frozenset().union(*(s.node_ids for s in members))
    edges = frozenset().union(*(s.edge_ids for s in members))
    return Subgraph(graph, nodes, edges)


def node_rows(s: Subgraph) -> list[str]:
    buf = io.StringIO()
    w = csv.writer(buf, quoting=csv.QUOTE_NONNUMERIC, lineterminator="\n")
    out = []
    for n in sorted(s.node_ids):
        w.writerow([n, s.graph.nodes[n]])
        out.append(buf.getvalue())
        buf.seek(0)
        buf.truncate()
    return out


def edge_rows(s: Subgraph) -> list[str]:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    out = []
    for i in sorted(s.edge_ids):
        e = s.graph.edges[i]
        w.writerow([e.src, e.attr, e.dst])
        out.append(buf.getvalue())
        buf.seek(0)
        buf.truncate()
    return out


NODE_HEADER_LINE = ",".join(NODE_HEADER) + "\n"
EDGE_HEADER_LINE = ",".join(EDGE_HEADER) + "\n"


def render_blocks(nodes: Iterable[str], edges: Iterable[str]) -> str:
    return NODE_HEADER_LINE + "".join(nodes) + EDGE_HEADER_LINE + "".join(edges)


def serialize_subgraph(s: Subgraph) -> str:
    """Node block (ascending id) then edge block (ascending edge index)."""
    return render_blocks(node_rows(s), edge_rows(s))


def load_queries(source: ByteSource) -> list[QueryRecord]:
    """Read a JSON-lines query file with fields ``id``, ``question``, ``answer``."""
    text, name = _read_text(source)
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            out.append(QueryRecord(int(obj["id"]), str(obj["question"]), str(obj.get("answer", ""))))
        except (ValueError, KeyError, TypeError) as exc:
            raise GraphParseError(name, lineno, f"bad query record: {exc}") from None
    return out


def dump_queries(queries: Iterable[QueryRecord]) -> str:
    return "".join(
        json.dumps({"id": q.query_id, "question": q.question, "answer": q.answer}) + "\n" for q in queries
    )
