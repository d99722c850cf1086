import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphkv.datasets import scene_graph_files
from graphkv.errors import DomainError, GraphIntegrityError, GraphParseError
from graphkv.graph_store import (
    Edge,
    QueryRecord,
    Subgraph,
    TextualGraph,
    dump_queries,
    load_queries,
    merge_subgraphs,
    parse_graph_csv,
    parse_serialized,
    serialize_subgraph,
)

NODES = b"node id,node attr\n"
EDGES = b"src,edge attr,dst\n"


def test_table5_node_row():
    row = b'0,"name: eye glasses; attribute: black; (x,y,w,h): (330, 125, 25, 7)"\n'
    g = parse_graph_csv(NODES + row + b'21,"name: man"\n', EDGES)
    assert g.nodes[0] == "name: eye glasses; attribute: black; (x,y,w,h): (330, 125, 25, 7)"


def test_table5_edge_row():
    g = parse_graph_csv(NODES + b"0,a\n21,b\n", EDGES + b"0,to the right of,21\n")
    assert g.edges == (Edge(0, "to the right of", 21),)


def test_empty_edge_file():
    g = parse_graph_csv(NODES + b"0,x\n", b"")
    assert g.num_nodes == 1 and g.num_edges == 0


def test_bundled_table5_listing(table5):
    assert table5.num_nodes == 22
    assert table5.nodes[2] == "name: cords; attribute: blue; (x,y,w,h): (0, 182, 110, 109)"
    assert table5.edges[0] == Edge(0, "to the right of", 21)


def test_table5_round_trip(table5):
    text = serialize_subgraph(table5.full_subgraph())
    again = parse_serialized(text)
    assert again == table5
    assert serialize_subgraph(again.full_subgraph()) == text


def test_round_trip_through_files():
    nodes, edges, _ = scene_graph_files()
    g = parse_graph_csv(io.BytesIO(nodes), io.BytesIO(edges))
    assert parse_serialized(serialize_subgraph(g.full_subgraph())) == g


def test_wrong_arity_reports_line():
    with pytest.raises(GraphParseError) as err:
        parse_graph_csv(NODES + b"0,a\n1,b,extra\n", b"")
    assert err.value.line == 3


def test_bad_header():
    with pytest.raises(GraphParseError):
        parse_graph_csv(b"id,attr\n0,a\n", b"")


def test_non_integer_id():
    with pytest.raises(GraphParseError):
        parse_graph_csv(NODES + b"zero,a\n", b"")


def test_dangling_edge_names_node():
    with pytest.raises(GraphIntegrityError, match="7"):
        parse_graph_csv(NODES + b"0,a\n", EDGES + b"0,r,7\n")


def test_duplicate_triple_rejected():
    with pytest.raises(GraphIntegrityError):
        parse_graph_csv(NODES + b"0,a\n1,b\n", EDGES + b"0,r,1\n0,r,1\n")


def test_quoted_fields_keep_commas():
    g = parse_graph_csv(NODES + b'0,"a, b; c"\n1,d\n', EDGES + b'0,"left, of",1\n')
    assert g.nodes[0] == "a, b; c" and g.edges[0].attr == "left, of"


def test_undirected_symmetrizes():
    g = parse_graph_csv(NODES + b"0,a\n1,b\n", EDGES + b"0,r,1\n", directed=False)
    assert set(g.edges) == {Edge(0, "r", 1), Edge(1, "r", 0)}


def test_serialize_empty_subgraph(table5):
    assert serialize_subgraph(Subgraph(table5, frozenset(), frozenset())) == "node id,node attr\nsrc,edge attr,dst\n"


def test_serialize_single_node():
    g = TextualGraph({5: "name: cup"}, ())
    assert serialize_subgraph(g.full_subgraph()) == 'node id,node attr\n5,"name: cup"\nsrc,edge attr,dst\n'


def test_serialization_is_order_free(table5):
    a = Subgraph(table5, frozenset([21, 0, 4]), frozenset([1, 0]))
    b = Subgraph(table5, frozenset([0, 4, 21]), frozenset([0, 1]))
    assert serialize_subgraph(a) == serialize_subgraph(b)


def test_subgraph_closure_enforced(table5):
    with pytest.raises(DomainError):
        Subgraph(table5, frozenset([0]), frozenset([0]))


def test_merge_identity_and_idempotence(table5):
    s = Subgraph(table5, frozenset([0, 21]), frozenset([0]))
    assert merge_subgraphs([s]) == s
    assert merge_subgraphs([s, s]) == s


def test_merge_chain():
    g = TextualGraph({0: "A", 1: "B", 2: "C"}, (Edge(0, "ab", 1), Edge(1, "bc", 2)))
    ab = Subgraph(g, frozenset([0, 1]), frozenset([0]))
    bc = Subgraph(g, frozenset([1, 2]), frozenset([1]))
    assert merge_subgraphs([ab, bc]) == Subgraph(g, frozenset([0, 1, 2]), frozenset([0, 1]))


def test_merge_errors(table5):
    with pytest.raises(DomainError):
        merge_subgraphs([])
    other = TextualGraph(dict(table5.nodes), table5.edges)
    with pytest.raises(DomainError):
        merge_subgraphs([table5.full_subgraph(), other.full_subgraph()])


def test_queries_round_trip():
    qs = [QueryRecord(0, "What is the color of the cords?", "blue"), QueryRecord(3, "Q, \"quoted\"", "")]
    assert load_queries(dump_queries(qs).encode()) == qs


def test_bad_query_line():
    with pytest.raises(GraphParseError):
        load_queries(b'{"id": 1}\n')


def test_empty_question_rejected():
    with pytest.raises(DomainError):
        QueryRecord(0, "")


# --- union algebra over random families ----------------------------------------------


@st.composite
def families(draw):
    n = draw(st.integers(1, 12))
    pairs = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=20, unique=True))
    g = TextualGraph({i: f"node {i}" for i in range(n)}, tuple(Edge(a, "r", b) for a, b in pairs))
    members = []
    for _ in range(draw(st.integers(1, 5))):
        nodes = frozenset(draw(st.sets(st.integers(0, n - 1))))
        edges = frozenset(i for i, e in enumerate(g.edges) if e.src in nodes and e.dst in nodes and draw(st.booleans()))
        members.append(Subgraph(g, nodes, edges))
    return members


@settings(max_examples=300, deadline=None)
@given(families(), st.randoms(use_true_random=False))
def test_union_algebra_properties(members, rnd):
    merged = merge_subgraphs(members)
    shuffled = members[:]
    rnd.shuffle(shuffled)
    assert merge_subgraphs(shuffled) == merged
    assert merge_subgraphs(members + members) == merged
    assert merge_subgraphs([merged, merged]) == merged
    split = rnd.randrange(len(members) + 1)
    left, right = members[:split], members[split:]
    if left and right:
        assert merge_subgraphs([merge_subgraphs(left), merge_subgraphs(right)]) == merged
    assert all(merged.issuperset(s) for s in members)
