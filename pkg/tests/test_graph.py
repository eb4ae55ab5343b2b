"""Graph file parsing, adjacency construction, dataset validation."""

import numpy as np
import pytest

from kgformer.errors import GraphParseError, ValidationError
from kgformer.graph import (
    AdjacencyMatrix,
    KnowledgeGraphSpec,
    parse_graph,
    scrambled_adjacency,
    serialize_graph,
    to_adjacency,
    validate_against_dataset,
)

THREE_NODE = """\
directed true
self_loops false
node a
node b
node c
edge a -> b
edge b -> c
"""


class TestParse:
    def test_nodes_only(self):
        spec = parse_graph("node a\nnode b\nnode c\n")
        assert spec.nodes == ["a", "b", "c"]
        assert spec.edges == []
        assert spec.directed and not spec.self_loops

    def test_duplicate_edge_collapsed(self):
        spec = parse_graph("node a\nnode b\nedge a -> b\nedge a -> b\n")
        assert spec.edges == [("a", "b")]

    def test_unknown_node_names_offender_and_line(self):
        with pytest.raises(GraphParseError, match=r"line 3.*'z'"):
            parse_graph("node a\nnode b\nedge a -> z\n")

    def test_duplicate_node_rejected(self):
        with pytest.raises(GraphParseError, match="duplicate node"):
            parse_graph("node a\nnode a\n")

    def test_comments_and_blank_lines_ignored(self):
        spec = parse_graph("# hello\n\nnode a\n  # indented comment\nnode b\n")
        assert spec.nodes == ["a", "b"]

    def test_self_edge_line_rejected(self):
        with pytest.raises(GraphParseError, match="self_loops"):
            parse_graph("node a\nedge a -> a\n")

    def test_headers(self):
        spec = parse_graph("directed false\nself_loops true\nnode a\n")
        assert not spec.directed and spec.self_loops

    def test_unknown_directive(self):
        with pytest.raises(GraphParseError, match="vertex"):
            parse_graph("vertex a\n")

    def test_undirected_reverse_duplicate_collapsed(self):
        spec = parse_graph("directed false\nnode a\nnode b\nedge a -> b\nedge b -> a\n")
        assert spec.edges == [("a", "b")]


class TestRoundTrip:
    def test_parse_serialize_parse_fixed_point(self):
        spec1 = parse_graph(THREE_NODE)
        text1 = serialize_graph(spec1)
        spec2 = parse_graph(text1)
        assert spec2 == spec1
        assert serialize_graph(spec2) == text1

    def test_round_trip_on_shipped_examples(self):
        for path in ("graphs/ett.graph", "graphs/weather.graph"):
            with open(path) as fh:
                spec1 = parse_graph(fh.read())
            assert parse_graph(serialize_graph(spec1)) == spec1


class TestAdjacency:
    def test_hand_enumeration(self):
        a = to_adjacency(parse_graph(THREE_NODE))
        assert np.array_equal(a.values, [[0, 1, 0], [0, 0, 1], [0, 0, 0]])

    def test_symmetric_closure(self):
        spec = parse_graph(THREE_NODE.replace("directed true", "directed false"))
        a = to_adjacency(spec)
        assert np.array_equal(a.values, a.values.T)
        assert np.array_equal(a.values, [[0, 1, 0], [1, 0, 1], [0, 1, 0]])

    def test_empty_edges_zero_matrix(self):
        a = to_adjacency(KnowledgeGraphSpec(nodes=["a", "b"]))
        assert np.array_equal(a.values, np.zeros((2, 2)))

    def test_self_loops_fill_diagonal(self):
        spec = KnowledgeGraphSpec(nodes=["a", "b"], self_loops=True)
        assert np.array_equal(to_adjacency(spec).values, np.eye(2))

    def test_binary_and_square(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = int(rng.integers(1, 8))
            names = [f"n{i}" for i in range(n)]
            pairs = [
                (names[i], names[j])
                for i in range(n)
                for j in range(n)
                if i != j and rng.random() < 0.4
            ]
            spec = KnowledgeGraphSpec(nodes=names, edges=pairs, directed=bool(rng.random() < 0.5))
            a = to_adjacency(spec)
            assert a.values.shape == (n, n)
            assert set(np.unique(a.values)) <= {0.0, 1.0}


class TestDatasetValidation:
    def test_permutation_small_case(self):
        # brute-force check on 2x2: columns reverse the node order
        spec = KnowledgeGraphSpec(nodes=["a", "b"], edges=[("a", "b")])
        mapping, adj = validate_against_dataset(spec, ["b", "a"])
        assert mapping == [(0, "b"), (1, "a")]
        # edge a->b must now sit at [1, 0] in dataset order
        assert np.array_equal(adj.values, [[0, 0], [1, 0]])

    def test_identity_mapping(self):
        spec = parse_graph(THREE_NODE)
        mapping, adj = validate_against_dataset(spec, ["a", "b", "c"])
        assert mapping == [(0, "a"), (1, "b"), (2, "c")]
        assert np.array_equal(adj.values, to_adjacency(spec).values)

    def test_missing_column_names_node(self):
        spec = KnowledgeGraphSpec(nodes=["a", "b", "c"])
        with pytest.raises(ValidationError, match="c"):
            validate_against_dataset(spec, ["a", "b"])

    def test_extra_column_named(self):
        spec = KnowledgeGraphSpec(nodes=["a"])
        with pytest.raises(ValidationError, match="extra_col"):
            validate_against_dataset(spec, ["a", "extra_col"])

    def test_declaration_order_irrelevant_after_mapping(self):
        cols = ["x", "y", "z"]
        edges = [("x", "y"), ("z", "x")]
        spec1 = KnowledgeGraphSpec(nodes=["x", "y", "z"], edges=list(edges))
        spec2 = KnowledgeGraphSpec(nodes=["z", "x", "y"], edges=list(edges))
        _, a1 = validate_against_dataset(spec1, cols)
        _, a2 = validate_against_dataset(spec2, cols)
        assert np.array_equal(a1.values, a2.values)


class TestScrambled:
    def test_same_edge_count_same_nodes(self):
        a = to_adjacency(parse_graph(THREE_NODE))
        s = scrambled_adjacency(a, np.random.default_rng(7))
        assert s.num_edges == a.num_edges
        assert s.node_order == a.node_order
        assert np.all(np.diag(s.values) == np.diag(a.values))

    def test_deterministic_given_rng_seed(self):
        a = to_adjacency(parse_graph(THREE_NODE))
        s1 = scrambled_adjacency(a, np.random.default_rng(9))
        s2 = scrambled_adjacency(a, np.random.default_rng(9))
        assert np.array_equal(s1.values, s2.values)


class TestAdjacencyType:
    def test_rejects_non_binary(self):
        with pytest.raises(ValidationError):
            AdjacencyMatrix(values=np.full((2, 2), 0.5), node_order=["a", "b"])

    def test_rejects_wrong_shape(self):
        with pytest.raises(ValidationError):
            AdjacencyMatrix(values=np.zeros((2, 3)), node_order=["a", "b"])
