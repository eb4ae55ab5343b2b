"""Conceptual knowledge graphs over dataset variables.

A graph file declares one node per dataset channel and the conceptual edges
between them; ``to_adjacency`` turns it into the binary matrix consumed by
the graph-embedding layer. The file format (see ``parse_graph``) is plain
UTF-8 text so domain experts can review and edit the relations directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GraphParseError, ValidationError


@dataclass
class KnowledgeGraphSpec:
    """Named variable nodes plus directed conceptual edges."""

    nodes: list[str]
    edges: list[tuple[str, str]] = field(default_factory=list)
    directed: bool = True
    self_loops: bool = False

    def __post_init__(self):
        if len(set(self.nodes)) != len(self.nodes):
            dupes = sorted({n for n in self.nodes if self.nodes.count(n) > 1})
            raise GraphParseError(f"duplicate node declaration: {', '.join(dupes)}")
        known = set(self.nodes)
        for src, dst in self.edges:
            if src not in known:
                raise GraphParseError(f"edge references unknown node '{src}'")
            if dst not in known:
                raise GraphParseError(f"edge references unknown node '{dst}'")
        self.edges = _normalize_edges(self.edges, self.directed)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)


@dataclass
class AdjacencyMatrix:
    """Binary V x V edge-presence matrix in a fixed node order."""

    values: np.ndarray
    node_order: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        v = len(self.node_order)
        if self.values.shape != (v, v):
            raise ValidationError(
                f"adjacency shape {self.values.shape} does not match {v} nodes"
            )
        if not np.isin(self.values, (0.0, 1.0)).all():
            raise ValidationError("adjacency entries must be 0 or 1")

    @property
    def num_nodes(self) -> int:
        return len(self.node_order)

    @property
    def num_edges(self) -> int:
        off_diag = self.values.copy()
        np.fill_diagonal(off_diag, 0.0)
        return int(off_diag.sum())


def _normalize_edges(
    edges: list[tuple[str, str]], directed: bool
) -> list[tuple[str, str]]:
    """Drop duplicate edges (and reversed duplicates when undirected)."""
    seen: set[tuple[str, str]] = set()
    out: list[tuple[str, str]] = []
    for src, dst in edges:
        key = (src, dst)
        if not directed and (dst, src) in seen:
            continue
        if key in seen:
            continue
        seen.add(key)
        out.append(key)
    return out


def parse_graph(text: str) -> KnowledgeGraphSpec:
    """Parse the graph file format.

    Lines: ``# comment``, ``directed true|false``, ``self_loops true|false``,
    ``node <name>``, ``edge <src> -> <dst>``. Headers are optional and
    default to directed without self-loops. Node names may contain any
    non-whitespace characters.
    """
    nodes: list[str] = []
    node_set: set[str] = set()
    edges: list[tuple[str, str]] = []
    directed = True
    self_loops = False

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        keyword = parts[0]
        if keyword == "directed":
            directed = _parse_bool(parts, lineno)
        elif keyword == "self_loops":
            self_loops = _parse_bool(parts, lineno)
        elif keyword == "node":
            if len(parts) != 2:
                raise GraphParseError("expected 'node <name>'", lineno)
            name = parts[1]
            if name in node_set:
                raise GraphParseError(f"duplicate node declaration '{name}'", lineno)
            node_set.add(name)
            nodes.append(name)
        elif keyword == "edge":
            if len(parts) != 4 or parts[2] != "->":
                raise GraphParseError("expected 'edge <src> -> <dst>'", lineno)
            src, dst = parts[1], parts[3]
            if src not in node_set:
                raise GraphParseError(f"edge references unknown node '{src}'", lineno)
            if dst not in node_set:
                raise GraphParseError(f"edge references unknown node '{dst}'", lineno)
            if src == dst:
                raise GraphParseError(
                    "self-edges are not written per-edge; "
                    "use the 'self_loops true' header",
                    lineno,
                )
            edges.append((src, dst))
        else:
            raise GraphParseError(f"unknown directive '{keyword}'", lineno)

    return KnowledgeGraphSpec(
        nodes=nodes, edges=edges, directed=directed, self_loops=self_loops
    )


def _parse_bool(parts: list[str], lineno: int) -> bool:
    if len(parts) != 2 or parts[1] not in ("true", "false"):
        raise GraphParseError(f"expected '{parts[0]} true|false'", lineno)
    return parts[1] == "true"


def parse_graph_file(path: str) -> KnowledgeGraphSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_graph(fh.read())


def serialize_graph(spec: KnowledgeGraphSpec) -> str:
    """Canonical text form; parse(serialize(spec)) is the identity."""
    lines = [
        f"directed {'true' if spec.directed else 'false'}",
        f"self_loops {'true' if spec.self_loops else 'false'}",
    ]
    lines.extend(f"node {n}" for n in spec.nodes)
    lines.extend(f"edge {s} -> {d}" for s, d in spec.edges)
    return "\n".join(lines) + "\n"


def to_adjacency(spec: KnowledgeGraphSpec) -> AdjacencyMatrix:
    """Binary matrix with a_ij = 1 iff edge i->j exists.

    Undirected specs get the symmetric closure; the diagonal is all ones or
    all zeros per the self_loops flag.
    """
    v = spec.num_nodes
    index = {n: i for i, n in enumerate(spec.nodes)}
    a = np.zeros((v, v), dtype=np.float64)
    for src, dst in spec.edges:
        a[index[src], index[dst]] = 1.0
        if not spec.directed:
            a[index[dst], index[src]] = 1.0
    np.fill_diagonal(a, 1.0 if spec.self_loops else 0.0)
    return AdjacencyMatrix(values=a, node_order=list(spec.nodes))


def validate_against_dataset(
    spec: KnowledgeGraphSpec, columns: list[str]
) -> tuple[list[tuple[int, str]], AdjacencyMatrix]:
    """Match graph nodes to dataset feature columns by name.

    Returns the (channel index, node name) mapping in dataset column order
    plus the adjacency permuted to that order, so row/column i of the matrix
    always refers to data channel i.
    """
    node_set = set(spec.nodes)
    col_set = set(columns)
    missing_cols = sorted(node_set - col_set)
    missing_nodes = sorted(col_set - node_set)
    if missing_cols or missing_nodes:
        raise ValidationError(
            "graph and dataset variables do not match; "
            f"nodes without a column: {missing_cols or 'none'}; "
            f"columns without a node: {missing_nodes or 'none'}"
        )

    adjacency = to_adjacency(spec)
    order = [spec.nodes.index(c) for c in columns]
    perm = np.asarray(order)
    permuted = adjacency.values[np.ix_(perm, perm)]
    mapping = [(i, c) for i, c in enumerate(columns)]
    return mapping, AdjacencyMatrix(values=permuted, node_order=list(columns))


def scrambled_adjacency(a: AdjacencyMatrix, rng: np.random.Generator) -> AdjacencyMatrix:
    """Random adjacency over the same nodes with the same off-diagonal edge count.

    Used as the placebo arm in A/B runs: identical parameter budget, no
    graph content.
    """
    v = a.num_nodes
    cells = [(i, j) for i in range(v) for j in range(v) if i != j]
    count = a.num_edges
    picks = rng.choice(len(cells), size=count, replace=False)
    values = np.zeros_like(a.values)
    for p in picks:
        i, j = cells[p]
        values[i, j] = 1.0
    values[np.diag_indices(v)] = np.diag(a.values)
    return AdjacencyMatrix(values=values, node_order=list(a.node_order))
