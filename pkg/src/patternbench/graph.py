"""Flat gateway graphs: lowering from block trees, raw edits, soundness.

The graph view mirrors what a primitive-level editor manipulates: activity
nodes, start/end events, and paired and/xor gateways connected by directed
edges. Unlike pattern applications, primitive edits carry no soundness
guarantee; :func:`check_soundness` verifies a graph after the fact by
structural reduction (collapse recognized blocks until a single start->end
edge remains), which doubles as the inverse lowering in :func:`from_graph`.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .errors import (
    DuplicateId,
    InvariantViolation,
    NotBlockStructured,
    UnknownEdge,
    UnknownNode,
)
from .model import (
    BlockNode,
    NodeKind,
    ProcessModel,
    as_branch,
    branch_condition_of,
    validate,
)

START_ID = "start"
END_ID = "end"


class GraphNodeType(str, Enum):
    START = "start"
    END = "end"
    ACTIVITY = "activity"
    AND_SPLIT = "and_split"
    AND_JOIN = "and_join"
    XOR_SPLIT = "xor_split"
    XOR_JOIN = "xor_join"


@dataclass(frozen=True, slots=True)
class GraphNode:
    id: str
    type: GraphNodeType
    label: str | None = None


@dataclass(frozen=True, slots=True)
class Edge:
    src: str
    dst: str
    condition: str | None = None


@dataclass(frozen=True)
class FlatGraph:
    nodes: dict[str, GraphNode]
    edges: frozenset[Edge]

    def outgoing(self, node_id: str) -> list[Edge]:
        return sorted(
            (e for e in self.edges if e.src == node_id),
            key=lambda e: (e.dst, e.condition or ""),
        )

    def incoming(self, node_id: str) -> list[Edge]:
        return sorted(
            (e for e in self.edges if e.dst == node_id),
            key=lambda e: (e.src, e.condition or ""),
        )


def graph_to_doc(graph: FlatGraph) -> dict:
    nodes = []
    for node in sorted(graph.nodes.values(), key=lambda n: n.id):
        doc = {"id": node.id, "type": node.type.value}
        if node.label is not None:
            doc["label"] = node.label
        nodes.append(doc)
    edges = []
    for edge in sorted(graph.edges, key=lambda e: (e.src, e.dst, e.condition or "")):
        doc = {"from": edge.src, "to": edge.dst}
        if edge.condition is not None:
            doc["condition"] = edge.condition
        edges.append(doc)
    return {"nodes": nodes, "edges": edges}


# --------------------------------------------------------------------------
# Lowering
# --------------------------------------------------------------------------


def to_graph(model: ProcessModel) -> FlatGraph:
    """Deterministic lowering of a block tree to its gateway graph."""
    nodes: dict[str, GraphNode] = {
        START_ID: GraphNode(START_ID, GraphNodeType.START),
        END_ID: GraphNode(END_ID, GraphNodeType.END),
    }
    edges: set[Edge] = set()

    def add_node(node_id: str, node_type: GraphNodeType, label: str | None = None) -> None:
        nodes[node_id] = GraphNode(node_id, node_type, label)

    def lower(node: BlockNode) -> tuple[str, str]:
        kind = node.kind
        if kind is NodeKind.ACTIVITY:
            nid = f"n{node.id}"
            add_node(nid, GraphNodeType.ACTIVITY, node.label)
            return nid, nid
        if kind is NodeKind.SEQUENCE:
            entry = exit_ = None
            for child in node.children:
                c_entry, c_exit = lower(child)
                if entry is None:
                    entry = c_entry
                else:
                    edges.add(Edge(exit_, c_entry))
                exit_ = c_exit
            assert entry is not None and exit_ is not None
            return entry, exit_
        if kind is NodeKind.PARALLEL:
            split, join = f"g{node.id}s", f"g{node.id}j"
            add_node(split, GraphNodeType.AND_SPLIT)
            add_node(join, GraphNodeType.AND_JOIN)
            for child in node.children:
                c_entry, c_exit = lower(child)
                edges.add(Edge(split, c_entry))
                edges.add(Edge(c_exit, join))
            return split, join
        if kind is NodeKind.CONDITIONAL:
            split, join = f"g{node.id}s", f"g{node.id}j"
            add_node(split, GraphNodeType.XOR_SPLIT)
            add_node(join, GraphNodeType.XOR_JOIN)
            for child in node.children:
                guard = branch_condition_of(child)
                if child.kind is NodeKind.SKIP:
                    edges.add(Edge(split, join, guard))
                    continue
                c_entry, c_exit = lower(child)
                edges.add(Edge(split, c_entry, guard))
                edges.add(Edge(c_exit, join))
            return split, join
        if kind is NodeKind.LOOP:
            join, split = f"g{node.id}j", f"g{node.id}s"
            add_node(join, GraphNodeType.XOR_JOIN)
            add_node(split, GraphNodeType.XOR_SPLIT)
            b_entry, b_exit = lower(node.children[0])
            edges.add(Edge(join, b_entry))
            edges.add(Edge(b_exit, split))
            edges.add(Edge(split, join, node.condition))
            return join, split
        raise InvariantViolation(f"cannot lower kind {kind!r}")

    root = model.root
    if root.kind is NodeKind.SEQUENCE and not root.children:
        edges.add(Edge(START_ID, END_ID))
    else:
        entry, exit_ = lower(root)
        edges.add(Edge(START_ID, entry))
        edges.add(Edge(exit_, END_ID))
    return FlatGraph(nodes=nodes, edges=frozenset(edges))


# --------------------------------------------------------------------------
# Primitives
# --------------------------------------------------------------------------


class PrimitiveOp(str, Enum):
    ADD_NODE = "add_node"
    DELETE_NODE = "delete_node"
    ADD_EDGE = "add_edge"
    DELETE_EDGE = "delete_edge"
    UPDATE_EDGE_CONDITION = "update_edge_condition"


@dataclass(frozen=True, slots=True)
class Primitive:
    op: PrimitiveOp
    node: GraphNode | None = None
    src: str | None = None
    dst: str | None = None
    condition: str | None = None

    def __post_init__(self) -> None:
        if self.op in (PrimitiveOp.ADD_NODE, PrimitiveOp.DELETE_NODE):
            if self.node is None:
                raise ValueError(f"{self.op.value} requires a node descriptor")
        elif self.src is None or self.dst is None:
            raise ValueError(f"{self.op.value} requires src and dst")


def apply_primitive(graph: FlatGraph, primitive: Primitive) -> FlatGraph:
    """Apply one raw edit. No soundness guarantee: the result may be any graph."""
    op = primitive.op
    if op is PrimitiveOp.ADD_NODE:
        node = primitive.node
        if node.id in graph.nodes:
            raise DuplicateId(f"node {node.id!r} already exists")
        nodes = dict(graph.nodes)
        nodes[node.id] = node
        return FlatGraph(nodes=nodes, edges=graph.edges)
    if op is PrimitiveOp.DELETE_NODE:
        node_id = primitive.node.id
        if node_id not in graph.nodes:
            raise UnknownNode(f"node {node_id!r} does not exist")
        nodes = dict(graph.nodes)
        del nodes[node_id]
        edges = frozenset(
            e for e in graph.edges if e.src != node_id and e.dst != node_id
        )
        return FlatGraph(nodes=nodes, edges=edges)
    if op is PrimitiveOp.ADD_EDGE:
        for endpoint in (primitive.src, primitive.dst):
            if endpoint not in graph.nodes:
                raise UnknownNode(f"node {endpoint!r} does not exist")
        edge = Edge(primitive.src, primitive.dst, primitive.condition)
        if edge in graph.edges:
            raise DuplicateId(f"edge {edge.src}->{edge.dst} already exists")
        return FlatGraph(nodes=graph.nodes, edges=graph.edges | {edge})
    if op is PrimitiveOp.DELETE_EDGE:
        edge = Edge(primitive.src, primitive.dst, primitive.condition)
        if edge not in graph.edges:
            raise UnknownEdge(f"edge {edge.src}->{edge.dst} does not exist")
        return FlatGraph(nodes=graph.nodes, edges=graph.edges - {edge})
    if op is PrimitiveOp.UPDATE_EDGE_CONDITION:
        matches = [
            e for e in graph.edges if e.src == primitive.src and e.dst == primitive.dst
        ]
        if not matches:
            raise UnknownEdge(f"edge {primitive.src}->{primitive.dst} does not exist")
        if len(matches) > 1:
            raise UnknownEdge(
                f"edge {primitive.src}->{primitive.dst} is ambiguous"
            )
        new_edge = Edge(primitive.src, primitive.dst, primitive.condition)
        return FlatGraph(nodes=graph.nodes, edges=(graph.edges - {matches[0]}) | {new_edge})
    raise ValueError(f"unknown primitive op {op!r}")  # pragma: no cover


# --------------------------------------------------------------------------
# Soundness: structural reduction
# --------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Violation:
    code: str
    ids: tuple[str, ...]
    message: str


@dataclass(frozen=True, slots=True)
class SoundnessReport:
    sound: bool
    violations: tuple[Violation, ...]
    warnings: tuple[Violation, ...] = ()


class _RedEdge:
    """Mutable edge during reduction; frag accumulates reconstructed blocks."""

    __slots__ = ("src", "dst", "condition", "frag")

    def __init__(self, src: str, dst: str, condition: str | None, frag: list):
        self.src = src
        self.dst = dst
        self.condition = condition
        self.frag = frag


def _frag_to_node(frag: list[BlockNode], guard: str | None, alloc) -> BlockNode:
    if len(frag) == 1:
        return as_branch(frag[0], guard)
    return BlockNode(alloc(), NodeKind.SEQUENCE, condition=guard, children=tuple(frag))


def _reduce(graph: FlatGraph) -> tuple[ProcessModel | None, Violation | None]:
    """Collapse recognized blocks; returns the reconstructed tree on success."""
    counter = [0]

    def alloc() -> int:
        counter[0] += 1
        return counter[0] - 1

    types = {nid: node.type for nid, node in graph.nodes.items()}
    labels = {nid: node.label for nid, node in graph.nodes.items()}
    edges: list[_RedEdge] = [
        _RedEdge(e.src, e.dst, e.condition, []) for e in graph.edges
    ]
    live = set(types)
    reduced_gateways: set[str] = set()

    def out_edges(nid: str) -> list[_RedEdge]:
        return [e for e in edges if e.src == nid]

    def in_edges(nid: str) -> list[_RedEdge]:
        return [e for e in edges if e.dst == nid]

    gateway_types = {
        GraphNodeType.AND_SPLIT,
        GraphNodeType.AND_JOIN,
        GraphNodeType.XOR_SPLIT,
        GraphNodeType.XOR_JOIN,
    }

    def try_series() -> bool:
        for nid in sorted(live):
            ntype = types[nid]
            if ntype is GraphNodeType.ACTIVITY:
                content: list[BlockNode] = [
                    BlockNode(alloc(), NodeKind.ACTIVITY, label=labels[nid] or nid)
                ]
            elif ntype in gateway_types and nid in reduced_gateways:
                content = []
            else:
                continue
            ins, outs = in_edges(nid), out_edges(nid)
            if len(ins) != 1 or len(outs) != 1:
                continue
            e_in, e_out = ins[0], outs[0]
            if e_in.src == nid or e_out.dst == nid:
                continue  # self-loop: never reducible
            if e_out.condition is not None:
                continue
            edges.remove(e_in)
            edges.remove(e_out)
            live.discard(nid)
            edges.append(
                _RedEdge(
                    e_in.src, e_out.dst, e_in.condition,
                    e_in.frag + content + e_out.frag,
                )
            )
            return True
        return False

    def try_bond() -> tuple[bool, Violation | None]:
        pairs: dict[tuple[str, str], list[_RedEdge]] = {}
        for e in edges:
            if e.src != e.dst:
                pairs.setdefault((e.src, e.dst), []).append(e)
        for (u, v), group in sorted(pairs.items()):
            if len(group) < 2:
                continue
            if len(out_edges(u)) != len(group) or len(in_edges(v)) != len(group):
                continue
            tu, tv = types[u], types[v]
            if tu is GraphNodeType.XOR_SPLIT and tv is GraphNodeType.XOR_JOIN:
                kind = NodeKind.CONDITIONAL
            elif tu is GraphNodeType.AND_SPLIT and tv is GraphNodeType.AND_JOIN:
                kind = NodeKind.PARALLEL
            elif tu in gateway_types and tv in gateway_types:
                return False, Violation(
                    "MISMATCHED_BLOCK",
                    (u, v),
                    f"gateway {u} ({tu.value}) closed by {v} ({tv.value})",
                )
            else:
                continue
            branches: list[BlockNode] = []
            for e in sorted(group, key=lambda e: (e.condition or "￿", len(e.frag))):
                if not e.frag:
                    if kind is NodeKind.PARALLEL:
                        return False, Violation(
                            "NOT_REDUCIBLE",
                            (u, v),
                            "parallel block with an empty branch",
                        )
                    branches.append(
                        BlockNode(alloc(), NodeKind.SKIP, condition=e.condition)
                    )
                else:
                    if kind is NodeKind.PARALLEL and e.condition is not None:
                        return False, Violation(
                            "NOT_REDUCIBLE",
                            (u, v),
                            "condition on a parallel branch edge",
                        )
                    branches.append(_frag_to_node(e.frag, e.condition, alloc))
            for e in group:
                edges.remove(e)
            block = BlockNode(alloc(), kind, children=tuple(branches))
            edges.append(_RedEdge(u, v, None, [block]))
            reduced_gateways.update((u, v))
            return True, None
        return False, None

    def try_loop() -> bool:
        for e_body in list(edges):
            j, s = e_body.src, e_body.dst
            if j == s:
                continue
            if types.get(j) is not GraphNodeType.XOR_JOIN:
                continue
            if types.get(s) is not GraphNodeType.XOR_SPLIT:
                continue
            back = [e for e in edges if e.src == s and e.dst == j]
            if len(back) != 1:
                continue
            e_back = back[0]
            if e_body.condition is not None or not e_body.frag:
                continue
            j_in, j_out = in_edges(j), out_edges(j)
            s_in, s_out = in_edges(s), out_edges(s)
            if len(j_in) != 2 or len(j_out) != 1 or len(s_in) != 1 or len(s_out) != 2:
                continue
            ext_in = [e for e in j_in if e is not e_back]
            ext_out = [e for e in s_out if e is not e_back]
            if len(ext_in) != 1 or len(ext_out) != 1:
                continue
            e_in, e_out = ext_in[0], ext_out[0]
            if e_out.condition is not None:
                continue
            if e_in.src == j or e_out.dst == s:
                continue
            body = _frag_to_node(e_body.frag, None, alloc)
            loop = BlockNode(
                alloc(), NodeKind.LOOP, condition=e_back.condition, children=(body,)
            )
            for e in (e_body, e_back, e_in, e_out):
                edges.remove(e)
            live.discard(j)
            live.discard(s)
            edges.append(
                _RedEdge(e_in.src, e_out.dst, e_in.condition, e_in.frag + [loop] + e_out.frag)
            )
            return True
        return False

    while True:
        if try_series():
            continue
        bonded, violation = try_bond()
        if violation is not None:
            return None, violation
        if bonded:
            continue
        if try_loop():
            continue
        break

    if live == {START_ID, END_ID} and len(edges) == 1:
        final = edges[0]
        if final.src == START_ID and final.dst == END_ID and final.condition is None:
            root = BlockNode(alloc(), NodeKind.SEQUENCE, children=tuple(final.frag))
            model = ProcessModel(root=root, next_id=counter[0])
            try:
                validate(model)
            except InvariantViolation as exc:
                return None, Violation("NOT_REDUCIBLE", (), str(exc))
            return model, None
    remaining = tuple(sorted(live - {START_ID, END_ID}))
    return None, Violation(
        "NOT_REDUCIBLE",
        remaining,
        "graph does not reduce to a single start->end edge",
    )


def check_soundness(graph: FlatGraph) -> SoundnessReport:
    """Verify structural soundness: unique events, reachability, block nesting."""
    violations: list[Violation] = []
    warnings: list[Violation] = []

    starts = [n.id for n in graph.nodes.values() if n.type is GraphNodeType.START]
    ends = [n.id for n in graph.nodes.values() if n.type is GraphNodeType.END]
    if len(starts) == 0:
        violations.append(Violation("NO_START", (), "no start event"))
    elif len(starts) > 1:
        violations.append(Violation("MULTIPLE_START", tuple(sorted(starts)), "multiple start events"))
    if len(ends) == 0:
        violations.append(Violation("NO_END", (), "no end event"))
    elif len(ends) > 1:
        violations.append(Violation("MULTIPLE_END", tuple(sorted(ends)), "multiple end events"))

    for node in graph.nodes.values():
        if node.type is GraphNodeType.START and graph.incoming(node.id):
            violations.append(
                Violation("START_HAS_INCOMING", (node.id,), "start event has incoming edges")
            )
        if node.type is GraphNodeType.END and graph.outgoing(node.id):
            violations.append(
                Violation("END_HAS_OUTGOING", (node.id,), "end event has outgoing edges")
            )
        if node.type is GraphNodeType.XOR_SPLIT:
            for edge in graph.outgoing(node.id):
                if edge.condition is None:
                    warnings.append(
                        Violation(
                            "UNSET_CONDITION",
                            (edge.src, edge.dst),
                            f"unset condition on edge {edge.src}->{edge.dst}",
                        )
                    )

    if not violations:
        start, end = starts[0], ends[0]
        forward: dict[str, list[str]] = {}
        backward: dict[str, list[str]] = {}
        for e in graph.edges:
            forward.setdefault(e.src, []).append(e.dst)
            backward.setdefault(e.dst, []).append(e.src)

        def closure(seed: str, adjacency: dict[str, list[str]]) -> set[str]:
            seen = {seed}
            stack = [seed]
            while stack:
                for nxt in adjacency.get(stack.pop(), ()):
                    if nxt not in seen:
                        seen.add(nxt)
                        stack.append(nxt)
            return seen

        reachable = closure(start, forward)
        coreachable = closure(end, backward)
        for nid in sorted(graph.nodes):
            if nid not in reachable:
                violations.append(
                    Violation("UNREACHABLE_NODE", (nid,), f"{nid} unreachable from start")
                )
            elif nid not in coreachable:
                violations.append(
                    Violation("DANGLING_NODE", (nid,), f"{nid} cannot reach the end event")
                )

    if not violations:
        _, violation = _reduce(graph)
        if violation is not None:
            violations.append(violation)

    return SoundnessReport(
        sound=not violations,
        violations=tuple(violations),
        warnings=tuple(warnings),
    )


def from_graph(graph: FlatGraph) -> ProcessModel:
    """Inverse lowering. Requires a sound graph; raises NotBlockStructured."""
    report = check_soundness(graph)
    if not report.sound:
        summary = "; ".join(v.message for v in report.violations)
        raise NotBlockStructured(summary or "graph is not sound")
    model, violation = _reduce(graph)
    assert model is not None and violation is None
    return model
