"""Block-structured process trees: validation, canonical form, serialization.

A model is an immutable tree of :class:`BlockNode`. Interior nodes are
SEQUENCE, PARALLEL, CONDITIONAL or LOOP blocks; leaves are activities or SKIP
placeholders (the empty branch of a conditional). Branch conditions live on
the child node occupying the branch slot; loop conditions live on the LOOP
node itself. ``None`` is the "unset" condition sentinel.

A LOOP sitting directly in a branch slot needs two conditions (its loop
condition plus the branch guard); the guard goes in ``branch_condition``,
which is reserved for exactly that case.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator

from .errors import InvariantViolation, ParseError

MODEL_FORMAT = "patternbench-model"
MODEL_VERSION = 1


class NodeKind(str, Enum):
    ACTIVITY = "activity"
    SKIP = "skip"
    SEQUENCE = "sequence"
    PARALLEL = "parallel"
    CONDITIONAL = "conditional"
    LOOP = "loop"


_LEAF_KINDS = (NodeKind.ACTIVITY, NodeKind.SKIP)


@dataclass(frozen=True, slots=True)
class BlockNode:
    id: int
    kind: NodeKind
    label: str | None = None
    condition: str | None = None
    branch_condition: str | None = None
    children: tuple["BlockNode", ...] = ()

    def walk(self) -> Iterator["BlockNode"]:
        """Pre-order traversal of the subtree rooted here."""
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))


def branch_condition_of(child: BlockNode) -> str | None:
    """The guard of the branch slot this node occupies."""
    if child.kind is NodeKind.LOOP:
        return child.branch_condition
    return child.condition


def as_branch(child: BlockNode, guard: str | None) -> BlockNode:
    """Return the node rewritten to occupy a branch slot with this guard."""
    if child.kind is NodeKind.LOOP:
        return BlockNode(
            child.id, child.kind, label=child.label, condition=child.condition,
            branch_condition=guard, children=child.children,
        )
    return BlockNode(
        child.id, child.kind, label=child.label, condition=guard,
        children=child.children,
    )


def clear_branch(child: BlockNode) -> BlockNode:
    """Return the node rewritten for a non-branch position (guard removed)."""
    return as_branch(child, None)


@dataclass(frozen=True, slots=True)
class ProcessModel:
    root: BlockNode
    next_id: int

    def nodes(self) -> Iterator[BlockNode]:
        return self.root.walk()

    def find(self, node_id: int) -> BlockNode | None:
        for node in self.root.walk():
            if node.id == node_id:
                return node
        return None

    def parent_map(self) -> dict[int, BlockNode]:
        """Maps node id -> parent node. The root has no entry."""
        parents: dict[int, BlockNode] = {}
        for node in self.root.walk():
            for child in node.children:
                parents[child.id] = node
        return parents


def activity(node_id: int, label: str, condition: str | None = None) -> BlockNode:
    return BlockNode(node_id, NodeKind.ACTIVITY, label=label, condition=condition)


def skip(node_id: int, condition: str | None = None) -> BlockNode:
    return BlockNode(node_id, NodeKind.SKIP, condition=condition)


def new_empty() -> ProcessModel:
    """The empty model: a root sequence with no children."""
    return ProcessModel(root=BlockNode(0, NodeKind.SEQUENCE), next_id=1)


def is_empty(model: ProcessModel) -> bool:
    return model.root.kind is NodeKind.SEQUENCE and not model.root.children


def activities(model: ProcessModel) -> Counter:
    """Multiset of activity labels in the model."""
    return Counter(n.label for n in model.nodes() if n.kind is NodeKind.ACTIVITY)


def conditions(model: ProcessModel) -> Counter:
    """Multiset of set (non-None) conditions on branch slots and loops."""
    parents = model.parent_map()
    out: Counter = Counter()
    for node in model.nodes():
        if node.kind is NodeKind.LOOP and node.condition is not None:
            out[node.condition] += 1
        parent = parents.get(node.id)
        if parent is not None and parent.kind is NodeKind.CONDITIONAL:
            guard = branch_condition_of(node)
            if guard is not None:
                out[guard] += 1
    return out


def block_counts(model: ProcessModel) -> Counter:
    """Counts of interior block kinds, used by search bounds."""
    return Counter(
        n.kind
        for n in model.nodes()
        if n.kind in (NodeKind.PARALLEL, NodeKind.CONDITIONAL, NodeKind.LOOP)
    )


def validate(model: ProcessModel) -> None:
    """Raise InvariantViolation unless the model is structurally valid.

    Enforced beyond the obvious kind/arity rules: SKIP appears only as a
    direct child of a CONDITIONAL, a CONDITIONAL keeps at least one non-SKIP
    branch and never two SKIP branches with the same condition, and an empty
    SEQUENCE is only legal as the root (the empty model).
    """
    seen_ids: set[int] = set()
    max_id = -1

    def visit(node: BlockNode, parent: BlockNode | None) -> None:
        nonlocal max_id
        if not isinstance(node.id, int) or isinstance(node.id, bool) or node.id < 0:
            raise InvariantViolation(f"node id {node.id!r} is not a non-negative int")
        if node.id in seen_ids:
            raise InvariantViolation(f"duplicate node id {node.id}")
        seen_ids.add(node.id)
        max_id = max(max_id, node.id)

        in_conditional = parent is not None and parent.kind is NodeKind.CONDITIONAL
        if node.condition is not None and node.kind is not NodeKind.LOOP and not in_conditional:
            raise InvariantViolation(
                f"node {node.id} carries a condition outside a conditional branch or loop"
            )
        if node.branch_condition is not None and not (
            node.kind is NodeKind.LOOP and in_conditional
        ):
            raise InvariantViolation(
                f"node {node.id} carries a branch_condition but is not a loop branch"
            )
        if node.label is not None and node.kind is not NodeKind.ACTIVITY:
            raise InvariantViolation(f"non-activity node {node.id} carries a label")

        kind = node.kind
        if kind in _LEAF_KINDS:
            if node.children:
                raise InvariantViolation(f"{kind.value} node {node.id} has children")
            if kind is NodeKind.ACTIVITY:
                if not node.label or not isinstance(node.label, str):
                    raise InvariantViolation(f"activity {node.id} has an empty label")
            elif not in_conditional:
                raise InvariantViolation(f"skip node {node.id} outside a conditional branch")
            return

        if kind is NodeKind.SEQUENCE:
            if parent is not None and len(node.children) < 2:
                # trivial sequences collapse away; only the root may be one
                raise InvariantViolation(
                    f"non-root sequence {node.id} has arity {len(node.children)} < 2"
                )
            for child in node.children:
                if child.kind is NodeKind.SEQUENCE:
                    raise InvariantViolation(
                        f"sequence {node.id} directly nests sequence {child.id}"
                    )
                if child.kind is NodeKind.SKIP:
                    raise InvariantViolation(f"sequence {node.id} contains skip {child.id}")
        elif kind in (NodeKind.PARALLEL, NodeKind.CONDITIONAL):
            if len(node.children) < 2:
                raise InvariantViolation(
                    f"{kind.value} node {node.id} has arity {len(node.children)} < 2"
                )
            if kind is NodeKind.PARALLEL:
                for child in node.children:
                    if child.kind is NodeKind.SKIP:
                        raise InvariantViolation(f"parallel {node.id} contains skip {child.id}")
            else:
                skips = [c for c in node.children if c.kind is NodeKind.SKIP]
                if len(skips) == len(node.children):
                    raise InvariantViolation(f"conditional {node.id} has only skip branches")
                skip_conds = [c.condition for c in skips]
                if len(skip_conds) != len(set(skip_conds)):
                    raise InvariantViolation(
                        f"conditional {node.id} has duplicate skip branches"
                    )
        elif kind is NodeKind.LOOP:
            if len(node.children) != 1:
                raise InvariantViolation(f"loop {node.id} has arity {len(node.children)} != 1")
            if node.children[0].kind is NodeKind.SKIP:
                raise InvariantViolation(f"loop {node.id} has a skip body")
        else:  # pragma: no cover - enum is closed
            raise InvariantViolation(f"unknown kind {kind!r}")

        for child in node.children:
            visit(child, node)

    visit(model.root, None)
    if model.next_id <= max_id:
        raise InvariantViolation(f"next_id {model.next_id} not beyond max node id {max_id}")


# --------------------------------------------------------------------------
# Canonical form
# --------------------------------------------------------------------------

_KIND_TAG = {
    NodeKind.ACTIVITY: "a",
    NodeKind.SKIP: "k",
    NodeKind.SEQUENCE: "s",
    NodeKind.PARALLEL: "p",
    NodeKind.CONDITIONAL: "c",
    NodeKind.LOOP: "l",
}


def _cond_key(condition: str | None) -> tuple:
    # Unset conditions sort after set ones.
    return (1, "") if condition is None else (0, condition)


@dataclass(frozen=True, slots=True)
class CanonicalForm:
    model: ProcessModel
    key: tuple = field(repr=False)
    _digest: str | None = field(default=None, repr=False, compare=False)

    @property
    def digest(self) -> str:
        if self._digest is None:
            raw = json.dumps(_key_to_jsonable(self.key), separators=(",", ":"))
            digest = hashlib.sha256(raw.encode("utf-8")).hexdigest()
            object.__setattr__(self, "_digest", digest)
        return self._digest


def _key_to_jsonable(key: tuple):
    return [_key_to_jsonable(part) if isinstance(part, tuple) else part for part in key]


def _promote(child: BlockNode, in_conditional: bool, guard: str | None) -> BlockNode:
    """A block collapsed to a single child; the child inherits the block's slot."""
    if in_conditional:
        return as_branch(child, guard)
    return clear_branch(child)


def _normalize(node: BlockNode, in_conditional: bool) -> tuple[BlockNode, tuple] | None:
    """Return (normalized node, structural key), or None if the node dissolves.

    Normalization flattens nested sequences, collapses single-child blocks,
    rewrites empty conditional branches to SKIP, drops degenerate structure
    (all-skip conditionals, empty loops, misplaced skips) and sorts the
    children of commutative blocks by a deterministic structural key.
    """
    kind = node.kind
    if kind is NodeKind.ACTIVITY:
        if node.children:
            raise InvariantViolation(f"activity {node.id} has children")
        if not node.label:
            raise InvariantViolation(f"activity {node.id} has an empty label")
        return node, (_KIND_TAG[kind], node.label)
    if kind is NodeKind.SKIP:
        if node.children:
            raise InvariantViolation(f"skip {node.id} has children")
        if not in_conditional:
            return None
        return node, (_KIND_TAG[kind],)

    if kind is NodeKind.LOOP:
        if len(node.children) != 1:
            raise InvariantViolation(f"loop {node.id} has arity {len(node.children)}")
        body = _normalize(node.children[0], False)
        if body is None:
            return None
        body_node, body_key = body
        new = BlockNode(
            node.id, kind, condition=node.condition,
            branch_condition=node.branch_condition if in_conditional else None,
            children=(body_node,),
        )
        return new, (_KIND_TAG[kind], _cond_key(node.condition), body_key)

    if kind is NodeKind.SEQUENCE:
        parts: list[tuple[BlockNode, tuple]] = []
        for child in node.children:
            norm = _normalize(child, False)
            if norm is None:
                continue
            child_node, child_key = norm
            if child_node.kind is NodeKind.SEQUENCE:
                # Splice nested sequence content inline.
                for grand in child_node.children:
                    grand_norm = _normalize(grand, False)
                    assert grand_norm is not None
                    parts.append(grand_norm)
            else:
                parts.append((child_node, child_key))
        if not parts:
            return None
        if len(parts) == 1:
            promoted = _promote(parts[0][0], in_conditional, branch_condition_of(node))
            return _normalize(promoted, in_conditional)
        new = BlockNode(
            node.id, kind, condition=node.condition,
            children=tuple(p[0] for p in parts),
        )
        return new, (_KIND_TAG[kind], tuple(p[1] for p in parts))

    if kind is NodeKind.PARALLEL:
        branches: list[tuple[tuple, BlockNode]] = []
        for child in node.children:
            norm = _normalize(child, False)
            if norm is None:
                continue
            branches.append((norm[1], norm[0]))
        if not branches:
            return None
        if len(branches) == 1:
            promoted = _promote(branches[0][1], in_conditional, branch_condition_of(node))
            return _normalize(promoted, in_conditional)
        branches.sort(key=lambda item: item[0])
        new = BlockNode(
            node.id, kind, condition=node.condition,
            children=tuple(b[1] for b in branches),
        )
        return new, (_KIND_TAG[kind], tuple(b[0] for b in branches))

    if kind is NodeKind.CONDITIONAL:
        branches = []
        seen_skip_conds: set[tuple] = set()
        for child in node.children:
            norm = _normalize(child, True)
            if norm is None:
                norm_node: BlockNode = BlockNode(
                    child.id, NodeKind.SKIP, condition=branch_condition_of(child)
                )
                norm_key: tuple = (_KIND_TAG[NodeKind.SKIP],)
            else:
                norm_node, norm_key = norm
            guard = branch_condition_of(norm_node)
            if norm_node.kind is NodeKind.SKIP:
                ck = _cond_key(guard)
                if ck in seen_skip_conds:
                    continue
                seen_skip_conds.add(ck)
            branches.append(((_cond_key(guard), norm_key), norm_node))
        if all(b[1].kind is NodeKind.SKIP for b in branches):
            return None
        if len(branches) == 1:
            promoted = _promote(branches[0][1], in_conditional, branch_condition_of(node))
            return _normalize(promoted, in_conditional)
        branches.sort(key=lambda item: item[0])
        new = BlockNode(
            node.id, kind, condition=node.condition,
            branch_condition=node.branch_condition if in_conditional else None,
            children=tuple(b[1] for b in branches),
        )
        return new, (_KIND_TAG[kind], tuple(b[0] for b in branches))

    raise InvariantViolation(f"unknown kind {kind!r}")  # pragma: no cover


def _renumber(node: BlockNode, counter: list[int]) -> BlockNode:
    node_id = counter[0]
    counter[0] += 1
    children = tuple(_renumber(c, counter) for c in node.children)
    return BlockNode(
        node_id, node.kind, label=node.label, condition=node.condition,
        branch_condition=node.branch_condition, children=children,
    )


def canonical_key(model: ProcessModel) -> tuple:
    """Structural key of the normalized tree; equal keys == canonical equality."""
    norm = _normalize(model.root, False)
    if norm is None:
        return ("s", ())
    return norm[1]


def canonicalize(model: ProcessModel) -> CanonicalForm:
    """Normalize a model to its canonical representative.

    Idempotent; two models receive equal digests iff their normalized trees
    are structurally equal. The canonical model's node ids are renumbered in
    pre-order so equal models are identical values.
    """
    norm = _normalize(model.root, False)
    if norm is None:
        root = BlockNode(0, NodeKind.SEQUENCE)
        key: tuple = ("s", ())
    else:
        root, key = norm
    root = _renumber(root, [0])
    count = sum(1 for _ in root.walk())
    return CanonicalForm(model=ProcessModel(root=root, next_id=count), key=key)


def canonically_equal(a: ProcessModel, b: ProcessModel) -> bool:
    return canonical_key(a) == canonical_key(b)


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------

_NODE_FIELDS = {"id", "kind", "label", "condition", "branch_condition", "children"}


def _node_to_doc(node: BlockNode) -> dict:
    doc: dict = {"id": node.id, "kind": node.kind.value}
    if node.label is not None:
        doc["label"] = node.label
    if node.condition is not None:
        doc["condition"] = node.condition
    if node.branch_condition is not None:
        doc["branch_condition"] = node.branch_condition
    doc["children"] = [_node_to_doc(c) for c in node.children]
    return doc


def model_to_doc(model: ProcessModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "root": _node_to_doc(model.root),
    }


def serialize(model: ProcessModel) -> str:
    return json.dumps(model_to_doc(model), indent=2) + "\n"


def _node_from_doc(doc, path: str) -> BlockNode:
    if not isinstance(doc, dict):
        raise ParseError("node must be an object", path)
    unknown = set(doc) - _NODE_FIELDS
    if unknown:
        raise ParseError(f"unknown fields {sorted(unknown)}", path)
    if "id" not in doc or not isinstance(doc["id"], int) or isinstance(doc["id"], bool):
        raise ParseError("missing or non-integer id", path)
    kind_raw = doc.get("kind")
    try:
        kind = NodeKind(kind_raw)
    except ValueError:
        raise ParseError(f"unknown kind {kind_raw!r}", path) from None
    for key in ("label", "condition", "branch_condition"):
        value = doc.get(key)
        if value is not None and not isinstance(value, str):
            raise ParseError(f"{key} must be a string", path)
    children_doc = doc.get("children", [])
    if not isinstance(children_doc, list):
        raise ParseError("children must be an array", path)
    children = tuple(
        _node_from_doc(child, f"{path}.children[{i}]")
        for i, child in enumerate(children_doc)
    )
    return BlockNode(
        doc["id"], kind, label=doc.get("label"), condition=doc.get("condition"),
        branch_condition=doc.get("branch_condition"), children=children,
    )


def model_from_doc(doc) -> ProcessModel:
    if not isinstance(doc, dict):
        raise ParseError("document must be an object", "$")
    unknown = set(doc) - {"format", "version", "root"}
    if unknown:
        raise ParseError(f"unknown fields {sorted(unknown)}", "$")
    if doc.get("format") != MODEL_FORMAT:
        raise ParseError(f"format must be {MODEL_FORMAT!r}", "$.format")
    if doc.get("version") != MODEL_VERSION:
        raise ParseError(f"unsupported version {doc.get('version')!r}", "$.version")
    if "root" not in doc:
        raise ParseError("missing root", "$")
    root = _node_from_doc(doc["root"], "$.root")
    max_id = max(n.id for n in root.walk())
    model = ProcessModel(root=root, next_id=max_id + 1)
    validate(model)
    return model


def deserialize(text: str) -> ProcessModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, f"line {exc.lineno} column {exc.colno}") from None
    return model_from_doc(doc)
