"""Change patterns: precondition-guarded, soundness-preserving transformations.

Every operation here is a pure function from a model to a new model; failed
applications raise :class:`PatternError` and leave the input untouched.
Positions address insertion points (a gap in a sequence, the inside of an
empty SKIP branch, or a wrap next to a block child); fragments are addressed
by node id.

Fresh node ids are assigned deterministically from ``model.next_id``:

* serial insert: activity = next_id, wrapping sequence (if any) = next_id + 1
* parallel insert: activity = next_id, new parallel block (if any) = next_id + 1
* embed in conditional: skip branch = next_id, conditional block = next_id + 1
* embed in loop: loop block = next_id
* delete: skips produced by branch repair allocate upward from next_id
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Union

from .errors import InvariantViolation, PatternError, UnsupportedStructure
from .graph import FlatGraph, GraphNodeType, Primitive, PrimitiveOp, to_graph
from .model import (
    BlockNode,
    NodeKind,
    ProcessModel,
    as_branch,
    branch_condition_of,
    canonical_key,
    canonicalize,
    clear_branch,
    is_empty,
    new_empty,
    validate,
)


class PatternKind(str, Enum):
    SERIAL_INSERT = "serial_insert"
    PARALLEL_INSERT = "parallel_insert"
    DELETE_FRAGMENT = "delete_fragment"
    EMBED_IN_LOOP = "embed_in_loop"
    EMBED_IN_CONDITIONAL = "embed_in_conditional"
    UPDATE_CONDITION = "update_condition"


_KIND_ORDER = {kind: i for i, kind in enumerate(PatternKind)}


@dataclass(frozen=True, slots=True)
class Gap:
    """Insertion point between children of a sequence (0..len inclusive)."""

    sequence: int
    index: int


@dataclass(frozen=True, slots=True)
class IntoSkip:
    """Insertion into an empty conditional branch, replacing its SKIP."""

    node: int


@dataclass(frozen=True, slots=True)
class Beside:
    """Insertion before/after a block child, wrapping it in a sequence."""

    node: int
    side: str  # "before" | "after"


Position = Union[Gap, IntoSkip, Beside]


def _position_key(position: Position | None) -> tuple:
    if position is None:
        return (-1, -1, -1)
    if isinstance(position, Gap):
        return (0, position.sequence, position.index)
    if isinstance(position, IntoSkip):
        return (1, position.node, 0)
    return (2, position.node, 0 if position.side == "before" else 1)


@dataclass(frozen=True, slots=True)
class PatternInstance:
    kind: PatternKind
    label: str | None = None
    position: Position | None = None
    target: int | None = None
    condition: str | None = None
    slot: str | None = None  # update_condition: "branch" | "loop" (None = infer)

    def sort_key(self) -> tuple:
        return (
            _KIND_ORDER[self.kind],
            self.target if self.target is not None else -1,
            _position_key(self.position),
            self.label or "",
            (1, "") if self.condition is None else (0, self.condition),
            self.slot or "",
        )


# --------------------------------------------------------------------------
# Wire form
# --------------------------------------------------------------------------


def position_to_doc(position: Position) -> dict:
    if isinstance(position, Gap):
        return {"type": "gap", "sequence": position.sequence, "index": position.index}
    if isinstance(position, IntoSkip):
        return {"type": "into_skip", "node": position.node}
    return {"type": "beside", "node": position.node, "side": position.side}


def position_from_doc(doc) -> Position:
    if not isinstance(doc, dict) or "type" not in doc:
        raise PatternError(PatternError.UNKNOWN_REF, f"malformed position {doc!r}")
    kind = doc["type"]
    try:
        if kind == "gap":
            return Gap(int(doc["sequence"]), int(doc["index"]))
        if kind == "into_skip":
            return IntoSkip(int(doc["node"]))
        if kind == "beside":
            side = doc["side"]
            if side not in ("before", "after"):
                raise KeyError(side)
            return Beside(int(doc["node"]), side)
    except (KeyError, TypeError, ValueError):
        raise PatternError(
            PatternError.UNKNOWN_REF, f"malformed position {doc!r}"
        ) from None
    raise PatternError(PatternError.UNKNOWN_REF, f"unknown position type {kind!r}")


def instance_to_doc(inst: PatternInstance) -> dict:
    params: dict = {}
    if inst.label is not None:
        params["label"] = inst.label
    if inst.position is not None:
        params["position"] = position_to_doc(inst.position)
    if inst.target is not None:
        params["target"] = inst.target
    if inst.kind in (
        PatternKind.EMBED_IN_LOOP,
        PatternKind.EMBED_IN_CONDITIONAL,
        PatternKind.UPDATE_CONDITION,
    ):
        params["condition"] = inst.condition
    if inst.slot is not None:
        params["slot"] = inst.slot
    return {"kind": inst.kind.value, "params": params}


_PARAM_FIELDS = {"label", "position", "target", "condition", "slot"}


def instance_from_doc(doc) -> PatternInstance:
    if not isinstance(doc, dict):
        raise PatternError(PatternError.UNKNOWN_REF, "pattern must be an object")
    try:
        kind = PatternKind(doc.get("kind"))
    except ValueError:
        raise PatternError(
            PatternError.UNKNOWN_REF, f"unknown pattern kind {doc.get('kind')!r}"
        ) from None
    params = doc.get("params", {})
    if not isinstance(params, dict) or set(params) - _PARAM_FIELDS:
        raise PatternError(PatternError.UNKNOWN_REF, f"malformed params {params!r}")
    position = params.get("position")
    target = params.get("target")
    if target is not None and (not isinstance(target, int) or isinstance(target, bool)):
        raise PatternError(PatternError.UNKNOWN_REF, f"malformed target {target!r}")
    label = params.get("label")
    condition = params.get("condition")
    slot = params.get("slot")
    for name, value in (("label", label), ("condition", condition), ("slot", slot)):
        if value is not None and not isinstance(value, str):
            raise PatternError(PatternError.UNKNOWN_REF, f"malformed {name} {value!r}")
    return PatternInstance(
        kind=kind,
        label=label,
        position=position_from_doc(position) if position is not None else None,
        target=target,
        condition=condition,
        slot=slot,
    )


# --------------------------------------------------------------------------
# Tree surgery
# --------------------------------------------------------------------------


def _rewrite(node: BlockNode, target_id: int, fn) -> tuple[BlockNode | None, bool]:
    """Replace the node with id target_id by fn(node); fn -> None removes it."""
    if node.id == target_id:
        return fn(node), True
    if not node.children:
        return node, False
    new_children: list[BlockNode] = []
    found = False
    for child in node.children:
        if found:
            new_children.append(child)
            continue
        new_child, hit = _rewrite(child, target_id, fn)
        found = hit
        if new_child is not None:
            new_children.append(new_child)
    if not found:
        return node, False
    return (
        BlockNode(
            node.id, node.kind, label=node.label, condition=node.condition,
            branch_condition=node.branch_condition, children=tuple(new_children),
        ),
        True,
    )


def _repair(node: BlockNode, in_conditional: bool, alloc) -> BlockNode | None:
    """Re-establish invariants after a structural edit, preserving child order."""
    kind = node.kind
    if kind is NodeKind.ACTIVITY:
        return node
    if kind is NodeKind.SKIP:
        return node if in_conditional else None
    if kind is NodeKind.LOOP:
        if not node.children:
            return None
        body = _repair(node.children[0], False, alloc)
        if body is None:
            return None
        return BlockNode(
            node.id, kind, condition=node.condition,
            branch_condition=node.branch_condition if in_conditional else None,
            children=(body,),
        )
    if kind is NodeKind.SEQUENCE:
        parts: list[BlockNode] = []
        for child in node.children:
            rep = _repair(child, False, alloc)
            if rep is None or rep.kind is NodeKind.SKIP:
                continue
            if rep.kind is NodeKind.SEQUENCE:
                parts.extend(rep.children)
            else:
                parts.append(rep)
        if not parts:
            return None
        if len(parts) == 1:
            promoted = (
                as_branch(parts[0], branch_condition_of(node))
                if in_conditional
                else clear_branch(parts[0])
            )
            return _repair(promoted, in_conditional, alloc)
        return BlockNode(node.id, kind, condition=node.condition, children=tuple(parts))
    if kind is NodeKind.PARALLEL:
        parts = []
        for child in node.children:
            rep = _repair(child, False, alloc)
            if rep is None or rep.kind is NodeKind.SKIP:
                continue
            parts.append(rep)
        if not parts:
            return None
        if len(parts) == 1:
            promoted = (
                as_branch(parts[0], branch_condition_of(node))
                if in_conditional
                else clear_branch(parts[0])
            )
            return _repair(promoted, in_conditional, alloc)
        return BlockNode(node.id, kind, condition=node.condition, children=tuple(parts))
    if kind is NodeKind.CONDITIONAL:
        branches: list[BlockNode] = []
        seen_skip_guards: list[str | None] = []
        for child in node.children:
            rep = _repair(child, True, alloc)
            if rep is None:
                rep = BlockNode(alloc(), NodeKind.SKIP, condition=branch_condition_of(child))
            if rep.kind is NodeKind.SKIP:
                if rep.condition in seen_skip_guards:
                    continue
                seen_skip_guards.append(rep.condition)
            branches.append(rep)
        if all(b.kind is NodeKind.SKIP for b in branches):
            return None
        if len(branches) == 1:
            promoted = (
                as_branch(branches[0], branch_condition_of(node))
                if in_conditional
                else clear_branch(branches[0])
            )
            return _repair(promoted, in_conditional, alloc)
        return BlockNode(
            node.id, kind, condition=node.condition,
            branch_condition=node.branch_condition if in_conditional else None,
            children=tuple(branches),
        )
    raise InvariantViolation(f"unknown kind {kind!r}")  # pragma: no cover


def _repair_model(root: BlockNode, original_root_id: int, next_id: int) -> ProcessModel:
    counter = [next_id]

    def alloc() -> int:
        counter[0] += 1
        return counter[0] - 1

    if root.kind is NodeKind.SEQUENCE:
        # The root sequence frame survives at any arity (the empty model is
        # its zero-arity case); only its content is repaired.
        parts: list[BlockNode] = []
        for child in root.children:
            rep = _repair(child, False, alloc)
            if rep is None or rep.kind is NodeKind.SKIP:
                continue
            if rep.kind is NodeKind.SEQUENCE:
                parts.extend(rep.children)
            else:
                parts.append(rep)
        repaired: BlockNode | None = BlockNode(
            root.id, NodeKind.SEQUENCE, children=tuple(parts)
        )
    else:
        repaired = _repair(root, False, alloc)
    if repaired is None:
        repaired = BlockNode(original_root_id, NodeKind.SEQUENCE)
    return ProcessModel(root=repaired, next_id=counter[0])


# --------------------------------------------------------------------------
# Pattern application
# --------------------------------------------------------------------------


def _require(found: BlockNode | None, ref) -> BlockNode:
    if found is None:
        raise PatternError(PatternError.UNKNOWN_REF, f"node {ref!r} does not exist")
    return found


def _check_fragment_target(model: ProcessModel, target: BlockNode) -> None:
    if target.kind is NodeKind.SKIP:
        raise PatternError(
            PatternError.PRECONDITION_VIOLATED,
            "an empty branch placeholder is not a fragment",
        )
    if target.kind is NodeKind.SEQUENCE and not target.children:
        raise PatternError(
            PatternError.PRECONDITION_VIOLATED, "the empty model is not a fragment"
        )


def _apply_serial_insert(model: ProcessModel, inst: PatternInstance) -> ProcessModel:
    label = inst.label
    if not label:
        raise PatternError(PatternError.PRECONDITION_VIOLATED, "label must be non-empty")
    position = inst.position
    if position is None:
        raise PatternError(PatternError.UNKNOWN_REF, "missing position")
    if isinstance(position, Gap):
        seq = _require(model.find(position.sequence), position.sequence)
        if seq.kind is not NodeKind.SEQUENCE:
            raise PatternError(
                PatternError.UNKNOWN_REF, f"node {seq.id} is not a sequence"
            )
        if not 0 <= position.index <= len(seq.children):
            raise PatternError(
                PatternError.UNKNOWN_REF,
                f"gap index {position.index} out of range for sequence {seq.id}",
            )
        act = BlockNode(model.next_id, NodeKind.ACTIVITY, label=label)
        children = seq.children[: position.index] + (act,) + seq.children[position.index :]
        root, _ = _rewrite(model.root, seq.id, lambda n: replace(n, children=children))
        return ProcessModel(root=root, next_id=model.next_id + 1)
    if isinstance(position, IntoSkip):
        node = _require(model.find(position.node), position.node)
        if node.kind is not NodeKind.SKIP:
            raise PatternError(
                PatternError.UNKNOWN_REF, f"node {node.id} is not an empty branch"
            )
        act = BlockNode(
            model.next_id, NodeKind.ACTIVITY, label=label, condition=node.condition
        )
        root, _ = _rewrite(model.root, node.id, lambda n: act)
        return ProcessModel(root=root, next_id=model.next_id + 1)
    node = _require(model.find(position.node), position.node)
    if node.kind in (NodeKind.SKIP, NodeKind.SEQUENCE):
        raise PatternError(
            PatternError.PRECONDITION_VIOLATED,
            f"cannot insert beside a {node.kind.value}; use a gap or branch position",
        )
    parent = model.parent_map().get(node.id)
    if parent is not None and parent.kind is NodeKind.SEQUENCE:
        raise PatternError(
            PatternError.PRECONDITION_VIOLATED,
            "node sits in a sequence; use a gap position",
        )
    act = BlockNode(model.next_id, NodeKind.ACTIVITY, label=label)
    inner = clear_branch(node)
    pair = (act, inner) if position.side == "before" else (inner, act)
    wrapper = BlockNode(
        model.next_id + 1, NodeKind.SEQUENCE,
        condition=branch_condition_of(node)
        if parent is not None and parent.kind is NodeKind.CONDITIONAL
        else None,
        children=pair,
    )
    root, _ = _rewrite(model.root, node.id, lambda n: wrapper)
    return ProcessModel(root=root, next_id=model.next_id + 2)


def _apply_parallel_insert(model: ProcessModel, inst: PatternInstance) -> ProcessModel:
    label = inst.label
    if not label:
        raise PatternError(PatternError.PRECONDITION_VIOLATED, "label must be non-empty")
    target = _require(model.find(inst.target) if inst.target is not None else None, inst.target)
    _check_fragment_target(model, target)
    parent = model.parent_map().get(target.id)
    if parent is not None and parent.kind is NodeKind.PARALLEL:
        act = BlockNode(model.next_id, NodeKind.ACTIVITY, label=label)
        root, _ = _rewrite(
            model.root, parent.id, lambda n: replace(n, children=n.children + (act,))
        )
        return ProcessModel(root=root, next_id=model.next_id + 1)
    act = BlockNode(model.next_id, NodeKind.ACTIVITY, label=label)
    guard = (
        branch_condition_of(target)
        if parent is not None and parent.kind is NodeKind.CONDITIONAL
        else None
    )
    wrapper = BlockNode(
        model.next_id + 1, NodeKind.PARALLEL, condition=guard,
        children=(clear_branch(target), act),
    )
    root, _ = _rewrite(model.root, target.id, lambda n: wrapper)
    if target.kind is NodeKind.SEQUENCE and len(target.children) == 1:
        return _repair_model(root, model.root.id, model.next_id + 2)
    return ProcessModel(root=root, next_id=model.next_id + 2)


def _apply_delete(model: ProcessModel, inst: PatternInstance) -> ProcessModel:
    target = _require(model.find(inst.target) if inst.target is not None else None, inst.target)
    if target.id == model.root.id:
        if is_empty(model):
            raise PatternError(
                PatternError.PRECONDITION_VIOLATED, "the empty model has nothing to delete"
            )
        return ProcessModel(
            root=BlockNode(model.root.id, NodeKind.SEQUENCE), next_id=model.next_id
        )
    parent = model.parent_map()[target.id]
    if parent.kind is NodeKind.CONDITIONAL and target.kind is not NodeKind.SKIP:
        skip = BlockNode(
            model.next_id, NodeKind.SKIP, condition=branch_condition_of(target)
        )
        root, _ = _rewrite(model.root, target.id, lambda n: skip)
        return _repair_model(root, model.root.id, model.next_id + 1)
    root, _ = _rewrite(model.root, target.id, lambda n: None)
    if root is None:  # removed sole content directly under the root
        root = BlockNode(model.root.id, NodeKind.SEQUENCE)
    return _repair_model(root, model.root.id, model.next_id)


def _embed_target(model: ProcessModel, inst: PatternInstance) -> tuple[BlockNode, BlockNode | None]:
    target = _require(model.find(inst.target) if inst.target is not None else None, inst.target)
    _check_fragment_target(model, target)
    return target, model.parent_map().get(target.id)


def _apply_embed_in_loop(model: ProcessModel, inst: PatternInstance) -> ProcessModel:
    target, parent = _embed_target(model, inst)
    if (
        parent is not None
        and parent.kind is NodeKind.LOOP
        and parent.condition == inst.condition
    ):
        raise PatternError(
            PatternError.PRECONDITION_VIOLATED,
            "target is already embedded in a loop with these parameters",
        )
    in_branch = parent is not None and parent.kind is NodeKind.CONDITIONAL
    wrapper = BlockNode(
        model.next_id, NodeKind.LOOP, condition=inst.condition,
        branch_condition=branch_condition_of(target) if in_branch else None,
        children=(clear_branch(target),),
    )
    root, _ = _rewrite(model.root, target.id, lambda n: wrapper)
    if target.kind is NodeKind.SEQUENCE and len(target.children) == 1:
        return _repair_model(root, model.root.id, model.next_id + 1)
    return ProcessModel(root=root, next_id=model.next_id + 1)


def _apply_embed_in_conditional(model: ProcessModel, inst: PatternInstance) -> ProcessModel:
    target, parent = _embed_target(model, inst)
    if (
        parent is not None
        and parent.kind is NodeKind.CONDITIONAL
        and len(parent.children) == 2
        and branch_condition_of(target) == inst.condition
    ):
        sibling = next(c for c in parent.children if c.id != target.id)
        if sibling.kind is NodeKind.SKIP and sibling.condition is None:
            raise PatternError(
                PatternError.PRECONDITION_VIOLATED,
                "target is already embedded in a conditional with these parameters",
            )
    in_branch = parent is not None and parent.kind is NodeKind.CONDITIONAL
    guard = branch_condition_of(target) if in_branch else None
    skip = BlockNode(model.next_id, NodeKind.SKIP)
    inner = as_branch(clear_branch(target), inst.condition)
    wrapper = BlockNode(
        model.next_id + 1, NodeKind.CONDITIONAL, condition=guard,
        children=(inner, skip),
    )
    root, _ = _rewrite(model.root, target.id, lambda n: wrapper)
    return ProcessModel(root=root, next_id=model.next_id + 2)


def _resolve_update_slot(
    model: ProcessModel, node: BlockNode, slot: str | None
) -> tuple[str, str | None]:
    """Returns (slot, current value); raises PatternError on bad refs."""
    parent = model.parent_map().get(node.id)
    in_branch = parent is not None and parent.kind is NodeKind.CONDITIONAL
    if slot == "loop":
        if node.kind is not NodeKind.LOOP:
            raise PatternError(
                PatternError.PRECONDITION_VIOLATED, f"node {node.id} is not a loop"
            )
        return "loop", node.condition
    if slot == "branch":
        if not in_branch:
            raise PatternError(
                PatternError.PRECONDITION_VIOLATED,
                f"node {node.id} is not a conditional branch",
            )
        return "branch", branch_condition_of(node)
    if slot is not None:
        raise PatternError(PatternError.UNKNOWN_REF, f"unknown slot {slot!r}")
    if node.kind is NodeKind.LOOP:
        return "loop", node.condition
    if in_branch:
        return "branch", branch_condition_of(node)
    raise PatternError(
        PatternError.PRECONDITION_VIOLATED,
        f"node {node.id} is neither a conditional branch nor a loop",
    )


def _apply_update_condition(model: ProcessModel, inst: PatternInstance) -> ProcessModel:
    node = _require(model.find(inst.target) if inst.target is not None else None, inst.target)
    slot, current = _resolve_update_slot(model, node, inst.slot)
    if current == inst.condition:
        raise PatternError(
            PatternError.PRECONDITION_VIOLATED, "condition already has that value"
        )
    if slot == "loop":
        root, _ = _rewrite(model.root, node.id, lambda n: replace(n, condition=inst.condition))
    else:
        root, _ = _rewrite(model.root, node.id, lambda n: as_branch(n, inst.condition))
    return ProcessModel(root=root, next_id=model.next_id)


_APPLIERS = {
    PatternKind.SERIAL_INSERT: _apply_serial_insert,
    PatternKind.PARALLEL_INSERT: _apply_parallel_insert,
    PatternKind.DELETE_FRAGMENT: _apply_delete,
    PatternKind.EMBED_IN_LOOP: _apply_embed_in_loop,
    PatternKind.EMBED_IN_CONDITIONAL: _apply_embed_in_conditional,
    PatternKind.UPDATE_CONDITION: _apply_update_condition,
}


def apply_pattern(
    model: ProcessModel, inst: PatternInstance, *, _validate: bool = True
) -> ProcessModel:
    """Apply one change pattern; raises PatternError and leaves model unchanged."""
    result = _APPLIERS[inst.kind](model, inst)
    if _validate:
        validate(result)
    return result


# --------------------------------------------------------------------------
# Enumeration
# --------------------------------------------------------------------------


def insert_positions(model: ProcessModel) -> list[Position]:
    """All distinct serial-insert positions in the model."""
    positions: list[Position] = []
    parents = model.parent_map()
    for node in model.nodes():
        if node.kind is NodeKind.SEQUENCE:
            positions.extend(Gap(node.id, k) for k in range(len(node.children) + 1))
            continue
        if node.kind is NodeKind.SKIP:
            positions.append(IntoSkip(node.id))
            continue
        parent = parents.get(node.id)
        if parent is None or parent.kind is not NodeKind.SEQUENCE:
            positions.append(Beside(node.id, "before"))
            positions.append(Beside(node.id, "after"))
    return positions


def fragment_targets(model: ProcessModel) -> list[BlockNode]:
    """All nodes addressable as SESE fragments (excludes skips, empty root)."""
    return [
        n
        for n in model.nodes()
        if n.kind is not NodeKind.SKIP
        and not (n.kind is NodeKind.SEQUENCE and not n.children)
    ]


def applicable_patterns(
    model: ProcessModel,
    alphabet: Iterable[str] | None = None,
    *,
    conditions: Iterable[str] = (),
) -> list[PatternInstance]:
    """Every pattern instance that would apply successfully, sorted.

    Insert labels come from ``alphabet`` (no inserts are enumerated without
    one). Embeds are enumerated with an unset condition; condition values
    (from ``conditions``) enter through UPDATE_CONDITION instances, matching
    the tool flow where conditions are set as a separate step.
    """
    out: list[PatternInstance] = []
    labels = sorted(set(alphabet)) if alphabet is not None else []
    parents = model.parent_map()
    fragments = fragment_targets(model)
    positions = insert_positions(model)

    for label in labels:
        out.extend(
            PatternInstance(PatternKind.SERIAL_INSERT, label=label, position=p)
            for p in positions
        )
        out.extend(
            PatternInstance(PatternKind.PARALLEL_INSERT, label=label, target=f.id)
            for f in fragments
        )

    if not is_empty(model):
        out.extend(
            PatternInstance(PatternKind.DELETE_FRAGMENT, target=n.id)
            for n in model.nodes()
        )

    for f in fragments:
        parent = parents.get(f.id)
        if not (parent is not None and parent.kind is NodeKind.LOOP and parent.condition is None):
            out.append(PatternInstance(PatternKind.EMBED_IN_LOOP, target=f.id))
        blocked = False
        if (
            parent is not None
            and parent.kind is NodeKind.CONDITIONAL
            and len(parent.children) == 2
            and branch_condition_of(f) is None
        ):
            sibling = next(c for c in parent.children if c.id != f.id)
            blocked = sibling.kind is NodeKind.SKIP and sibling.condition is None
        if not blocked:
            out.append(PatternInstance(PatternKind.EMBED_IN_CONDITIONAL, target=f.id))

    vocabulary: list[str | None] = [None] + sorted(set(conditions))
    for node in model.nodes():
        slots: list[tuple[str, str | None]] = []
        if node.kind is NodeKind.LOOP:
            slots.append(("loop", node.condition))
        parent = parents.get(node.id)
        if parent is not None and parent.kind is NodeKind.CONDITIONAL:
            slots.append(("branch", branch_condition_of(node)))
        for slot, current in slots:
            for value in vocabulary:
                if value == current:
                    continue
                out.append(
                    PatternInstance(
                        PatternKind.UPDATE_CONDITION,
                        target=node.id,
                        condition=value,
                        slot=slot,
                    )
                )
    out.sort(key=PatternInstance.sort_key)
    return out


# --------------------------------------------------------------------------
# Primitive expansion
# --------------------------------------------------------------------------


def _edge_sort_key(edge) -> tuple:
    return (edge.src, edge.dst, edge.condition or "")


def graph_delta(before: FlatGraph, after: FlatGraph) -> list[Primitive]:
    """Minimal primitive list transforming `before` into `after` exactly."""
    removed_edges = set(before.edges - after.edges)
    added_edges = set(after.edges - before.edges)
    removed_node_ids = before.nodes.keys() - after.nodes.keys()
    added_node_ids = after.nodes.keys() - before.nodes.keys()

    updates: list[Primitive] = []
    for removed in sorted(removed_edges, key=_edge_sort_key):
        endpoint = (removed.src, removed.dst)
        if removed.src in removed_node_ids or removed.dst in removed_node_ids:
            continue
        before_count = sum(1 for e in before.edges if (e.src, e.dst) == endpoint)
        after_count = sum(1 for e in after.edges if (e.src, e.dst) == endpoint)
        if before_count != 1 or after_count != 1:
            continue
        added = [e for e in added_edges if (e.src, e.dst) == endpoint]
        if len(added) != 1:
            continue
        updates.append(
            Primitive(
                PrimitiveOp.UPDATE_EDGE_CONDITION,
                src=removed.src, dst=removed.dst, condition=added[0].condition,
            )
        )
        removed_edges.discard(removed)
        added_edges.discard(added[0])

    prims: list[Primitive] = []
    prims.extend(
        Primitive(PrimitiveOp.DELETE_EDGE, src=e.src, dst=e.dst, condition=e.condition)
        for e in sorted(removed_edges, key=_edge_sort_key)
    )
    prims.extend(
        Primitive(PrimitiveOp.DELETE_NODE, node=before.nodes[nid])
        for nid in sorted(removed_node_ids)
    )
    prims.extend(
        Primitive(PrimitiveOp.ADD_NODE, node=after.nodes[nid])
        for nid in sorted(added_node_ids)
    )
    prims.extend(
        Primitive(PrimitiveOp.ADD_EDGE, src=e.src, dst=e.dst, condition=e.condition)
        for e in sorted(added_edges, key=_edge_sort_key)
    )
    prims.extend(updates)
    return prims


def expand_to_primitives(model: ProcessModel, inst: PatternInstance) -> list[Primitive]:
    """Primitive edit script realizing the pattern on the flat-graph view."""
    before = to_graph(model)
    after = to_graph(apply_pattern(model, inst))
    return graph_delta(before, after)


# --------------------------------------------------------------------------
# Deterministic construction (used by invert and by distance certificates)
# --------------------------------------------------------------------------


class BuilderUnsupported(UnsupportedStructure):
    """The target lies outside the pattern-constructible class."""


def _first_branch_index(children: tuple[BlockNode, ...]) -> int:
    for i, child in enumerate(children):
        if _needs_scaffold(child):
            return i
    return 0


def _needs_scaffold(sub: BlockNode) -> bool:
    """Whether extending this fragment around a bare lead activity would hit
    a parallel block before any wrapper shields the lead (the descent mirrors
    the order in which `extend` completes inner structure)."""
    while True:
        kind = sub.kind
        if kind is NodeKind.PARALLEL:
            return True
        if kind in (NodeKind.SEQUENCE, NodeKind.LOOP):
            sub = sub.children[0]
        elif kind is NodeKind.CONDITIONAL:
            nxt = next((c for c in sub.children if c.kind is not NodeKind.SKIP), None)
            if nxt is None:
                return False
            sub = nxt
        else:
            return False


def _lead_activity(sub: BlockNode) -> BlockNode:
    while sub.kind is not NodeKind.ACTIVITY:
        if sub.kind is NodeKind.SEQUENCE:
            sub = sub.children[0]
        elif sub.kind is NodeKind.LOOP:
            sub = sub.children[0]
        elif sub.kind is NodeKind.CONDITIONAL:
            sub = next(c for c in sub.children if c.kind is not NodeKind.SKIP)
        elif sub.kind is NodeKind.PARALLEL:
            sub = sub.children[_first_branch_index(sub.children)]
        else:
            raise BuilderUnsupported(f"cannot build around kind {sub.kind!r}")
    return sub


def _chunk_of(sub: BlockNode) -> tuple[BlockNode, tuple[BlockNode, ...]]:
    if sub.kind is NodeKind.SEQUENCE:
        return sub.children[0], sub.children[1:]
    return sub, ()


class _Builder:
    """Emits a pattern sequence constructing a target subtree.

    The construction is inside-out: inner blocks are completed before outer
    wrappers embed them, so embed idempotence guards never fire. Parallel
    branches beyond the first start from a bare activity; branches whose head
    chunk is itself parallel are built inside a temporary conditional
    scaffold that is deleted afterwards.
    """

    def __init__(self, model: ProcessModel):
        self.sim = model
        self.out: list[PatternInstance] = []

    def emit(self, inst: PatternInstance) -> None:
        self.sim = apply_pattern(self.sim, inst)
        self.out.append(inst)

    def _after(self, anchor_id: int) -> Position:
        parent = self.sim.parent_map().get(anchor_id)
        if parent is not None and parent.kind is NodeKind.SEQUENCE:
            idx = [c.id for c in parent.children].index(anchor_id)
            return Gap(parent.id, idx + 1)
        return Beside(anchor_id, "after")

    def build(self, sub: BlockNode, place: Position) -> int:
        """Build `sub` at `place`; returns the anchor node id of the built form
        (for sequences, the root of the last top-level element)."""
        kind = sub.kind
        if kind is NodeKind.ACTIVITY:
            act_id = self.sim.next_id
            self.emit(
                PatternInstance(PatternKind.SERIAL_INSERT, label=sub.label, position=place)
            )
            return act_id
        if kind is NodeKind.SKIP:
            raise BuilderUnsupported("cannot build a bare skip")
        if kind is NodeKind.SEQUENCE:
            if not sub.children:
                raise BuilderUnsupported("cannot build an empty sequence")
            anchor = self.build(sub.children[0], place)
            for child in sub.children[1:]:
                anchor = self.build(child, self._after(anchor))
            return anchor
        if kind is NodeKind.LOOP:
            chunk, rest = _chunk_of(sub.children[0])
            r = self.build(chunk, place)
            loop_id = self.sim.next_id
            self.emit(PatternInstance(PatternKind.EMBED_IN_LOOP, target=r))
            anchor = r
            for child in rest:
                anchor = self.build(child, self._after(anchor))
            if sub.condition is not None:
                self.emit(
                    PatternInstance(
                        PatternKind.UPDATE_CONDITION,
                        target=loop_id, condition=sub.condition, slot="loop",
                    )
                )
            return loop_id
        if kind is NodeKind.CONDITIONAL:
            return self._build_conditional(sub, lambda chunk: self.build(chunk, place))
        if kind is NodeKind.PARALLEL:
            first_idx = _first_branch_index(sub.children)
            first = sub.children[first_idx]
            others = [c for i, c in enumerate(sub.children) if i != first_idx]
            chunk, rest = _chunk_of(first)
            r1 = self.build(chunk, place)
            return self._finish_parallel(sub, r1, rest, others)
        raise BuilderUnsupported(f"cannot build kind {kind!r}")  # pragma: no cover

    def extend(self, sub: BlockNode, lead_id: int) -> int:
        """Complete `sub` around its already-placed lead activity."""
        kind = sub.kind
        if kind is NodeKind.ACTIVITY:
            return lead_id
        if kind is NodeKind.SEQUENCE:
            anchor = self.extend(sub.children[0], lead_id)
            for child in sub.children[1:]:
                anchor = self.build(child, self._after(anchor))
            return anchor
        if kind is NodeKind.LOOP:
            chunk, rest = _chunk_of(sub.children[0])
            r = self.extend(chunk, lead_id)
            loop_id = self.sim.next_id
            self.emit(PatternInstance(PatternKind.EMBED_IN_LOOP, target=r))
            anchor = r
            for child in rest:
                anchor = self.build(child, self._after(anchor))
            if sub.condition is not None:
                self.emit(
                    PatternInstance(
                        PatternKind.UPDATE_CONDITION,
                        target=loop_id, condition=sub.condition, slot="loop",
                    )
                )
            return loop_id
        if kind is NodeKind.CONDITIONAL:
            return self._build_conditional(sub, lambda chunk: self.extend(chunk, lead_id))
        if kind is NodeKind.PARALLEL:
            first_idx = _first_branch_index(sub.children)
            first = sub.children[first_idx]
            others = [c for i, c in enumerate(sub.children) if i != first_idx]
            chunk, rest = _chunk_of(first)
            r1 = self.extend(chunk, lead_id)
            return self._finish_parallel(sub, r1, rest, others)
        raise BuilderUnsupported(f"cannot extend kind {kind!r}")  # pragma: no cover

    def _finish_parallel(
        self,
        sub: BlockNode,
        r1: int,
        first_rest: tuple[BlockNode, ...],
        others: list[BlockNode],
    ) -> int:
        if not others:
            raise BuilderUnsupported("parallel block needs at least two branches")
        branch_leads: list[tuple[BlockNode, int, bool]] = []
        and_id: int | None = None
        for branch in others:
            lead = _lead_activity(branch)
            act_id = self.sim.next_id
            self.emit(
                PatternInstance(PatternKind.PARALLEL_INSERT, label=lead.label, target=r1)
            )
            if and_id is None:
                parent = self.sim.parent_map()[r1]
                and_id = parent.id
            branch_leads.append((branch, act_id, _needs_scaffold(branch)))
        for branch, lead_id, scaffolded in branch_leads:
            if scaffolded:
                skip_id = self.sim.next_id
                self.emit(
                    PatternInstance(PatternKind.EMBED_IN_CONDITIONAL, target=lead_id)
                )
                self.extend(branch, lead_id)
                self.emit(PatternInstance(PatternKind.DELETE_FRAGMENT, target=skip_id))
            else:
                self.extend(branch, lead_id)
        anchor = r1
        for child in first_rest:
            anchor = self.build(child, self._after(anchor))
        assert and_id is not None
        return and_id

    def _build_conditional(self, sub: BlockNode, build_chunk) -> int:
        if len(sub.children) != 2:
            raise BuilderUnsupported(
                f"conditional with {len(sub.children)} branches is not constructible"
            )
        primary = next((c for c in sub.children if c.kind is not NodeKind.SKIP), None)
        if primary is None:
            raise BuilderUnsupported("conditional with only skip branches")
        secondary = next(c for c in sub.children if c.id != primary.id)
        chunk, rest = _chunk_of(primary)
        r = build_chunk(chunk)
        skip_id = self.sim.next_id
        xor_id = self.sim.next_id + 1
        self.emit(PatternInstance(PatternKind.EMBED_IN_CONDITIONAL, target=r))
        anchor = r
        for child in rest:
            anchor = self.build(child, self._after(anchor))
        if secondary.kind is not NodeKind.SKIP:
            chunk2, rest2 = _chunk_of(secondary)
            anchor2 = self.build(chunk2, IntoSkip(skip_id))
            for child in rest2:
                anchor2 = self.build(child, self._after(anchor2))
        xor_node = self.sim.find(xor_id)
        assert xor_node is not None
        primary_root = secondary_root = None
        for child in xor_node.children:
            if any(n.id == r for n in child.walk()):
                primary_root = child
            else:
                secondary_root = child
        assert primary_root is not None and secondary_root is not None
        for branch_spec, branch_root in (
            (primary, primary_root),
            (secondary, secondary_root),
        ):
            guard = branch_condition_of(branch_spec)
            if guard is not None:
                self.emit(
                    PatternInstance(
                        PatternKind.UPDATE_CONDITION,
                        target=branch_root.id, condition=guard, slot="branch",
                    )
                )
        return xor_id


def construction_instances(
    target: ProcessModel, *, start: ProcessModel | None = None,
    anchor: Position | None = None, subtree: BlockNode | None = None,
) -> tuple[list[PatternInstance], ProcessModel]:
    """Pattern sequence constructing a model (or a subtree at an anchor).

    Without `start`, builds the canonical form of `target` from the empty
    model. Raises BuilderUnsupported for shapes outside the constructible
    class (e.g. conditionals with three or more branches).
    """
    if start is None:
        sim = new_empty()
        spec = canonicalize(target).model.root
        place: Position = Gap(sim.root.id, 0)
    else:
        sim = start
        assert anchor is not None and subtree is not None
        spec = subtree
        place = anchor
    builder = _Builder(sim)
    if spec.kind is NodeKind.SEQUENCE and not spec.children:
        return [], builder.sim
    builder.build(spec, place)
    return builder.out, builder.sim


# --------------------------------------------------------------------------
# Inversion
# --------------------------------------------------------------------------


def _restore_plan(current: ProcessModel, goal: ProcessModel) -> list[PatternInstance]:
    """Instances transforming `current` back into canonical(`goal`).

    `current` is `goal` minus one deleted subtree (plus deletion repairs).
    Surgical single-step restores cover the common cases; anything that
    cascaded through block collapses falls back to rebuilding from scratch.
    """
    goal_ids = {n.id for n in goal.nodes()}
    current_ids = {n.id for n in current.nodes()}
    missing = goal_ids - current_ids
    extra = current_ids - goal_ids

    if missing:
        goal_parents = goal.parent_map()
        roots = [
            nid for nid in missing
            if goal_parents.get(nid) is None or goal_parents[nid].id not in missing
        ]
        if len(roots) == 1:
            victim = goal.find(roots[0])
            assert victim is not None
            parent = goal_parents.get(victim.id)
            if parent is not None and not extra and parent.id in current_ids:
                # Gap restore: parent sequence survived untouched.
                cur_parent = current.find(parent.id)
                goal_sibling_ids = [c.id for c in parent.children if c.id != victim.id]
                if (
                    parent.kind is NodeKind.SEQUENCE
                    and cur_parent is not None
                    and [c.id for c in cur_parent.children] == goal_sibling_ids
                ):
                    idx = [c.id for c in parent.children].index(victim.id)
                    instances, final = construction_instances(
                        goal, start=current, anchor=Gap(parent.id, idx), subtree=victim,
                    )
                    if canonical_key(final) == canonical_key(goal):
                        return instances
            if parent is not None and len(extra) == 1 and parent.id in current_ids:
                # Branch restore: the victim branch became a fresh skip.
                skip_id = next(iter(extra))
                skip_node = current.find(skip_id)
                cur_parent = current.find(parent.id)
                expected = [
                    skip_id if c.id == victim.id else c.id for c in parent.children
                ]
                if (
                    parent.kind is NodeKind.CONDITIONAL
                    and skip_node is not None
                    and skip_node.kind is NodeKind.SKIP
                    and cur_parent is not None
                    and [c.id for c in cur_parent.children] == expected
                ):
                    instances, final = construction_instances(
                        goal, start=current, anchor=IntoSkip(skip_id), subtree=victim,
                    )
                    if canonical_key(final) == canonical_key(goal):
                        return instances

    # Fallback: clear the model and rebuild the goal outright.
    plan: list[PatternInstance] = []
    sim = current
    if not is_empty(sim):
        wipe = PatternInstance(PatternKind.DELETE_FRAGMENT, target=sim.root.id)
        sim = apply_pattern(sim, wipe)
        plan.append(wipe)
    spec = canonicalize(goal).model.root
    if spec.kind is NodeKind.SEQUENCE and not spec.children:
        return plan
    rebuilt, final = construction_instances(
        goal, start=sim, anchor=Gap(sim.root.id, 0), subtree=spec
    )
    if canonical_key(final) != canonical_key(goal):  # pragma: no cover - guarded by tests
        raise UnsupportedStructure("goal model is outside the constructible class")
    return plan + rebuilt


def invert(model: ProcessModel, inst: PatternInstance) -> list[PatternInstance]:
    """Instances that, applied to apply_pattern(model, inst), restore the model
    up to canonical equality."""
    kind = inst.kind
    if kind in (PatternKind.SERIAL_INSERT, PatternKind.PARALLEL_INSERT):
        apply_pattern(model, inst)  # verify preconditions
        return [PatternInstance(PatternKind.DELETE_FRAGMENT, target=model.next_id)]
    if kind is PatternKind.EMBED_IN_CONDITIONAL:
        apply_pattern(model, inst)
        return [PatternInstance(PatternKind.DELETE_FRAGMENT, target=model.next_id)]
    if kind is PatternKind.UPDATE_CONDITION:
        node = _require(
            model.find(inst.target) if inst.target is not None else None, inst.target
        )
        slot, current = _resolve_update_slot(model, node, inst.slot)
        apply_pattern(model, inst)
        return [
            PatternInstance(
                PatternKind.UPDATE_CONDITION,
                target=node.id, condition=current, slot=slot,
            )
        ]
    if kind is PatternKind.EMBED_IN_LOOP:
        loop_id = model.next_id
        after = apply_pattern(model, inst)
        unwrap = PatternInstance(PatternKind.DELETE_FRAGMENT, target=loop_id)
        stripped = apply_pattern(after, unwrap)
        return [unwrap] + _restore_plan(stripped, model)
    if kind is PatternKind.DELETE_FRAGMENT:
        after = apply_pattern(model, inst)
        return _restore_plan(after, model)
    raise PatternError(PatternError.UNKNOWN_REF, f"unknown kind {kind!r}")  # pragma: no cover
