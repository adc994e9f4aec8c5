"""Shared fixtures: tree-building helpers and random model/walk generators."""

from __future__ import annotations

import random

import pytest

from patternbench.model import (
    BlockNode,
    NodeKind,
    ProcessModel,
    new_empty,
    validate,
)
from patternbench.patterns import (
    PatternInstance,
    PatternKind,
    applicable_patterns,
    apply_pattern,
)

# ---------------------------------------------------------------------------
# Tree DSL
# ---------------------------------------------------------------------------

_ids = iter(range(10_000, 10_000_000))


def act(label: str, condition: str | None = None) -> BlockNode:
    return BlockNode(next(_ids), NodeKind.ACTIVITY, label=label, condition=condition)


def skip(condition: str | None = None) -> BlockNode:
    return BlockNode(next(_ids), NodeKind.SKIP, condition=condition)


def seq(*children: BlockNode, condition: str | None = None) -> BlockNode:
    return BlockNode(
        next(_ids), NodeKind.SEQUENCE, condition=condition, children=tuple(children)
    )


def par(*children: BlockNode, condition: str | None = None) -> BlockNode:
    return BlockNode(
        next(_ids), NodeKind.PARALLEL, condition=condition, children=tuple(children)
    )


def xor(*children: BlockNode, condition: str | None = None) -> BlockNode:
    return BlockNode(
        next(_ids), NodeKind.CONDITIONAL, condition=condition, children=tuple(children)
    )


def loop(
    body: BlockNode, condition: str | None = None, branch_condition: str | None = None
) -> BlockNode:
    return BlockNode(
        next(_ids), NodeKind.LOOP, condition=condition,
        branch_condition=branch_condition, children=(body,),
    )


def model(root: BlockNode) -> ProcessModel:
    renumbered = _renumber(root, iter(range(1_000_000)))
    m = ProcessModel(root=renumbered, next_id=1_000_000 + _count(renumbered))
    validate(m)
    return m


def _renumber(node: BlockNode, counter) -> BlockNode:
    node_id = 1_000_000 + next(counter)
    return BlockNode(
        node_id, node.kind, label=node.label, condition=node.condition,
        branch_condition=node.branch_condition,
        children=tuple(_renumber(c, counter) for c in node.children),
    )


def _count(node: BlockNode) -> int:
    return sum(1 for _ in node.walk())


# ---------------------------------------------------------------------------
# Random walks
# ---------------------------------------------------------------------------

DEFAULT_ALPHABET = ("A", "B", "C", "D")
DEFAULT_CONDITIONS = ("p", "q")


def random_walk(
    rng: random.Random,
    steps: int,
    alphabet=DEFAULT_ALPHABET,
    conditions=DEFAULT_CONDITIONS,
    start: ProcessModel | None = None,
) -> tuple[ProcessModel, list[PatternInstance]]:
    """Apply `steps` uniformly chosen applicable patterns from the start model."""
    state = start or new_empty()
    taken: list[PatternInstance] = []
    for _ in range(steps):
        choices = applicable_patterns(state, alphabet, conditions=conditions)
        if not choices:
            break
        inst = rng.choice(choices)
        state = apply_pattern(state, inst)
        taken.append(inst)
    return state, taken


def random_model(rng: random.Random, max_steps: int = 12, **kwargs) -> ProcessModel:
    state, _ = random_walk(rng, rng.randint(0, max_steps), **kwargs)
    return state


def random_build_walk(
    rng: random.Random,
    steps: int,
    alphabet=DEFAULT_ALPHABET,
    conditions=DEFAULT_CONDITIONS,
    start: ProcessModel | None = None,
) -> ProcessModel:
    """Random walk without deletes (yields targets reachable monotonically)."""
    state = start or new_empty()
    for _ in range(steps):
        choices = [
            i
            for i in applicable_patterns(state, alphabet, conditions=conditions)
            if i.kind is not PatternKind.DELETE_FRAGMENT
        ]
        if not choices:
            break
        state = apply_pattern(state, rng.choice(choices))
    return state


@pytest.fixture
def rng() -> random.Random:
    return random.Random(0xBEEF)
