import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patternbench.errors import InvariantViolation, ParseError
from patternbench.model import (
    BlockNode,
    NodeKind,
    ProcessModel,
    activities,
    canonical_key,
    canonicalize,
    canonically_equal,
    conditions,
    deserialize,
    model_to_doc,
    new_empty,
    serialize,
    validate,
)

from .conftest import act, loop, model, par, random_model, seq, skip, xor


def test_new_empty_has_no_activities():
    m = new_empty()
    assert sum(activities(m).values()) == 0
    assert m.root.kind is NodeKind.SEQUENCE
    assert m.root.children == ()


def test_new_empty_deterministic():
    assert canonicalize(new_empty()).digest == canonicalize(new_empty()).digest
    assert canonically_equal(new_empty(), new_empty())


def test_flatten_nested_sequences():
    nested = ProcessModel(
        root=BlockNode(
            0, NodeKind.SEQUENCE,
            children=(
                BlockNode(
                    1, NodeKind.SEQUENCE,
                    children=(act("A"), act("B")),
                ),
                act("C"),
            ),
        ),
        next_id=20_000_000,
    )
    flat = model(seq(act("A"), act("B"), act("C")))
    assert canonicalize(nested).digest == canonicalize(flat).digest


def test_parallel_children_sorted():
    assert canonically_equal(model(par(act("A"), act("B"))), model(par(act("B"), act("A"))))


def test_conditional_children_sorted_by_condition_then_structure():
    m1 = model(xor(act("A", "c2"), act("B", "c1")))
    m2 = model(xor(act("B", "c1"), act("A", "c2")))
    assert canonically_equal(m1, m2)
    # unset conditions sort last
    m3 = canonicalize(model(xor(act("A"), act("B", "c1")))).model
    assert m3.root.children[0].label == "B"


def test_single_child_sequence_collapses():
    wrapped = model(seq(act("A")))
    bare = ProcessModel(root=act("A"), next_id=20_000_000)
    validate(bare)
    assert canonicalize(wrapped).digest == canonicalize(bare).digest


def test_canonicalize_idempotent(rng):
    for _ in range(50):
        m = random_model(rng)
        once = canonicalize(m)
        twice = canonicalize(once.model)
        assert once.digest == twice.digest
        assert once.model == twice.model


def test_skip_branches_preserved_in_canonical_form():
    m = model(xor(act("A"), skip()))
    canon = canonicalize(m).model
    kinds = {c.kind for c in canon.root.children}
    assert NodeKind.SKIP in kinds


def test_validate_rejects_single_child_conditional():
    bad = ProcessModel(
        root=BlockNode(0, NodeKind.CONDITIONAL, children=(act("A"),)),
        next_id=20_000_000,
    )
    with pytest.raises(InvariantViolation):
        validate(bad)


def test_validate_rejects_empty_label():
    bad = ProcessModel(
        root=BlockNode(0, NodeKind.ACTIVITY, label=""), next_id=1
    )
    with pytest.raises(InvariantViolation):
        validate(bad)


def test_validate_rejects_duplicate_ids():
    bad = ProcessModel(
        root=BlockNode(
            0, NodeKind.SEQUENCE,
            children=(BlockNode(1, NodeKind.ACTIVITY, label="A"),
                      BlockNode(1, NodeKind.ACTIVITY, label="B")),
        ),
        next_id=2,
    )
    with pytest.raises(InvariantViolation):
        validate(bad)


def test_validate_rejects_skip_outside_conditional():
    bad = ProcessModel(
        root=BlockNode(
            0, NodeKind.SEQUENCE,
            children=(BlockNode(1, NodeKind.SKIP),),
        ),
        next_id=2,
    )
    with pytest.raises(InvariantViolation):
        validate(bad)


def test_validate_rejects_condition_in_plain_sequence():
    bad = ProcessModel(
        root=BlockNode(
            0, NodeKind.SEQUENCE,
            children=(BlockNode(1, NodeKind.ACTIVITY, label="A", condition="c"),),
        ),
        next_id=2,
    )
    with pytest.raises(InvariantViolation):
        validate(bad)


def test_serialize_empty_model():
    doc = model_to_doc(new_empty())
    assert doc["root"]["kind"] == "sequence"
    assert doc["root"]["children"] == []
    assert doc["format"] == "patternbench-model"


def test_deserialize_rejects_unknown_fields():
    doc = model_to_doc(new_empty())
    doc["root"]["colour"] = "red"
    with pytest.raises(ParseError):
        deserialize(json.dumps(doc))


def test_deserialize_rejects_arity_one_parallel():
    doc = {
        "format": "patternbench-model",
        "version": 1,
        "root": {
            "id": 0,
            "kind": "parallel",
            "children": [
                {"id": 1, "kind": "activity", "label": "A", "children": []}
            ],
        },
    }
    with pytest.raises(InvariantViolation):
        deserialize(json.dumps(doc))


def test_parse_error_carries_location():
    with pytest.raises(ParseError) as err:
        deserialize("{not json")
    assert "line" in str(err.value)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 18))
def test_serialization_round_trip_preserves_canonical_form(seed, steps):
    m = random_model(random.Random(seed), max_steps=steps)
    again = deserialize(serialize(m))
    assert canonicalize(again).digest == canonicalize(m).digest


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_canonical_digest_agrees_with_key(seed):
    m1 = random_model(random.Random(seed))
    m2 = random_model(random.Random(seed + 1))
    same = canonical_key(m1) == canonical_key(m2)
    assert (canonicalize(m1).digest == canonicalize(m2).digest) == same


def test_conditions_multiset_counts_loop_and_branch_guards():
    m = model(
        seq(
            loop(act("A"), condition="r"),
            xor(act("B", "g1"), act("C", "g2")),
        )
    )
    assert conditions(m) == {"r": 1, "g1": 1, "g2": 1}


def test_loop_as_branch_keeps_both_conditions():
    m = model(xor(loop(act("A"), condition="again", branch_condition="go"), act("B")))
    assert conditions(m)["again"] == 1
    assert conditions(m)["go"] == 1
    rt = deserialize(serialize(m))
    assert canonically_equal(rt, m)
