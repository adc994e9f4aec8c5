import random

import pytest

from patternbench.errors import PatternError
from patternbench.graph import apply_primitive, to_graph, from_graph
from patternbench.model import (
    NodeKind,
    activities,
    canonical_key,
    canonicalize,
    canonically_equal,
    new_empty,
)
from patternbench.patterns import (
    Beside,
    Gap,
    IntoSkip,
    PatternInstance,
    PatternKind,
    applicable_patterns,
    apply_pattern,
    construction_instances,
    expand_to_primitives,
    instance_from_doc,
    instance_to_doc,
    invert,
)

from .conftest import act, loop, model, par, random_model, random_walk, seq, skip, xor
from .oracles import graphs_isomorphic


def inst(kind, **kwargs):
    return PatternInstance(kind, **kwargs)


def find_activity(m, label):
    return next(n for n in m.nodes() if n.kind is NodeKind.ACTIVITY and n.label == label)


# ---------------------------------------------------------------------------
# apply_pattern semantics
# ---------------------------------------------------------------------------


def test_serial_insert_on_empty():
    m = new_empty()
    result = apply_pattern(
        m, inst(PatternKind.SERIAL_INSERT, label="A", position=Gap(0, 0))
    )
    assert activities(result) == {"A": 1}
    assert result.root.kind is NodeKind.SEQUENCE


def test_embed_in_conditional_makes_activity_optional():
    m = model(seq(act("A")))
    a = find_activity(m, "A")
    result = apply_pattern(m, inst(PatternKind.EMBED_IN_CONDITIONAL, target=a.id))
    assert result.root.kind is NodeKind.SEQUENCE
    block = result.root.children[0]
    assert block.kind is NodeKind.CONDITIONAL
    kinds = sorted(c.kind.value for c in block.children)
    assert kinds == ["activity", "skip"]


def test_four_step_choice_construction():
    # insert one activity, embed it in a conditional, insert the second
    # activity into the empty branch, then set the transition condition
    m = new_empty()
    m = apply_pattern(m, inst(PatternKind.SERIAL_INSERT, label="X", position=Gap(0, 0)))
    x = find_activity(m, "X")
    m = apply_pattern(m, inst(PatternKind.EMBED_IN_CONDITIONAL, target=x.id))
    the_skip = next(n for n in m.nodes() if n.kind is NodeKind.SKIP)
    m = apply_pattern(
        m, inst(PatternKind.SERIAL_INSERT, label="Y", position=IntoSkip(the_skip.id))
    )
    m = apply_pattern(
        m,
        inst(PatternKind.UPDATE_CONDITION, target=x.id, condition="c", slot="branch"),
    )
    want = model(xor(act("X", "c"), act("Y")))
    assert canonically_equal(m, want)


def test_delete_only_activity_gives_empty_model():
    m = model(seq(act("A")))
    a = find_activity(m, "A")
    result = apply_pattern(m, inst(PatternKind.DELETE_FRAGMENT, target=a.id))
    assert canonically_equal(result, new_empty())


def test_update_condition_on_sequence_rejected():
    m = model(seq(act("A"), act("B")))
    with pytest.raises(PatternError) as err:
        apply_pattern(
            m, inst(PatternKind.UPDATE_CONDITION, target=m.root.id, condition="c")
        )
    assert err.value.code == PatternError.PRECONDITION_VIOLATED


def test_failed_application_leaves_model_unchanged():
    m = model(seq(act("A")))
    digest = canonicalize(m).digest
    with pytest.raises(PatternError):
        apply_pattern(m, inst(PatternKind.DELETE_FRAGMENT, target=999))
    assert canonicalize(m).digest == digest


def test_parallel_insert_appends_when_parent_is_parallel():
    m = model(par(act("A"), act("B")))
    a = find_activity(m, "A")
    result = apply_pattern(m, inst(PatternKind.PARALLEL_INSERT, label="C", target=a.id))
    assert len(result.root.children) == 3
    assert result.root.kind is NodeKind.PARALLEL


def test_parallel_insert_wraps_otherwise():
    m = model(seq(act("A"), act("B")))
    b = find_activity(m, "B")
    result = apply_pattern(m, inst(PatternKind.PARALLEL_INSERT, label="C", target=b.id))
    assert canonically_equal(result, model(seq(act("A"), par(act("B"), act("C")))))


def test_delete_branch_content_leaves_skip():
    m = model(xor(act("A", "g"), act("B")))
    b = find_activity(m, "B")
    result = apply_pattern(m, inst(PatternKind.DELETE_FRAGMENT, target=b.id))
    assert canonically_equal(result, model(xor(act("A", "g"), skip())))


def test_delete_skip_branch_unwraps_conditional():
    m = model(seq(act("Z"), xor(act("A"), skip())))
    the_skip = next(n for n in m.nodes() if n.kind is NodeKind.SKIP)
    result = apply_pattern(m, inst(PatternKind.DELETE_FRAGMENT, target=the_skip.id))
    assert canonically_equal(result, model(seq(act("Z"), act("A"))))


def test_embed_idempotence_guard():
    m = model(xor(act("A"), skip()))
    a = find_activity(m, "A")
    with pytest.raises(PatternError) as err:
        apply_pattern(m, inst(PatternKind.EMBED_IN_CONDITIONAL, target=a.id))
    assert err.value.code == PatternError.PRECONDITION_VIOLATED
    # a different condition parameter is a different embedding: allowed
    result = apply_pattern(
        m, inst(PatternKind.EMBED_IN_CONDITIONAL, target=a.id, condition="g")
    )
    assert result is not None


def test_loop_embed_transfers_branch_guard():
    m = model(xor(act("A", "g"), act("B")))
    a = find_activity(m, "A")
    result = apply_pattern(
        m, inst(PatternKind.EMBED_IN_LOOP, target=a.id, condition="more")
    )
    branch = next(n for n in result.nodes() if n.kind is NodeKind.LOOP)
    assert branch.condition == "more"
    assert branch.branch_condition == "g"


def test_wire_round_trip(rng):
    for _ in range(200):
        m = random_model(rng)
        for i in applicable_patterns(m, ["A", "B"], conditions=("p",))[:5]:
            assert instance_from_doc(instance_to_doc(i)) == i


# ---------------------------------------------------------------------------
# applicable_patterns
# ---------------------------------------------------------------------------


def test_empty_model_has_exactly_one_instance_per_label():
    out = applicable_patterns(new_empty(), ["A"])
    assert out == [
        PatternInstance(PatternKind.SERIAL_INSERT, label="A", position=Gap(0, 0))
    ]


def test_applicable_on_single_activity_covers_all_kinds():
    m = model(seq(act("A")))
    a = find_activity(m, "A")
    out = applicable_patterns(m, ["B"])
    kinds = {i.kind for i in out}
    assert kinds == {
        PatternKind.SERIAL_INSERT,
        PatternKind.PARALLEL_INSERT,
        PatternKind.DELETE_FRAGMENT,
        PatternKind.EMBED_IN_LOOP,
        PatternKind.EMBED_IN_CONDITIONAL,
    }
    serials = [i for i in out if i.kind is PatternKind.SERIAL_INSERT]
    assert {i.position for i in serials} == {Gap(m.root.id, 0), Gap(m.root.id, 1)}
    assert PatternInstance(PatternKind.PARALLEL_INSERT, label="B", target=a.id) in out
    assert PatternInstance(PatternKind.EMBED_IN_LOOP, target=a.id) in out
    assert PatternInstance(PatternKind.EMBED_IN_CONDITIONAL, target=a.id) in out


def test_every_applicable_instance_succeeds(rng):
    for _ in range(80):
        m = random_model(rng)
        for i in applicable_patterns(m, ["A", "E"], conditions=("p", "z")):
            apply_pattern(m, i)  # must not raise


def _syntactic_instances(m, alphabet, conditions):
    """Every instance expressible in the ref grammar, precondition-blind."""
    out = []
    node_ids = [n.id for n in m.nodes()]
    positions = []
    for n in m.nodes():
        if n.kind is NodeKind.SEQUENCE:
            positions.extend(Gap(n.id, k) for k in range(len(n.children) + 1))
        positions.append(IntoSkip(n.id))
        positions.append(Beside(n.id, "before"))
        positions.append(Beside(n.id, "after"))
    for label in alphabet:
        for p in positions:
            out.append(PatternInstance(PatternKind.SERIAL_INSERT, label=label, position=p))
        for t in node_ids:
            out.append(PatternInstance(PatternKind.PARALLEL_INSERT, label=label, target=t))
    for t in node_ids:
        out.append(PatternInstance(PatternKind.DELETE_FRAGMENT, target=t))
        out.append(PatternInstance(PatternKind.EMBED_IN_LOOP, target=t))
        out.append(PatternInstance(PatternKind.EMBED_IN_CONDITIONAL, target=t))
        for value in list(conditions) + [None]:
            for slot in ("branch", "loop", None):
                out.append(
                    PatternInstance(
                        PatternKind.UPDATE_CONDITION, target=t, condition=value, slot=slot
                    )
                )
    return out


def test_enumeration_matches_brute_force_on_small_models(rng):
    # Precondition-blind application over the whole ref grammar must find
    # exactly the successor set the enumeration promises.
    alphabet = ("A", "B")
    conditions = ("p",)
    for _ in range(25):
        m = random_model(rng, max_steps=6, alphabet=alphabet, conditions=conditions)
        if sum(activities(m).values()) > 4:
            continue
        enumerated = applicable_patterns(m, alphabet, conditions=conditions)
        succeeded = set()
        for i in _syntactic_instances(m, alphabet, conditions):
            try:
                apply_pattern(m, i)
            except PatternError:
                continue
            succeeded.add(_normalize_slot(m, i))
        assert set(enumerated) == succeeded


def _normalize_slot(m, i):
    """Explicit slots that the inference would fill are the same instance."""
    if i.kind is not PatternKind.UPDATE_CONDITION or i.slot is not None:
        return i
    node = m.find(i.target)
    parents = m.parent_map()
    in_branch = i.target in parents and parents[i.target].kind is NodeKind.CONDITIONAL
    if node is not None and node.kind is NodeKind.LOOP:
        slot = "loop"
    elif in_branch:
        slot = "branch"
    else:
        return i
    return PatternInstance(
        PatternKind.UPDATE_CONDITION, target=i.target, condition=i.condition, slot=slot
    )


# ---------------------------------------------------------------------------
# Primitive expansion
# ---------------------------------------------------------------------------


def test_serial_insert_expansion_matches_documented_script():
    m = new_empty()
    prims = expand_to_primitives(
        m, inst(PatternKind.SERIAL_INSERT, label="A", position=Gap(0, 0))
    )
    ops = [p.op.value for p in prims]
    assert ops == ["delete_edge", "add_node", "add_edge", "add_edge"]


def test_embed_in_conditional_expansion_is_constant_size():
    sizes = set()
    for m, target_label in [
        (model(seq(act("A"))), "A"),
        (model(seq(act("Z"), act("A"), act("B"))), "A"),
        (model(par(act("A"), act("B"))), "B"),
    ]:
        t = find_activity(m, target_label)
        prims = expand_to_primitives(m, inst(PatternKind.EMBED_IN_CONDITIONAL, target=t.id))
        sizes.add(len(prims))
    assert sizes == {9}


def test_update_condition_expands_to_single_primitive():
    m = model(xor(act("A"), act("B")))
    a = find_activity(m, "A")
    prims = expand_to_primitives(
        m, inst(PatternKind.UPDATE_CONDITION, target=a.id, condition="g", slot="branch")
    )
    assert [p.op.value for p in prims] == ["update_edge_condition"]


def test_expansion_folds_to_isomorphic_graph(rng):
    for _ in range(120):
        m = random_model(rng)
        choices = applicable_patterns(m, ["A", "B"], conditions=("p",))
        if not choices:
            continue
        i = rng.choice(choices)
        prims = expand_to_primitives(m, i)
        g = to_graph(m)
        for p in prims:
            g = apply_primitive(g, p)
        after = apply_pattern(m, i)
        assert graphs_isomorphic(g, to_graph(after))
        # pattern/primitive coherence through the inverse lowering
        assert canonical_key(from_graph(g)) == canonical_key(after)


# ---------------------------------------------------------------------------
# invert
# ---------------------------------------------------------------------------


def test_invert_serial_insert_is_single_delete():
    m = new_empty()
    i = inst(PatternKind.SERIAL_INSERT, label="A", position=Gap(0, 0))
    inv = invert(m, i)
    assert [x.kind for x in inv] == [PatternKind.DELETE_FRAGMENT]
    after = apply_pattern(m, i)
    assert canonically_equal(apply_pattern(after, inv[0]), m)


def test_invert_update_condition_restores_prior_value():
    m = model(xor(act("A"), act("B")))
    a = find_activity(m, "A")
    i = inst(PatternKind.UPDATE_CONDITION, target=a.id, condition="x>5", slot="branch")
    inv = invert(m, i)
    assert inv[0].condition is None
    after = apply_pattern(m, i)
    assert canonically_equal(apply_pattern(after, inv[0]), m)


def test_invert_round_trip_random(rng):
    trials = 0
    while trials < 400:
        m = random_model(rng, max_steps=10)
        choices = applicable_patterns(m, ["A", "B", "C"], conditions=("p", "q"))
        if not choices:
            continue
        i = rng.choice(choices)
        trials += 1
        inv = invert(m, i)
        state = apply_pattern(m, i)
        for step in inv:
            state = apply_pattern(state, step)
        assert canonically_equal(state, m), (
            f"round trip failed for {i} on {canonicalize(m).digest[:10]}"
        )


# ---------------------------------------------------------------------------
# Correctness by construction
# ---------------------------------------------------------------------------


def test_random_walks_preserve_invariants(rng):
    from patternbench.graph import check_soundness
    from patternbench.model import validate

    for _ in range(40):
        state, _ = random_walk(rng, 12)
        validate(state)
        assert check_soundness(to_graph(state)).sound


def test_transactionality_under_failures(rng):
    m = model(seq(act("A"), xor(act("B"), skip())))
    digest = canonicalize(m).digest
    bad_instances = [
        inst(PatternKind.SERIAL_INSERT, label="", position=Gap(m.root.id, 0)),
        inst(PatternKind.SERIAL_INSERT, label="X", position=Gap(m.root.id, 99)),
        inst(PatternKind.DELETE_FRAGMENT, target=424242),
        inst(PatternKind.UPDATE_CONDITION, target=m.root.id, condition="c"),
    ]
    for i in bad_instances:
        with pytest.raises(PatternError):
            apply_pattern(m, i)
        assert canonicalize(m).digest == digest


def test_construction_builder_round_trips(rng):
    for _ in range(60):
        target = random_model(rng, max_steps=10)
        try:
            instances, final = construction_instances(target)
        except Exception:
            continue
        assert canonically_equal(final, target)
        state = new_empty()
        for i in instances:
            state = apply_pattern(state, i)
        assert canonically_equal(state, target)
