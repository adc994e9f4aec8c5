import pytest

from patternbench.errors import CorruptLog, ParseError
from patternbench.model import activities, canonically_equal, canonicalize, new_empty
from patternbench.patterns import Gap, IntoSkip, PatternInstance, PatternKind
from patternbench.session import (
    ApplyAction,
    LayoutAction,
    PhaseConfig,
    PhaseKind,
    RenameAction,
    SessionLog,
    UndoAction,
    new_log,
    read_log,
    record,
    replay,
    segment_phases,
    write_log,
)

from .conftest import act, model, random_walk, seq, xor


def apply_insert(label, position=None):
    return ApplyAction(
        PatternInstance(
            PatternKind.SERIAL_INSERT, label=label, position=position or Gap(0, 0)
        )
    )


def build_log(actions, gap_ms=1000, alphabet=("A", "B", "X", "Y", "Z")):
    log = new_log("s", "t", alphabet)
    t = 0
    for action in actions:
        t += gap_ms
        log = record(log, action, t)
    return log


def test_replay_zero_is_empty():
    log = build_log([apply_insert("A")])
    assert canonically_equal(replay(log, 0), new_empty())


def test_apply_then_undo_is_empty():
    log = build_log([apply_insert("A"), UndoAction()])
    assert all(e.outcome == "ok" for e in log.events)
    assert canonically_equal(replay(log, 2), new_empty())


def test_record_failed_apply_keeps_state():
    bad = ApplyAction(
        PatternInstance(PatternKind.UPDATE_CONDITION, target=0, condition="c")
    )
    log = build_log([bad])
    assert log.events[0].outcome == "PRECONDITION_VIOLATED"
    assert canonically_equal(replay(log, 1), new_empty())


def test_record_undo_on_empty_log_fails():
    log = build_log([UndoAction()])
    assert log.events[0].outcome == "NOTHING_TO_UNDO"


def test_undo_reverts_only_most_recent_unreverted_apply():
    log = build_log([apply_insert("A"), apply_insert("B", Gap(0, 1)), UndoAction()])
    state = replay(log, 3)
    assert activities(state) == {"A": 1}
    # replay(log + undo, n+1) equals the state before the reverted apply
    assert canonicalize(state).digest == canonicalize(replay(log, 1)).digest


def test_double_undo_walks_back_the_stack():
    log = build_log(
        [apply_insert("A"), apply_insert("B", Gap(0, 1)), UndoAction(), UndoAction()]
    )
    assert canonically_equal(replay(log, 4), new_empty())


def test_rename_changes_label_and_survives_undo_of_later_apply():
    log = build_log(
        [
            apply_insert("A"),
            RenameAction(node=1, label="Renamed"),
            apply_insert("B", Gap(0, 1)),
            UndoAction(),
        ]
    )
    state = replay(log, 4)
    assert activities(state) == {"Renamed": 1}


def test_rename_of_missing_node_records_error():
    log = build_log([RenameAction(node=5, label="X")])
    assert log.events[0].outcome == "UNKNOWN_REF"


def test_replay_prefix_monotone(rng):
    _, walk = random_walk(rng, 10)
    log = build_log([ApplyAction(i) for i in walk])
    digests = [canonicalize(replay(log, k)).digest for k in range(len(log.events) + 1)]
    log2 = build_log([ApplyAction(i) for i in walk])
    digests2 = [canonicalize(replay(log2, k)).digest for k in range(len(log2.events) + 1)]
    assert digests == digests2


def test_log_round_trip(rng):
    _, walk = random_walk(rng, 8)
    actions = [ApplyAction(i) for i in walk]
    actions.insert(2, UndoAction())
    actions.append(LayoutAction('{"x": 1}'))
    log = build_log(actions)
    text = write_log(log)
    again = read_log(text)
    assert again.alphabet == log.alphabet
    assert len(again.events) == len(log.events)
    assert canonicalize(replay(again, len(again.events))).digest == canonicalize(
        replay(log, len(log.events))
    ).digest


def test_read_log_rejects_corrupt_ok_event():
    log = build_log([apply_insert("A")])
    lines = write_log(log).strip().splitlines()
    # tamper: point the recorded-ok insert at a sequence that does not exist
    bad_event = lines[1].replace('"sequence":0', '"sequence":7')
    assert bad_event != lines[1]
    with pytest.raises(CorruptLog):
        read_log("\n".join([lines[0], bad_event]))


def test_read_log_rejects_bad_header():
    with pytest.raises(ParseError):
        read_log('{"format": "something-else", "version": 1}\n')


def test_segment_single_modeling_run():
    log = build_log([apply_insert("A"), apply_insert("B", Gap(0, 1)), UndoAction()])
    segments = segment_phases(log, PhaseConfig(comprehension_gap_ms=10_000))
    assert [s.kind for s in segments] == [PhaseKind.MODELING]
    assert segments[0].start_ms == 0
    assert segments[0].end_ms == log.events[-1].t_ms


def test_segment_comprehension_gap():
    log = new_log("s", "t", ("A", "B"))
    log = record(log, apply_insert("A"), 1000)
    log = record(log, apply_insert("B", Gap(0, 1)), 31_000)
    segments = segment_phases(log, PhaseConfig(comprehension_gap_ms=10_000))
    assert [s.kind for s in segments] == [
        PhaseKind.MODELING,
        PhaseKind.COMPREHENSION,
        PhaseKind.MODELING,
    ]
    # timeline is covered without overlap
    assert segments[0].start_ms == 0
    for before, after in zip(segments, segments[1:]):
        assert before.end_ms == after.start_ms
    assert segments[-1].end_ms == 31_000


def test_segment_reconciliation_run():
    log = build_log(
        [
            apply_insert("A"),
            RenameAction(node=1, label="A2"),
            RenameAction(node=1, label="A3"),
            apply_insert("B", Gap(0, 1)),
        ]
    )
    segments = segment_phases(log)
    assert [s.kind for s in segments] == [
        PhaseKind.MODELING,
        PhaseKind.RECONCILIATION,
        PhaseKind.MODELING,
    ]
    spans = [(s.first_seq, s.last_seq) for s in segments]
    assert spans == [(0, 0), (1, 2), (3, 3)]


def test_segment_initial_idle_counts_as_comprehension():
    log = new_log("s", "t", ("A",))
    log = record(log, apply_insert("A"), 60_000)
    segments = segment_phases(log, PhaseConfig(comprehension_gap_ms=10_000))
    assert [s.kind for s in segments] == [PhaseKind.COMPREHENSION, PhaseKind.MODELING]
    assert segments[0].start_ms == 0
    assert segments[0].end_ms == 60_000


def test_every_event_lies_in_exactly_one_segment(rng):
    _, walk = random_walk(rng, 12)
    log = new_log("s", "t", ("A", "B", "C", "D"))
    t = 0
    for i, inst in enumerate(walk):
        t += 15_000 if i % 5 == 4 else 800
        log = record(log, ApplyAction(inst), t)
        if i % 3 == 0:
            t += 500
            log = record(log, LayoutAction("{}"), t)
    segments = segment_phases(log)
    covered = {}
    for s in segments:
        if s.first_seq is None:
            continue
        for seqno in range(s.first_seq, s.last_seq + 1):
            assert seqno not in covered
            covered[seqno] = s.kind
    assert set(covered) == {e.seq for e in log.events}
