"""Modeling sessions: recorded pattern events, replay, undo, phase segmentation.

A session log is an append-only list of timestamped events. Failed pattern
applications are kept (with their error code) because they matter to the
deviation analysis; UNDO is an explicit event so backtracking stays visible.
Replay folds the OK events from the empty model; an UNDO excludes the most
recent not-yet-reverted APPLY from that fold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Union

from .errors import CorruptLog, ParseError, PatternError
from .model import BlockNode, NodeKind, ProcessModel, new_empty
from .patterns import PatternInstance, apply_pattern, instance_from_doc, instance_to_doc

SESSION_FORMAT = "patternbench-session"
SESSION_VERSION = 1

OUTCOME_OK = "ok"
ERR_NOTHING_TO_UNDO = "NOTHING_TO_UNDO"
ERR_UNKNOWN_REF = PatternError.UNKNOWN_REF
ERR_INVALID_LABEL = "INVALID_LABEL"


@dataclass(frozen=True, slots=True)
class ApplyAction:
    pattern: PatternInstance


@dataclass(frozen=True, slots=True)
class UndoAction:
    pass


@dataclass(frozen=True, slots=True)
class RenameAction:
    node: int
    label: str


@dataclass(frozen=True, slots=True)
class LayoutAction:
    payload: str = "{}"  # opaque JSON payload, kept verbatim


Action = Union[ApplyAction, UndoAction, RenameAction, LayoutAction]


@dataclass(frozen=True, slots=True)
class SessionEvent:
    seq: int
    t_ms: int
    action: Action
    outcome: str  # "ok" or an error code


@dataclass(frozen=True, slots=True)
class SessionLog:
    session_id: str
    task_id: str
    alphabet: tuple[str, ...]
    events: tuple[SessionEvent, ...] = ()


def new_log(session_id: str, task_id: str, alphabet: Iterable[str]) -> SessionLog:
    return SessionLog(session_id=session_id, task_id=task_id, alphabet=tuple(alphabet))


def _apply_rename(model: ProcessModel, action: RenameAction) -> ProcessModel | None:
    """Returns the renamed model, or None if the node is not a renamable activity."""
    node = model.find(action.node)
    if node is None or node.kind is not NodeKind.ACTIVITY:
        return None

    def rewrite(n: BlockNode) -> BlockNode:
        if n.id == action.node:
            return replace(n, label=action.label)
        if not n.children:
            return n
        return replace(n, children=tuple(rewrite(c) for c in n.children))

    return ProcessModel(root=rewrite(model.root), next_id=model.next_id)


def _fold(events: Iterable[SessionEvent], *, strict: bool) -> ProcessModel:
    """Replay OK events from the empty model.

    UNDO removes the latest un-reverted APPLY from the effective set. Renames
    whose node has vanished (possible only after an undo crossed them) are
    skipped silently to keep replay total and deterministic.
    """
    effective: list[SessionEvent] = []
    undo_stack: list[int] = []  # indices into `effective` of un-reverted applies
    for event in events:
        if event.outcome != OUTCOME_OK:
            continue
        if isinstance(event.action, UndoAction):
            if not undo_stack:
                raise CorruptLog(f"event {event.seq}: undo with nothing to revert")
            effective.pop(undo_stack.pop())
            continue
        if isinstance(event.action, ApplyAction):
            undo_stack.append(len(effective))
        effective.append(event)

    model = new_empty()
    for event in effective:
        action = event.action
        if isinstance(action, ApplyAction):
            try:
                model = apply_pattern(model, action.pattern)
            except PatternError as exc:
                raise CorruptLog(
                    f"event {event.seq} marked ok but failed on replay: {exc}"
                ) from exc
        elif isinstance(action, RenameAction):
            renamed = _apply_rename(model, action)
            if renamed is None:
                if strict:
                    raise CorruptLog(
                        f"event {event.seq}: rename of missing activity {action.node}"
                    )
            else:
                model = renamed
        # LayoutAction has no model effect.
    return model


def replay(log: SessionLog, step: int) -> ProcessModel:
    """Model state after the first `step` events (OK events applied)."""
    if not 0 <= step <= len(log.events):
        raise CorruptLog(f"replay step {step} out of range 0..{len(log.events)}")
    return _fold(log.events[:step], strict=False)


def _has_undoable(events: Iterable[SessionEvent]) -> bool:
    depth = 0
    for event in events:
        if event.outcome != OUTCOME_OK:
            continue
        if isinstance(event.action, ApplyAction):
            depth += 1
        elif isinstance(event.action, UndoAction):
            depth -= 1
    return depth > 0


def record(log: SessionLog, action: Action, t_ms: int) -> SessionLog:
    """Append one event; failures are captured in the outcome, never raised."""
    if log.events:
        last = log.events[-1]
        seq = last.seq + 1
        t_ms = max(t_ms, last.t_ms)
    else:
        seq = 0
    state = _fold(log.events, strict=False)
    outcome = OUTCOME_OK
    if isinstance(action, ApplyAction):
        try:
            apply_pattern(state, action.pattern)
        except PatternError as exc:
            outcome = exc.code
    elif isinstance(action, UndoAction):
        if not _has_undoable(log.events):
            outcome = ERR_NOTHING_TO_UNDO
    elif isinstance(action, RenameAction):
        node = state.find(action.node)
        if node is None or node.kind is not NodeKind.ACTIVITY:
            outcome = ERR_UNKNOWN_REF
        elif not action.label:
            outcome = ERR_INVALID_LABEL
    event = SessionEvent(seq=seq, t_ms=t_ms, action=action, outcome=outcome)
    return replace(log, events=log.events + (event,))


# --------------------------------------------------------------------------
# Phase segmentation
# --------------------------------------------------------------------------


class PhaseKind(str, Enum):
    COMPREHENSION = "comprehension"
    MODELING = "modeling"
    RECONCILIATION = "reconciliation"


@dataclass(frozen=True, slots=True)
class PhaseSegment:
    kind: PhaseKind
    start_ms: int
    end_ms: int
    first_seq: int | None = None  # event span; None for empty comprehension gaps
    last_seq: int | None = None


@dataclass(frozen=True, slots=True)
class PhaseConfig:
    comprehension_gap_ms: int = 10_000


def _event_phase(event: SessionEvent) -> PhaseKind:
    if isinstance(event.action, (RenameAction, LayoutAction)):
        return PhaseKind.RECONCILIATION
    return PhaseKind.MODELING


def segment_phases(log: SessionLog, cfg: PhaseConfig | None = None) -> list[PhaseSegment]:
    """Partition the session timeline into comprehension/modeling/reconciliation.

    Inter-event gaps of at least ``comprehension_gap_ms`` become comprehension
    segments; runs of rename/layout events are reconciliation; remaining
    apply/undo runs are modeling. Adjacent same-kind segments are merged.
    """
    cfg = cfg or PhaseConfig()
    if not log.events:
        return []
    segments: list[PhaseSegment] = []
    current_kind: PhaseKind | None = None
    current_start = 0
    first_seq = last_seq = None
    prev_t = 0

    def close(end_ms: int) -> None:
        nonlocal current_kind, first_seq, last_seq
        if current_kind is not None:
            segments.append(
                PhaseSegment(current_kind, current_start, end_ms, first_seq, last_seq)
            )
        current_kind = None
        first_seq = last_seq = None

    for event in log.events:
        gap = event.t_ms - prev_t
        if gap >= cfg.comprehension_gap_ms:
            close(prev_t)
            segments.append(PhaseSegment(PhaseKind.COMPREHENSION, prev_t, event.t_ms))
            current_start = event.t_ms
        kind = _event_phase(event)
        if current_kind is None:
            current_kind = kind
            if not segments:
                current_start = 0
            first_seq = event.seq
        elif kind != current_kind:
            close(prev_t)
            current_kind = kind
            current_start = prev_t
            first_seq = event.seq
        last_seq = event.seq
        prev_t = event.t_ms
    close(prev_t)

    merged: list[PhaseSegment] = []
    for seg in segments:
        if merged and merged[-1].kind == seg.kind:
            prev = merged[-1]
            merged[-1] = PhaseSegment(
                prev.kind, prev.start_ms, seg.end_ms,
                prev.first_seq if prev.first_seq is not None else seg.first_seq,
                seg.last_seq if seg.last_seq is not None else prev.last_seq,
            )
        else:
            merged.append(seg)
    return merged


# --------------------------------------------------------------------------
# JSONL serialization
# --------------------------------------------------------------------------


def _action_to_doc(action: Action) -> dict:
    if isinstance(action, ApplyAction):
        return {"type": "apply", "pattern": instance_to_doc(action.pattern)}
    if isinstance(action, UndoAction):
        return {"type": "undo"}
    if isinstance(action, RenameAction):
        return {"type": "rename", "node": action.node, "label": action.label}
    return {"type": "layout", "payload": json.loads(action.payload)}


def _action_from_doc(doc, where: str) -> Action:
    if not isinstance(doc, dict) or "type" not in doc:
        raise ParseError("malformed action", where)
    kind = doc["type"]
    if kind == "apply":
        try:
            return ApplyAction(pattern=instance_from_doc(doc.get("pattern")))
        except PatternError as exc:
            raise ParseError(f"bad pattern: {exc}", where) from None
    if kind == "undo":
        return UndoAction()
    if kind == "rename":
        node, label = doc.get("node"), doc.get("label")
        if not isinstance(node, int) or not isinstance(label, str):
            raise ParseError("rename requires node id and label", where)
        return RenameAction(node=node, label=label)
    if kind == "layout":
        return LayoutAction(payload=json.dumps(doc.get("payload", {}), sort_keys=True))
    raise ParseError(f"unknown action type {kind!r}", where)


def event_to_doc(event: SessionEvent) -> dict:
    outcome = OUTCOME_OK if event.outcome == OUTCOME_OK else {"error": event.outcome}
    return {
        "seq": event.seq,
        "t_ms": event.t_ms,
        "action": _action_to_doc(event.action),
        "outcome": outcome,
    }


def write_log(log: SessionLog) -> str:
    header = {
        "format": SESSION_FORMAT,
        "version": SESSION_VERSION,
        "session_id": log.session_id,
        "task_id": log.task_id,
        "alphabet": list(log.alphabet),
    }
    lines = [json.dumps(header, separators=(",", ":"))]
    lines.extend(
        json.dumps(event_to_doc(e), separators=(",", ":")) for e in log.events
    )
    return "\n".join(lines) + "\n"


def read_log(text: str) -> SessionLog:
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise ParseError("empty session file", "line 1")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, "line 1") from None
    if not isinstance(header, dict) or header.get("format") != SESSION_FORMAT:
        raise ParseError(f"header format must be {SESSION_FORMAT!r}", "line 1")
    if header.get("version") != SESSION_VERSION:
        raise ParseError(f"unsupported version {header.get('version')!r}", "line 1")
    alphabet = header.get("alphabet", [])
    if not isinstance(alphabet, list) or not all(isinstance(a, str) for a in alphabet):
        raise ParseError("alphabet must be a list of strings", "line 1")
    events: list[SessionEvent] = []
    prev_seq, prev_t = -1, 0
    for i, line in enumerate(lines[1:], start=2):
        where = f"line {i}"
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, where) from None
        if not isinstance(doc, dict):
            raise ParseError("event must be an object", where)
        seq, t_ms = doc.get("seq"), doc.get("t_ms")
        if not isinstance(seq, int) or seq <= prev_seq:
            raise ParseError("seq must be a strictly increasing integer", where)
        if not isinstance(t_ms, int) or t_ms < prev_t:
            raise ParseError("t_ms must be a non-decreasing integer", where)
        outcome_doc = doc.get("outcome")
        if outcome_doc == OUTCOME_OK:
            outcome = OUTCOME_OK
        elif isinstance(outcome_doc, dict) and isinstance(outcome_doc.get("error"), str):
            outcome = outcome_doc["error"]
        else:
            raise ParseError("malformed outcome", where)
        events.append(
            SessionEvent(
                seq=seq, t_ms=t_ms,
                action=_action_from_doc(doc.get("action"), where), outcome=outcome,
            )
        )
        prev_seq, prev_t = seq, t_ms
    log = SessionLog(
        session_id=str(header.get("session_id", "")),
        task_id=str(header.get("task_id", "")),
        alphabet=tuple(alphabet),
        events=tuple(events),
    )
    _fold(log.events, strict=True)  # raises CorruptLog on inconsistent OK events
    return log
