"""Minimal pattern distance between models, optimal paths, dead-end detection.

Distance is the length of a shortest sequence of change-pattern applications
transforming one model into another, searched over canonical states (models
normalized and renumbered, deduplicated by structural key). The search is
best-first with an admissible lower bound assembled from multiset differences:
missing activity labels, missing set conditions, missing conditional and loop
blocks (each reducible by at most one per pattern application), plus one for
any surplus that only a delete can remove.

When the source is the empty model and the deterministic constructor yields a
sequence whose length equals that lower bound, the distance is certified
exactly without search; search effort is then spent only on enumerating
optimal paths, seeded with the constructor's own path.
"""

from __future__ import annotations

import heapq
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterator

from .errors import BudgetExceeded
from .model import (
    NodeKind,
    ProcessModel,
    activities,
    canonical_key,
    canonicalize,
    is_empty,
    new_empty,
)
from .patterns import (
    BuilderUnsupported,
    PatternInstance,
    PatternKind,
    applicable_patterns,
    apply_pattern,
    construction_instances,
)

DEFAULT_STATE_BUDGET = 5_000_000
STATE_BUDGET_ENV = "PATTERNBENCH_STATE_BUDGET"
DEFAULT_ENUMERATE_LIMIT = 10_000
DEFAULT_PATH_STATE_BUDGET = 2_000


def default_state_budget() -> int:
    raw = os.environ.get(STATE_BUDGET_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return DEFAULT_STATE_BUDGET


@dataclass(frozen=True)
class _Profile:
    labels: dict
    conds: dict
    conditionals: int
    loops: int
    parallels: int
    nodes: int


def _profile(model: ProcessModel) -> _Profile:
    labels: dict[str, int] = {}
    conds: dict[str, int] = {}
    conditionals = loops = parallels = nodes = 0
    stack: list[tuple] = [(model.root, False)]
    while stack:
        node, in_cond = stack.pop()
        nodes += 1
        kind = node.kind
        if kind is NodeKind.ACTIVITY:
            labels[node.label] = labels.get(node.label, 0) + 1
            if in_cond and node.condition is not None:
                conds[node.condition] = conds.get(node.condition, 0) + 1
            continue
        if kind is NodeKind.SKIP:
            if in_cond and node.condition is not None:
                conds[node.condition] = conds.get(node.condition, 0) + 1
            continue
        if kind is NodeKind.LOOP:
            loops += 1
            if node.condition is not None:
                conds[node.condition] = conds.get(node.condition, 0) + 1
            if in_cond and node.branch_condition is not None:
                conds[node.branch_condition] = conds.get(node.branch_condition, 0) + 1
        else:
            if kind is NodeKind.CONDITIONAL:
                conditionals += 1
            elif kind is NodeKind.PARALLEL:
                parallels += 1
            if in_cond and node.condition is not None:
                conds[node.condition] = conds.get(node.condition, 0) + 1
        child_in_cond = kind is NodeKind.CONDITIONAL
        for child in node.children:
            stack.append((child, child_in_cond))
    return _Profile(labels, conds, conditionals, loops, parallels, nodes)


def _lower_bound(state: _Profile, target: _Profile) -> int:
    missing = 0
    for label, want in target.labels.items():
        have = state.labels.get(label, 0)
        if want > have:
            missing += want - have
    for value, want in target.conds.items():
        have = state.conds.get(value, 0)
        if want > have:
            missing += want - have
    if target.conditionals > state.conditionals:
        missing += target.conditionals - state.conditionals
    if target.loops > state.loops:
        missing += target.loops - state.loops
    if _has_surplus(state, target):
        missing += 1
    return missing


def _has_surplus(state: _Profile, target: _Profile) -> bool:
    if state.conditionals > target.conditionals or state.loops > target.loops:
        return True
    if state.parallels > target.parallels:
        return True
    for label, have in state.labels.items():
        if have > target.labels.get(label, 0):
            return True
    return False


def _reduces(inst: PatternInstance, state: _Profile, target: _Profile) -> bool:
    """Whether the instance can lower the bound by one. Exact for inserts and
    embeds; conservative (may keep a no-gain update) for condition updates."""
    kind = inst.kind
    if kind in (PatternKind.SERIAL_INSERT, PatternKind.PARALLEL_INSERT):
        return True  # insert labels are restricted to ones the target needs
    if kind is PatternKind.EMBED_IN_CONDITIONAL:
        return state.conditionals < target.conditionals
    if kind is PatternKind.EMBED_IN_LOOP:
        return state.loops < target.loops
    if kind is PatternKind.UPDATE_CONDITION:
        value = inst.condition
        if value is None:
            return False
        return state.conds.get(value, 0) < target.conds.get(value, 0)
    return _has_surplus(state, target)  # deletes help only against surplus


@dataclass
class DistanceResult:
    """Minimal pattern count plus the optimal-path evidence.

    ``optimal_paths`` holds up to ``enumerate_limit`` distinct shortest
    instance sequences; each step applies to the *canonical* state reached so
    far (states are renumbered between steps). ``truncated`` is set when the
    listing is incomplete, either because the limit was hit or because the
    search stopped expanding the optimal layer early.
    """

    d: int
    optimal_paths: list[tuple[PatternInstance, ...]]
    truncated: bool
    explored_states: int
    source_digest: str
    target_digest: str
    _dag: dict = field(default_factory=dict, repr=False)
    _source_key: tuple = field(default=(), repr=False)
    _target_key: tuple = field(default=(), repr=False)


def canonical_state(model: ProcessModel) -> ProcessModel:
    return canonicalize(model).model


def replay_path(source: ProcessModel, path) -> ProcessModel:
    """Fold an optimal path over canonical states; returns the final state."""
    state = canonical_state(source)
    for inst in path:
        state = canonical_state(apply_pattern(state, inst))
    return state


def _needed_labels(state_labels: Counter, target_labels: Counter) -> list[str]:
    return sorted(
        label for label, want in target_labels.items() if state_labels[label] < want
    )


def _seed_certified_path(
    instances: list[PatternInstance],
    target_labels: Counter,
    condition_vocab: tuple[str, ...],
    states: dict,
    g_cost: dict,
    preds: dict,
) -> bool:
    """Translate the constructor's path onto canonical states and graft it
    into the predecessor DAG. Returns False if translation fails."""
    sim = new_empty()
    chain = [canonicalize(sim)]
    for inst in instances:
        sim = apply_pattern(sim, inst)
        chain.append(canonicalize(sim))
    edges: list[tuple[tuple, tuple, PatternInstance]] = []
    for i in range(1, len(chain)):
        prev = chain[i - 1]
        want_key = chain[i].key
        labels = _needed_labels(activities(prev.model), target_labels)
        translated = None
        for inst in applicable_patterns(prev.model, labels, conditions=condition_vocab):
            nxt = apply_pattern(prev.model, inst, _validate=False)
            if canonical_key(nxt) == want_key:
                translated = inst
                break
        if translated is None:
            return False
        edges.append((prev.key, want_key, translated))
    for i, canon in enumerate(chain):
        if canon.key not in g_cost or g_cost[canon.key] > i:
            g_cost[canon.key] = i
            states[canon.key] = canon.model
            preds.setdefault(canon.key, [])
    for pkey, skey, inst in edges:
        if (pkey, inst) not in preds[skey]:
            preds[skey].append((pkey, inst))
    return True


def distance(
    source: ProcessModel,
    target: ProcessModel,
    alphabet: set[str] | None = None,
    *,
    enumerate_limit: int = DEFAULT_ENUMERATE_LIMIT,
    state_budget: int | None = None,
    path_state_budget: int = DEFAULT_PATH_STATE_BUDGET,
) -> DistanceResult:
    """Exact minimal pattern count from source to target, with optimal paths.

    ``alphabet`` must cover the target's activity labels (defaults to the
    union of both models' labels). Raises BudgetExceeded with the best-known
    bounds when the state budget runs out before the distance is proven.
    """
    if state_budget is None:
        state_budget = default_state_budget()
    target_labels = activities(target)
    if alphabet is not None and not set(target_labels) <= set(alphabet):
        missing = sorted(set(target_labels) - set(alphabet))
        raise ValueError(f"alphabet is missing target labels {missing}")

    src = canonicalize(source)
    tgt = canonicalize(target)
    tgt_key = tgt.key
    target_profile = _profile(tgt.model)
    condition_vocab = tuple(sorted(set(target_profile.conds)))
    # Inserting a label beyond the target's multiset can never shorten a path,
    # so insert enumeration is restricted to labels the target still needs.

    result = DistanceResult(
        d=-1,
        optimal_paths=[],
        truncated=False,
        explored_states=0,
        source_digest=src.digest,
        target_digest=tgt.digest,
        _source_key=src.key,
        _target_key=tgt_key,
    )

    if src.key == tgt_key:
        result.d = 0
        result.optimal_paths = [()] if enumerate_limit > 0 else []
        result._dag = {src.key: []}
        return result

    states: dict[tuple, ProcessModel] = {src.key: src.model}
    g_cost: dict[tuple, int] = {src.key: 0}
    preds: dict[tuple, list[tuple[tuple, PatternInstance]]] = {src.key: []}

    certified: int | None = None
    if is_empty(src.model):
        lb = _lower_bound(_profile(src.model), target_profile)
        try:
            instances, final = construction_instances(tgt.model)
        except BuilderUnsupported:
            instances, final = [], None
        if final is not None and canonical_key(final) == tgt_key and len(instances) == lb:
            if _seed_certified_path(
                instances, target_labels, condition_vocab, states, g_cost, preds
            ):
                certified = lb

    if certified is not None and enumerate_limit <= 0:
        result.d = certified
        result.truncated = True
        result._dag = dict(preds)
        return result
    if certified is not None and enumerate_limit == 1:
        result.d = certified
        paths: list[tuple[PatternInstance, ...]] = []
        _enumerate_paths(dict(preds), src.key, tgt_key, certified, paths, 1)
        result.optimal_paths = paths
        result.truncated = True
        result._dag = dict(preds)
        return result

    expanded: set[tuple] = set()
    counter = 0
    heap: list[tuple[int, int, int, tuple]] = []
    for key, state in states.items():  # source plus any seeded chain states
        h = _lower_bound(_profile(state), target_profile)
        heapq.heappush(heap, (g_cost[key] + h, h, counter, key))
        counter += 1
    found: int | None = certified
    explored = 0
    popped_after_goal = 0
    layer_complete = True

    while heap:
        f, h, _, key = heapq.heappop(heap)
        if key in expanded:
            continue
        g = g_cost[key]
        if found is not None and f > found:
            break  # remaining frontier lies beyond the optimal layer
        if key == tgt_key and found is None:
            found = g
            if enumerate_limit <= 1:
                expanded.add(key)
                explored += 1
                layer_complete = False
                break
        expanded.add(key)
        explored += 1
        if explored > state_budget:
            layer_complete = False
            if found is None:
                raise BudgetExceeded(
                    f,
                    _upper_bound_probe(src.model, tgt_key, target_profile, target_labels, condition_vocab),
                    explored,
                )
            break
        if found is not None:
            popped_after_goal += 1
            if popped_after_goal > path_state_budget:
                layer_complete = False
                break
        if key == tgt_key:
            continue  # goal states need no expansion, only bookkeeping
        state = states[key]
        state_profile = _profile(state)
        on_layer = found is not None and g + h == found
        labels = _needed_labels(activities(state), target_labels)
        for inst in applicable_patterns(state, labels, conditions=condition_vocab):
            if on_layer and not _reduces(inst, state_profile, target_profile):
                continue
            nxt = apply_pattern(state, inst, _validate=False)
            canon = canonicalize(nxt)
            nkey = canon.key
            new_g = g + 1
            old_g = g_cost.get(nkey)
            if old_g is None or new_g < old_g:
                g_cost[nkey] = new_g
                states[nkey] = canon.model
                preds[nkey] = [(key, inst)]
                nh = _lower_bound(_profile(canon.model), target_profile)
                if found is not None and new_g + nh > found:
                    continue
                counter += 1
                heapq.heappush(heap, (new_g + nh, nh, counter, nkey))
            elif new_g == old_g and (key, inst) not in preds[nkey]:
                preds[nkey].append((key, inst))

    if found is None:
        lower = max((g_cost[k] for k in expanded), default=0) + 1
        raise BudgetExceeded(
            lower,
            _upper_bound_probe(src.model, tgt_key, target_profile, target_labels, condition_vocab),
            explored,
        )

    result.d = found
    result.explored_states = explored
    result._dag = {
        key: [
            (p, inst)
            for p, inst in pred_list
            if g_cost.get(p, -2) + 1 == g_cost.get(key, -1)
        ]
        for key, pred_list in preds.items()
    }
    if tgt_key not in g_cost or g_cost[tgt_key] != found:
        # Distance certified, but the capped search never reached the goal
        # state, so no optimal paths can be listed.
        result.truncated = True
        result.optimal_paths = []
        return result

    paths = []
    truncated_paths = _enumerate_paths(
        result._dag, src.key, tgt_key, found, paths, enumerate_limit
    )
    result.optimal_paths = paths
    result.truncated = truncated_paths or not layer_complete
    return result


def _upper_bound_probe(
    src_state: ProcessModel,
    tgt_key: tuple,
    target_profile: _Profile,
    target_labels: Counter,
    condition_vocab: tuple[str, ...],
    limit: int = 64,
) -> int | None:
    """Greedy descent on the lower bound; returns a path length if it reaches
    the target, else None."""
    state = src_state
    steps = 0
    seen = {canonical_key(state)}
    while steps < limit:
        if canonical_key(state) == tgt_key:
            return steps
        labels = _needed_labels(activities(state), target_labels)
        best = None
        best_h = None
        for inst in applicable_patterns(state, labels, conditions=condition_vocab):
            canon = canonicalize(apply_pattern(state, inst, _validate=False))
            if canon.key in seen:
                continue
            h = _lower_bound(_profile(canon.model), target_profile)
            if best_h is None or h < best_h:
                best, best_h = canon, h
        if best is None:
            return None
        seen.add(best.key)
        state = best.model
        steps += 1
    return None


def _enumerate_paths(
    dag: dict,
    src_key: tuple,
    tgt_key: tuple,
    depth: int,
    out: list[tuple[PatternInstance, ...]],
    limit: int,
) -> bool:
    """Backward DFS over optimal predecessor edges; returns True if truncated."""
    truncated = False

    def walk(key: tuple, remaining: int, suffix: list[PatternInstance]) -> bool:
        nonlocal truncated
        if remaining == 0:
            if key == src_key:
                out.append(tuple(reversed(suffix)))
                if len(out) >= limit:
                    truncated = True
                    return True
            return False
        edges = sorted(dag.get(key, ()), key=lambda e: (e[1].sort_key(), e[0]))
        for pred_key, inst in edges:
            suffix.append(inst)
            stop = walk(pred_key, remaining - 1, suffix)
            suffix.pop()
            if stop:
                return True
        return False

    walk(tgt_key, depth, [])
    return truncated


def optimal_paths(result: DistanceResult) -> Iterator[tuple[PatternInstance, ...]]:
    """Stream the enumerated optimal paths in deterministic order."""
    yield from result.optimal_paths


# --------------------------------------------------------------------------
# Dead-end detection
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DeadEndResult:
    is_dead_end: bool
    witness: tuple[PatternInstance, ...] | None


def dead_end(
    state: ProcessModel,
    target: ProcessModel,
    alphabet: set[str] | None = None,
) -> DeadEndResult:
    """True iff no delete-free pattern sequence turns `state` into `target`.

    Finite by construction: delete-free moves never remove activities or
    blocks, so any state exceeding the target's label multiset, block counts,
    or node count is pruned as hopeless.
    """
    tgt = canonicalize(target)
    tgt_profile = _profile(tgt.model)
    condition_vocab = tuple(sorted(set(tgt_profile.conds)))
    target_labels = Counter(tgt_profile.labels)

    def admissible(profile: _Profile) -> bool:
        if profile.conditionals > tgt_profile.conditionals:
            return False
        if profile.loops > tgt_profile.loops:
            return False
        if profile.parallels > tgt_profile.parallels:
            return False
        for label, have in profile.labels.items():
            if have > tgt_profile.labels.get(label, 0):
                return False
        return profile.nodes <= tgt_profile.nodes

    start = canonicalize(state)
    if start.key == tgt.key:
        return DeadEndResult(False, ())
    if not admissible(_profile(start.model)):
        return DeadEndResult(True, None)

    seen: dict[tuple, tuple[tuple, PatternInstance] | None] = {start.key: None}
    frontier: list[tuple] = [start.key]
    states = {start.key: start.model}
    while frontier:
        next_frontier: list[tuple] = []
        for key in frontier:
            model = states[key]
            labels = _needed_labels(activities(model), target_labels)
            for inst in applicable_patterns(model, labels, conditions=condition_vocab):
                if inst.kind is PatternKind.DELETE_FRAGMENT:
                    continue
                nxt = canonicalize(apply_pattern(model, inst, _validate=False))
                if nxt.key in seen:
                    continue
                seen[nxt.key] = (key, inst)
                if nxt.key == tgt.key:
                    path: list[PatternInstance] = []
                    cursor: tuple | None = nxt.key
                    while cursor is not None and seen[cursor] is not None:
                        prev, step = seen[cursor]
                        path.append(step)
                        cursor = prev
                    return DeadEndResult(False, tuple(reversed(path)))
                if admissible(_profile(nxt.model)):
                    states[nxt.key] = nxt.model
                    next_frontier.append(nxt.key)
        frontier = next_frontier
    return DeadEndResult(True, None)
