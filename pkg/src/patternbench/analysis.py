"""Deviation analysis of modeling sessions against a solution model.

Process deviations count the operations a session spent beyond the minimal
pattern distance from the empty model to whatever the session actually built.
Product deviations measure the remaining pattern distance from the final
model to the task's solution model. Steps are marked relative to the running
best distance-to-final: a step that pushes the remaining distance to a new
minimum lies on an optimal problem-solving path, anything else is a detour;
rejected applications are failed trials. Deviations are attributed to regions
(designated subtrees of the solution) through the labels each step touched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

from .errors import ParseError
from .model import (
    BlockNode,
    NodeKind,
    ProcessModel,
    activities,
    canonicalize,
    new_empty,
)
from .patterns import (
    Beside,
    Gap,
    IntoSkip,
    PatternInstance,
    apply_pattern,
)
from .search import canonical_state, dead_end, distance
from .session import (
    OUTCOME_OK,
    ApplyAction,
    RenameAction,
    SessionLog,
    UndoAction,
    replay,
)

REGIONS_FORMAT = "patternbench-regions"
REGIONS_VERSION = 1
REPORT_FORMAT = "patternbench-report"
REPORT_VERSION = 1
UNATTRIBUTED_REGION = "∅"


class CountingMode(str, Enum):
    STATE_CHANGING_ONLY = "state_changing_only"
    INCLUDE_FAILED = "include_failed"


class StepMarker(str, Enum):
    ON_OPTIMAL_PATH = "on_optimal_path"
    DETOUR = "detour"
    FAILED_TRIAL = "failed_trial"


@dataclass(frozen=True, slots=True)
class StepAnnotation:
    seq: int
    marker: StepMarker
    touched: tuple[str, ...]


@dataclass
class AnalysisOptions:
    mode: CountingMode = CountingMode.STATE_CHANGING_ONLY
    state_budget: int | None = None
    check_dead_ends: bool = True


@dataclass
class DeviationReport:
    mode: CountingMode
    process_deviations: int
    product_deviations: int
    counted_ops: int
    baseline_distance: int
    per_step: list[StepAnnotation]
    dead_end_steps: list[int]
    per_region: dict[str, dict[str, int]] = field(default_factory=dict)
    product_witness: tuple[PatternInstance, ...] = ()
    reason_tags: dict[str, str] = field(default_factory=dict)


# --------------------------------------------------------------------------
# Touched labels
# --------------------------------------------------------------------------


def _subtree_labels(model: ProcessModel, node_id: int | None) -> set[str]:
    if node_id is None:
        return set()
    node = model.find(node_id)
    if node is None:
        return set()
    return {n.label for n in node.walk() if n.kind is NodeKind.ACTIVITY}


def _touched_labels(state: ProcessModel, inst: PatternInstance) -> set[str]:
    """Labels a pattern instance touches, measured against its pre-state."""
    touched: set[str] = set()
    if inst.label:
        touched.add(inst.label)
    if inst.target is not None:
        touched |= _subtree_labels(state, inst.target)
    position = inst.position
    if isinstance(position, (IntoSkip, Beside)):
        touched |= _subtree_labels(state, position.node)
    elif isinstance(position, Gap):
        node = state.find(position.sequence)
        if node is not None:
            for neighbor in node.children[
                max(0, position.index - 1) : position.index + 1
            ]:
                touched |= {
                    n.label for n in neighbor.walk() if n.kind is NodeKind.ACTIVITY
                }
    return touched


# --------------------------------------------------------------------------
# Process deviations
# --------------------------------------------------------------------------


def _distance_only(source: ProcessModel, target: ProcessModel, state_budget) -> int:
    return distance(
        source, target, enumerate_limit=0, state_budget=state_budget
    ).d


def process_deviations(
    log: SessionLog,
    solution: ProcessModel | None = None,
    mode: CountingMode = CountingMode.STATE_CHANGING_ONLY,
    *,
    state_budget: int | None = None,
) -> tuple[int, list[StepAnnotation]]:
    """Superfluous operations relative to the minimal path to the final model.

    The count is (state-changing operations taken) minus d(empty, final);
    in INCLUDE_FAILED mode, rejected applications count as well. The per-step
    markers grade each apply/undo by whether it pushed the remaining distance
    to the final model to a new minimum.
    """
    final = replay(log, len(log.events))
    baseline = _distance_only(new_empty(), final, state_budget)

    annotations: list[StepAnnotation] = []
    counted = 0
    failed = 0
    distance_cache: dict[tuple, int] = {}

    def remaining(model: ProcessModel) -> int:
        key = canonicalize(model).key
        if key not in distance_cache:
            distance_cache[key] = _distance_only(model, final, state_budget)
        return distance_cache[key]

    running_min = baseline
    state = new_empty()
    undo_touch_stack: list[set[str]] = []
    for i, event in enumerate(log.events):
        action = event.action
        if isinstance(action, ApplyAction) and event.outcome != OUTCOME_OK:
            failed += 1
            annotations.append(
                StepAnnotation(
                    seq=event.seq,
                    marker=StepMarker.FAILED_TRIAL,
                    touched=tuple(sorted(_touched_labels(state, action.pattern))),
                )
            )
            continue
        if event.outcome != OUTCOME_OK:
            continue
        if isinstance(action, ApplyAction):
            touched = _touched_labels(state, action.pattern)
            undo_touch_stack.append(touched)
        elif isinstance(action, UndoAction):
            touched = undo_touch_stack.pop() if undo_touch_stack else set()
        else:
            state = replay(log, i + 1)
            continue
        counted += 1
        state = replay(log, i + 1)
        d_now = remaining(state)
        if d_now < running_min:
            running_min = d_now
            marker = StepMarker.ON_OPTIMAL_PATH
        else:
            marker = StepMarker.DETOUR
        annotations.append(
            StepAnnotation(seq=event.seq, marker=marker, touched=tuple(sorted(touched)))
        )

    count = counted - baseline
    if mode is CountingMode.INCLUDE_FAILED:
        count += failed
    return count, annotations


def product_deviations(
    final: ProcessModel,
    solution: ProcessModel,
    alphabet: set[str] | None = None,
    *,
    state_budget: int | None = None,
) -> tuple[int, tuple[PatternInstance, ...]]:
    """Correction distance from the final model to the solution, with one
    optimal correction path as witness (empty when the models already agree).
    """
    result = distance(
        final, solution, alphabet, enumerate_limit=1, state_budget=state_budget
    )
    witness = result.optimal_paths[0] if result.optimal_paths else ()
    return result.d, tuple(witness)


# --------------------------------------------------------------------------
# Regions
# --------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Region:
    region_id: str
    node_id: int
    labels: frozenset[str]
    depth: int


@dataclass(frozen=True)
class RegionMap:
    regions: tuple[Region, ...]

    def attribution_order(self) -> list[Region]:
        # Smallest label set first; ties broken innermost, then by id.
        return sorted(
            self.regions, key=lambda r: (len(r.labels), -r.depth, r.region_id)
        )


def region_map_from_doc(doc, solution: ProcessModel) -> RegionMap:
    if not isinstance(doc, dict):
        raise ParseError("regions document must be an object", "$")
    unknown = set(doc) - {"format", "version", "regions"}
    if unknown:
        raise ParseError(f"unknown fields {sorted(unknown)}", "$")
    if doc.get("format") != REGIONS_FORMAT:
        raise ParseError(f"format must be {REGIONS_FORMAT!r}", "$.format")
    if doc.get("version") != REGIONS_VERSION:
        raise ParseError(f"unsupported version {doc.get('version')!r}", "$.version")
    regions_doc = doc.get("regions")
    if not isinstance(regions_doc, dict):
        raise ParseError("regions must be an object", "$.regions")

    depths: dict[int, int] = {}

    def measure(node: BlockNode, depth: int) -> None:
        depths[node.id] = depth
        for child in node.children:
            measure(child, depth + 1)

    measure(solution.root, 0)

    regions: list[Region] = []
    seen: set[str] = set()
    for region_id, node_id in regions_doc.items():
        if region_id in seen:
            raise ParseError(f"duplicate region {region_id!r}", "$.regions")
        seen.add(region_id)
        if not isinstance(node_id, int) or isinstance(node_id, bool):
            raise ParseError(f"region {region_id!r} ref must be a node id", "$.regions")
        node = solution.find(node_id)
        if node is None:
            raise ParseError(
                f"region {region_id!r} refers to missing node {node_id}", "$.regions"
            )
        labels = frozenset(
            n.label for n in node.walk() if n.kind is NodeKind.ACTIVITY
        )
        regions.append(Region(region_id, node_id, labels, depths[node_id]))
    return RegionMap(regions=tuple(regions))


def region_map_to_doc(regions: RegionMap) -> dict:
    return {
        "format": REGIONS_FORMAT,
        "version": REGIONS_VERSION,
        "regions": {r.region_id: r.node_id for r in regions.regions},
    }


def _attribute(touched: set[str], order: list[Region]) -> str:
    for region in order:
        if touched & region.labels:
            return region.region_id
    return UNATTRIBUTED_REGION


def map_to_regions(
    report: DeviationReport,
    log: SessionLog,
    solution: ProcessModel,
    regions: RegionMap,
) -> DeviationReport:
    """Aggregate deviations per region by the labels each deviation touched."""
    order = regions.attribution_order()
    per_region: dict[str, dict[str, int]] = {}

    def bump(region_id: str, kind: str) -> None:
        entry = per_region.setdefault(region_id, {"process": 0, "product": 0})
        entry[kind] += 1

    for step in report.per_step:
        if step.marker in (StepMarker.DETOUR, StepMarker.FAILED_TRIAL):
            bump(_attribute(set(step.touched), order), "process")

    final = replay(log, len(log.events))
    state = canonical_state(final)
    for inst in report.product_witness:
        touched = _touched_labels(state, inst)
        bump(_attribute(touched, order), "product")
        state = canonical_state(apply_pattern(state, inst))

    report.per_region = per_region
    return report


# --------------------------------------------------------------------------
# Whole pipeline
# --------------------------------------------------------------------------


def analyze_session(
    log: SessionLog,
    solution: ProcessModel,
    regions: RegionMap | None = None,
    opts: AnalysisOptions | None = None,
) -> DeviationReport:
    """Process deviations, product deviations, dead ends, region aggregation."""
    opts = opts or AnalysisOptions()
    process_count, annotations = process_deviations(
        log, solution, opts.mode, state_budget=opts.state_budget
    )
    final = replay(log, len(log.events))
    alphabet = set(log.alphabet) | set(activities(final)) | set(activities(solution))
    product_count, witness = product_deviations(
        final, solution, alphabet, state_budget=opts.state_budget
    )

    dead_end_steps: list[int] = []
    if opts.check_dead_ends:
        cache: dict[tuple, bool] = {}
        for i, event in enumerate(log.events):
            if event.outcome != OUTCOME_OK or not isinstance(
                event.action, (ApplyAction, UndoAction, RenameAction)
            ):
                continue
            state = replay(log, i + 1)
            key = canonicalize(state).key
            if key not in cache:
                cache[key] = dead_end(state, solution).is_dead_end
            if cache[key]:
                dead_end_steps.append(event.seq)

    report = DeviationReport(
        mode=opts.mode,
        process_deviations=process_count,
        product_deviations=product_count,
        counted_ops=_counted_ops(log, opts.mode),
        baseline_distance=_distance_only(new_empty(), final, opts.state_budget),
        per_step=annotations,
        dead_end_steps=dead_end_steps,
        product_witness=witness,
    )
    if regions is not None:
        report = map_to_regions(report, log, solution, regions)
    return report


def _counted_ops(log: SessionLog, mode: CountingMode) -> int:
    counted = 0
    for event in log.events:
        if isinstance(event.action, ApplyAction):
            if event.outcome == OUTCOME_OK:
                counted += 1
            elif mode is CountingMode.INCLUDE_FAILED:
                counted += 1
        elif isinstance(event.action, UndoAction) and event.outcome == OUTCOME_OK:
            counted += 1
    return counted


# --------------------------------------------------------------------------
# Report document
# --------------------------------------------------------------------------


def report_to_doc(report: DeviationReport) -> dict:
    per_region = {
        region_id: {
            "process": counts["process"],
            "product": counts["product"],
        }
        for region_id, counts in sorted(report.per_region.items())
    }
    return {
        "format": REPORT_FORMAT,
        "version": REPORT_VERSION,
        "mode": report.mode.value,
        "process_deviations": report.process_deviations,
        "product_deviations": report.product_deviations,
        "counted_ops": report.counted_ops,
        "baseline_distance": report.baseline_distance,
        "per_step": [
            {
                "seq": step.seq,
                "marker": step.marker.value,
                "touched": list(step.touched),
            }
            for step in report.per_step
        ],
        "dead_end_steps": list(report.dead_end_steps),
        "per_region": per_region,
        "reason_tags": dict(sorted(report.reason_tags.items())),
    }


def report_to_text(report: DeviationReport) -> str:
    return json.dumps(report_to_doc(report), indent=2, ensure_ascii=False) + "\n"
