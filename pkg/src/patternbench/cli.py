"""Command-line interface: thin wrappers over the core modules.

Exit codes: 0 success, 1 invariant violation or unsound model, 2 file or
parse errors, 3 search budget exhausted.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import __version__
from .analysis import (
    AnalysisOptions,
    CountingMode,
    analyze_session,
    region_map_from_doc,
    report_to_doc,
    report_to_text,
)
from .errors import (
    BudgetExceeded,
    CorruptLog,
    InvariantViolation,
    ParseError,
    PatternError,
)
from .graph import check_soundness, graph_to_doc, to_graph
from .model import (
    ProcessModel,
    canonicalize,
    deserialize,
    model_to_doc,
    new_empty,
    serialize,
)
from .patterns import applicable_patterns, apply_pattern, instance_from_doc, instance_to_doc
from .search import default_state_budget, distance
from .session import read_log, replay


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        click.echo(f"error: cannot read {path}: {exc}", err=True)
        sys.exit(2)


def _load_model(path: str) -> ProcessModel:
    text = _read_text(path)
    try:
        return deserialize(text)
    except ParseError as exc:
        click.echo(f"error: {path}: {exc}", err=True)
        sys.exit(2)
    except InvariantViolation as exc:
        click.echo(f"invalid model: {path}: {exc}", err=True)
        sys.exit(1)


def _load_log(path: str):
    text = _read_text(path)
    try:
        return read_log(text)
    except (ParseError, CorruptLog) as exc:
        click.echo(f"error: {path}: {exc}", err=True)
        sys.exit(2)


def _write_output(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        click.echo(text, nl=False)


@click.group()
@click.version_option(version=__version__, prog_name="patternbench")
def main() -> None:
    """Process-model workbench: change patterns, sessions, deviation analysis."""


@main.command()
@click.argument("model_file")
def validate(model_file: str) -> None:
    """Check a model file against the structural invariants and soundness."""
    model = _load_model(model_file)
    report = check_soundness(to_graph(model))
    payload = {
        "sound": report.sound,
        "digest": canonicalize(model).digest,
        "violations": [
            {"code": v.code, "ids": list(v.ids), "message": v.message}
            for v in report.violations
        ],
        "warnings": [
            {"code": w.code, "ids": list(w.ids), "message": w.message}
            for w in report.warnings
        ],
    }
    click.echo(json.dumps(payload, indent=2))
    if not report.sound:
        sys.exit(1)


@main.command("export-graph")
@click.argument("model_file")
@click.option("-o", "--out", default=None, help="Write the graph document here.")
def export_graph(model_file: str, out: str | None) -> None:
    """Lower a model to its flat gateway graph."""
    model = _load_model(model_file)
    _write_output(json.dumps(graph_to_doc(to_graph(model)), indent=2) + "\n", out)


@main.command()
@click.argument("model_file")
@click.argument("pattern_file")
@click.option("-o", "--out", default=None, help="Write the resulting model here.")
def apply(model_file: str, pattern_file: str, out: str | None) -> None:
    """Apply one pattern instance (JSON file) to a model."""
    model = _load_model(model_file)
    try:
        instance = instance_from_doc(json.loads(_read_text(pattern_file)))
    except json.JSONDecodeError as exc:
        click.echo(f"error: {pattern_file}: {exc}", err=True)
        sys.exit(2)
    except PatternError as exc:
        click.echo(f"error: {pattern_file}: {exc}", err=True)
        sys.exit(2)
    try:
        result = apply_pattern(model, instance)
    except PatternError as exc:
        click.echo(f"pattern rejected: {exc}", err=True)
        sys.exit(1)
    _write_output(serialize(result), out)


@main.command()
@click.argument("model_file")
@click.option("--alphabet", default="", help="Comma-separated insert labels.")
@click.option("--conditions", default="", help="Comma-separated condition values.")
def applicable(model_file: str, alphabet: str, conditions: str) -> None:
    """List every applicable pattern instance for a model."""
    model = _load_model(model_file)
    labels = [a for a in alphabet.split(",") if a] or None
    vocab = [c for c in conditions.split(",") if c]
    instances = applicable_patterns(model, labels, conditions=vocab)
    click.echo(json.dumps([instance_to_doc(i) for i in instances], indent=2))


@main.command("replay")
@click.argument("log_file")
@click.option("--step", default=-1, help="Replay up to this event count (-1 = all).")
@click.option("--digest", "digest_only", is_flag=True, help="Print only the canonical digest.")
@click.option("-o", "--out", default=None, help="Write the replayed model here.")
def replay_cmd(log_file: str, step: int, digest_only: bool, out: str | None) -> None:
    """Replay a session log to the model state at a step."""
    log = _load_log(log_file)
    if step < 0:
        step = len(log.events)
    try:
        model = replay(log, step)
    except CorruptLog as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    if digest_only:
        click.echo(canonicalize(model).digest)
        return
    _write_output(serialize(model), out)


@main.command("distance")
@click.argument("target_file")
@click.option("--source", default=None, help="Source model file (default: empty model).")
@click.option("--empty", "from_empty", is_flag=True, help="Measure from the empty model.")
@click.option("--alphabet", default="", help="Comma-separated extra insert labels.")
@click.option("--enumerate", "enumerate_limit", default=10, show_default=True,
              help="How many optimal paths to list (0 = distance only).")
@click.option("--state-budget", default=None, type=int,
              help=f"Search state budget (default ${'{'}PATTERNBENCH_STATE_BUDGET{'}'} or {default_state_budget()}).")
def distance_cmd(
    target_file: str,
    source: str | None,
    from_empty: bool,
    alphabet: str,
    enumerate_limit: int,
    state_budget: int | None,
) -> None:
    """Minimal pattern distance from a source model to a target model."""
    target = _load_model(target_file)
    src = new_empty() if (from_empty or source is None) else _load_model(source)
    labels = set(a for a in alphabet.split(",") if a) or None
    if labels is not None:
        from .model import activities

        labels |= set(activities(target)) | set(activities(src))
    try:
        result = distance(
            src, target, labels,
            enumerate_limit=enumerate_limit, state_budget=state_budget,
        )
    except BudgetExceeded as exc:
        click.echo(
            json.dumps(
                {
                    "error": "budget_exceeded",
                    "lower_bound": exc.lower,
                    "upper_bound": exc.upper,
                    "explored_states": exc.explored,
                },
                indent=2,
            )
        )
        sys.exit(3)
    payload = {
        "d": result.d,
        "explored_states": result.explored_states,
        "truncated": result.truncated,
        "optimal_paths": [
            [instance_to_doc(i) for i in path] for path in result.optimal_paths
        ],
    }
    click.echo(json.dumps(payload, indent=2))


@main.command()
@click.argument("log_file")
@click.argument("solution_file")
@click.option("--regions", "regions_file", default=None, help="Region map file.")
@click.option("--mode", type=click.Choice([m.value for m in CountingMode]),
              default=CountingMode.STATE_CHANGING_ONLY.value, show_default=True)
@click.option("--report", "report_file", default=None, help="Write the full report here.")
@click.option("--state-budget", default=None, type=int)
def analyze(
    log_file: str,
    solution_file: str,
    regions_file: str | None,
    mode: str,
    report_file: str | None,
    state_budget: int | None,
) -> None:
    """Analyze a session log against a solution model."""
    log = _load_log(log_file)
    solution = _load_model(solution_file)
    regions = None
    if regions_file:
        try:
            regions = region_map_from_doc(
                json.loads(_read_text(regions_file)), solution
            )
        except (json.JSONDecodeError, ParseError) as exc:
            click.echo(f"error: {regions_file}: {exc}", err=True)
            sys.exit(2)
    opts = AnalysisOptions(mode=CountingMode(mode), state_budget=state_budget)
    try:
        report = analyze_session(log, solution, regions, opts)
    except BudgetExceeded as exc:
        click.echo(f"error: search budget exhausted ({exc})", err=True)
        sys.exit(3)
    if report_file:
        Path(report_file).write_text(report_to_text(report), encoding="utf-8")
    doc = report_to_doc(report)
    click.echo(
        json.dumps(
            {
                "process_deviations": doc["process_deviations"],
                "product_deviations": doc["product_deviations"],
                "dead_end_steps": doc["dead_end_steps"],
            },
            indent=2,
        )
    )


@main.command()
@click.option("--port", default=8080, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--static-dir", default=None, help="Serve the editor UI from this directory.")
@click.option("--session-dir", default=None, help="Persist session logs to this directory.")
def serve(port: int, host: str, static_dir: str | None, session_dir: str | None) -> None:
    """Run the HTTP service (and optionally the editor UI)."""
    import uvicorn

    from .service import create_app, mount_static

    app = create_app(session_dir=session_dir)
    if static_dir:
        mount_static(app, static_dir)
    uvicorn.run(app, host=host, port=port, log_level="info")


if __name__ == "__main__":
    main()
