"""HTTP service exposing sessions, patterns, replay and analysis.

Each session holds a live model built exclusively through change patterns.
Mutations (apply/undo) are serialized behind a per-session lock; optimistic
concurrency is available by sending the expected event count with a mutation,
which yields 409 on mismatch. All failed applies are recorded in the session
log with their error code, mirroring how designer trials are analyzed.
"""

from __future__ import annotations

import threading
import time
import uuid
from pathlib import Path

from fastapi import FastAPI, HTTPException, Response
from pydantic import BaseModel, Field

from . import __version__
from .analysis import (
    AnalysisOptions,
    CountingMode,
    RegionMap,
    analyze_session,
    region_map_from_doc,
    report_to_doc,
)
from .errors import ParseError, PatternBenchError, PatternError
from .graph import graph_to_doc, to_graph
from .model import ProcessModel, canonicalize, model_from_doc, model_to_doc
from .patterns import applicable_patterns, instance_from_doc, instance_to_doc
from .session import (
    OUTCOME_OK,
    ApplyAction,
    SessionLog,
    UndoAction,
    event_to_doc,
    new_log,
    record,
    replay,
    write_log,
)


class CreateSessionRequest(BaseModel):
    task_id: str = "task"
    alphabet: list[str] = Field(default_factory=list)
    conditions: list[str] = Field(default_factory=list)
    solution: dict | None = None
    regions: dict | None = None


class CreateSessionResponse(BaseModel):
    session_id: str


class ApplyRequest(BaseModel):
    pattern: dict
    expected_events: int | None = None


class UndoRequest(BaseModel):
    expected_events: int | None = None


class ApiSession:
    """One live modeling session; mutations serialized by the lock."""

    def __init__(
        self,
        session_id: str,
        log: SessionLog,
        solution: ProcessModel | None,
        regions: RegionMap | None,
        conditions: tuple[str, ...],
    ):
        self.lock = threading.Lock()
        self.session_id = session_id
        self.log = log
        self.solution = solution
        self.regions = regions
        self.conditions = conditions
        self.started = time.monotonic()

    def now_ms(self) -> int:
        return int((time.monotonic() - self.started) * 1000)

    def model(self) -> ProcessModel:
        return replay(self.log, len(self.log.events))


def create_app(session_dir: str | None = None) -> FastAPI:
    app = FastAPI(title="patternbench", version=__version__)
    sessions: dict[str, ApiSession] = {}
    registry_lock = threading.Lock()
    persist_dir = Path(session_dir) if session_dir else None
    if persist_dir is not None:
        persist_dir.mkdir(parents=True, exist_ok=True)

    def persist(session: ApiSession) -> None:
        if persist_dir is None:
            return
        path = persist_dir / f"{session.session_id}.jsonl"
        path.write_text(write_log(session.log), encoding="utf-8")

    def get_session(session_id: str) -> ApiSession:
        session = sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")
        return session

    def model_payload(session: ApiSession, model: ProcessModel) -> dict:
        return {
            "session_id": session.session_id,
            "events": len(session.log.events),
            "model": model_to_doc(model),
            "graph": graph_to_doc(to_graph(model)),
            "digest": canonicalize(model).digest,
        }

    @app.get("/healthz")
    def healthz() -> dict:
        return {"status": "ok", "version": __version__}

    @app.post("/sessions", status_code=201, response_model=CreateSessionResponse)
    def create_session(request: CreateSessionRequest) -> CreateSessionResponse:
        solution = None
        regions = None
        try:
            if request.solution is not None:
                solution = model_from_doc(request.solution)
            if request.regions is not None:
                if solution is None:
                    raise HTTPException(
                        status_code=422, detail="regions require a solution model"
                    )
                regions = region_map_from_doc(request.regions, solution)
        except (ParseError, PatternBenchError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from None
        session_id = uuid.uuid4().hex[:12]
        log = new_log(session_id, request.task_id, request.alphabet)
        session = ApiSession(
            session_id, log, solution, regions, tuple(request.conditions)
        )
        with registry_lock:
            sessions[session_id] = session
        persist(session)
        return CreateSessionResponse(session_id=session_id)

    @app.get("/sessions/{session_id}/model")
    def get_model(session_id: str) -> dict:
        session = get_session(session_id)
        with session.lock:
            return model_payload(session, session.model())

    @app.get("/sessions/{session_id}/applicable")
    def get_applicable(session_id: str) -> dict:
        session = get_session(session_id)
        with session.lock:
            model = session.model()
            instances = applicable_patterns(
                model, session.log.alphabet, conditions=session.conditions
            )
            return {
                "events": len(session.log.events),
                "patterns": [instance_to_doc(i) for i in instances],
            }

    @app.post("/sessions/{session_id}/apply")
    def apply(session_id: str, request: ApplyRequest, response: Response) -> dict:
        session = get_session(session_id)
        try:
            instance = instance_from_doc(request.pattern)
        except PatternError as exc:
            raise HTTPException(
                status_code=422, detail={"error": exc.code, "message": exc.detail}
            ) from None
        with session.lock:
            if (
                request.expected_events is not None
                and request.expected_events != len(session.log.events)
            ):
                raise HTTPException(
                    status_code=409,
                    detail={
                        "error": "CONFLICT",
                        "events": len(session.log.events),
                    },
                )
            session.log = record(session.log, ApplyAction(instance), session.now_ms())
            persist(session)
            event = session.log.events[-1]
            if event.outcome != OUTCOME_OK:
                response.status_code = 422
                return {
                    "error": event.outcome,
                    "events": len(session.log.events),
                    "seq": event.seq,
                }
            return model_payload(session, session.model())

    @app.post("/sessions/{session_id}/undo")
    def undo(session_id: str, request: UndoRequest, response: Response) -> dict:
        session = get_session(session_id)
        with session.lock:
            if (
                request.expected_events is not None
                and request.expected_events != len(session.log.events)
            ):
                raise HTTPException(
                    status_code=409,
                    detail={"error": "CONFLICT", "events": len(session.log.events)},
                )
            session.log = record(session.log, UndoAction(), session.now_ms())
            persist(session)
            event = session.log.events[-1]
            if event.outcome != OUTCOME_OK:
                response.status_code = 422
                return {
                    "error": event.outcome,
                    "events": len(session.log.events),
                    "seq": event.seq,
                }
            return model_payload(session, session.model())

    @app.get("/sessions/{session_id}/log")
    def get_log(session_id: str) -> Response:
        session = get_session(session_id)
        with session.lock:
            text = write_log(session.log)
        return Response(content=text, media_type="application/x-ndjson")

    @app.get("/sessions/{session_id}/events")
    def get_events(session_id: str) -> dict:
        session = get_session(session_id)
        with session.lock:
            return {
                "events": [event_to_doc(e) for e in session.log.events],
                "alphabet": list(session.log.alphabet),
            }

    @app.get("/sessions/{session_id}/replay")
    def get_replay(session_id: str, step: int) -> dict:
        session = get_session(session_id)
        with session.lock:
            if not 0 <= step <= len(session.log.events):
                raise HTTPException(
                    status_code=422,
                    detail=f"step must be in 0..{len(session.log.events)}",
                )
            model = replay(session.log, step)
            payload = model_payload(session, model)
            payload["step"] = step
            return payload

    @app.get("/sessions/{session_id}/analysis")
    def get_analysis(session_id: str, mode: str = "state_changing_only") -> dict:
        session = get_session(session_id)
        if session.solution is None:
            raise HTTPException(
                status_code=400, detail="session has no solution model configured"
            )
        try:
            counting = CountingMode(mode)
        except ValueError:
            raise HTTPException(status_code=422, detail=f"unknown mode {mode!r}") from None
        with session.lock:
            log = session.log
        report = analyze_session(
            log, session.solution, session.regions, AnalysisOptions(mode=counting)
        )
        return report_to_doc(report)

    return app


def mount_static(app: FastAPI, static_dir: str) -> None:
    from fastapi.staticfiles import StaticFiles

    app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")
