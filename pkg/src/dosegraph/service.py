"""HTTP service: browse cases, open sessions, steer predictions with text.

The model is frozen at serve time. An instruction only swaps the prompt
embedding and re-predicts, so replaying a session's history reproduces its
final predictions. Sessions are independent and individually serialized.
"""

from __future__ import annotations

import json
import os
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .bundles import NUM_STRUCTURES, STRUCTURE_NAMES, CaseBundle, list_bundles, load_bundle
from .conversion import StructureMasks
from .encoders import resolve_prompt_embedding
from .graph import ImageDoseGraph, attach_prompt_embedding
from .metrics import CurvePair, case_curves
from .model import (
    DoseGnnConfig,
    ParameterStore,
    load_checkpoint,
    mse_loss,
    predict_doses,
    predict_mlp,
    prepare_case,
)

EMBED_URL_ENV = "DOSEGRAPH_EMBED_URL"


class CaseInfo(BaseModel):
    case_id: str
    image_shape: tuple[int, int, int]
    dose_shape: tuple[int, int, int]
    prescription_dose: float
    has_ground_truth: bool
    structures: list[str]


class CaseListResponse(BaseModel):
    cases: list[CaseInfo]


class SessionCreateRequest(BaseModel):
    case_id: str


class InstructRequest(BaseModel):
    text: str


class CurveSeries(BaseModel):
    structure: str
    slot: int
    edges_gy: list[float]
    predicted: list[float]
    truth: list[float] | None = None


class SessionResponse(BaseModel):
    session_id: str
    case_id: str
    prompt_text: str
    prescription_dose: float
    mse: float | None
    warnings: list[str]
    curves: list[CurveSeries]


class CdvhResponse(BaseModel):
    session_id: str
    case_id: str
    prompt_text: str
    prescription_dose: float
    curves: list[CurveSeries]


class HistoryEntry(BaseModel):
    instruction: str
    mse: float | None
    warnings: list[str]


class HistoryResponse(BaseModel):
    session_id: str
    case_id: str
    entries: list[HistoryEntry]


@dataclass
class Session:
    session_id: str
    case_id: str
    prompt_text: str
    predictions: np.ndarray
    mse: float | None
    curves: list[CurvePair]
    warnings: list[str]
    history: list[HistoryEntry]
    lock: threading.Lock = field(default_factory=threading.Lock)


@dataclass
class ServiceState:
    params: ParameterStore
    config: DoseGnnConfig
    model_kind: str
    cases: dict[str, CaseBundle]
    embed_url: str | None
    journal_path: Path | None
    prepared: dict[str, tuple[ImageDoseGraph, StructureMasks]] = field(default_factory=dict)
    sessions: dict[str, Session] = field(default_factory=dict)
    registry_lock: threading.Lock = field(default_factory=threading.Lock)


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


def _prepared_case(state: ServiceState, case_id: str) -> tuple[CaseBundle, ImageDoseGraph, StructureMasks]:
    case = state.cases[case_id]
    with state.registry_lock:
        entry = state.prepared.get(case_id)
        if entry is None:
            # Built with an empty prompt; sessions swap the embedding per
            # instruction without touching this shared base graph.
            entry = prepare_case(case, state.config, prompt_text="")
            state.prepared[case_id] = entry
    return case, entry[0], entry[1]


def _with_prompt(graph: ImageDoseGraph, embedding: np.ndarray) -> ImageDoseGraph:
    swapped = attach_prompt_embedding(graph, embedding)
    cache = getattr(graph, "_forward_cache", None)
    if cache is not None:
        # Window batches and aggregation operators are prompt-independent.
        object.__setattr__(swapped, "_forward_cache", cache)
    return swapped


def _predict(state: ServiceState, graph: ImageDoseGraph) -> np.ndarray:
    if state.model_kind == "dose_gnn":
        return predict_doses(graph, state.params, state.config)
    return predict_mlp(graph, state.params)


def _curve_series(pair: CurvePair) -> CurveSeries:
    return CurveSeries(
        structure=pair.name,
        slot=pair.slot,
        edges_gy=[float(x) for x in pair.predicted.edges],
        predicted=[float(x) for x in pair.predicted.values],
        truth=None if pair.truth is None else [float(x) for x in pair.truth.values],
    )


def _journal(state: ServiceState, record: dict) -> None:
    if state.journal_path is None:
        return
    line = json.dumps(record, sort_keys=True, separators=(",", ":"))
    with open(state.journal_path, "a", encoding="utf-8") as fh:
        fh.write(line + "\n")


def _run_instruction(state: ServiceState, session: Session, text: str) -> None:
    """Re-embed, re-predict, and refresh the session in place."""
    case, base_graph, masks = _prepared_case(state, session.case_id)
    embedding, warning = resolve_prompt_embedding(text, state.config.prompt_width, state.embed_url)
    graph = _with_prompt(base_graph, embedding.vector)
    predictions = _predict(state, graph)
    warnings = [warning] if warning else []
    mse = None
    if graph.targets is not None:
        mse = mse_loss([predictions], [graph.targets])
    session.prompt_text = text
    session.predictions = predictions
    session.mse = mse
    session.warnings = warnings
    session.curves = case_curves(case, masks, predictions.reshape(case.dose_geom.shape))
    session.history.append(HistoryEntry(instruction=text, mse=mse, warnings=warnings))


def _session_response(state: ServiceState, session: Session) -> SessionResponse:
    return SessionResponse(
        session_id=session.session_id,
        case_id=session.case_id,
        prompt_text=session.prompt_text,
        prescription_dose=state.cases[session.case_id].prescription_dose,
        mse=session.mse,
        warnings=list(session.warnings),
        curves=[_curve_series(p) for p in session.curves],
    )


def create_app(
    checkpoint_path,
    data_dir,
    embed_url: str | None = None,
    journal_path=None,
    frontend_dir=None,
) -> FastAPI:
    """Build the application around one checkpoint and a bundle directory."""
    params, config, model_kind = load_checkpoint(checkpoint_path)
    cases: dict[str, CaseBundle] = {}
    for path in list_bundles(data_dir):
        case = load_bundle(path)
        cases[case.case_id] = case
    if embed_url is None:
        embed_url = os.environ.get(EMBED_URL_ENV) or None
    state = ServiceState(
        params=params,
        config=config,
        model_kind=model_kind,
        cases=cases,
        embed_url=embed_url,
        journal_path=None if journal_path is None else Path(journal_path),
    )

    app = FastAPI(title="dosegraph console")
    app.state.service = state

    @app.exception_handler(RequestValidationError)
    async def malformed_body(request, exc: RequestValidationError):
        return _error(400, f"malformed request: {exc.errors()[0].get('msg', 'invalid body')}")

    @app.get("/cases", response_model=CaseListResponse)
    def get_cases():
        infos = []
        for case_id in sorted(state.cases):
            case = state.cases[case_id]
            present = [STRUCTURE_NAMES[s] for s in range(NUM_STRUCTURES) if case.structure_masks[s].any()]
            infos.append(
                CaseInfo(
                    case_id=case_id,
                    image_shape=case.image_geom.shape,
                    dose_shape=case.dose_geom.shape,
                    prescription_dose=case.prescription_dose,
                    has_ground_truth=case.has_ground_truth(),
                    structures=present,
                )
            )
        return CaseListResponse(cases=infos)

    @app.post("/sessions", response_model=SessionResponse)
    def create_session(body: SessionCreateRequest):
        if body.case_id not in state.cases:
            return _error(404, f"unknown case {body.case_id!r}")
        session = Session(
            session_id=uuid.uuid4().hex,
            case_id=body.case_id,
            prompt_text="",
            predictions=np.zeros(0),
            mse=None,
            curves=[],
            warnings=[],
            history=[],
        )
        _run_instruction(state, session, "")
        with state.registry_lock:
            state.sessions[session.session_id] = session
        _journal(state, {"event": "create", "session_id": session.session_id, "case_id": session.case_id})
        return _session_response(state, session)

    def _get_session(session_id: str) -> Session | None:
        with state.registry_lock:
            return state.sessions.get(session_id)

    @app.get("/sessions/{session_id}/cdvh", response_model=CdvhResponse)
    def get_cdvh(session_id: str):
        session = _get_session(session_id)
        if session is None:
            return _error(404, f"unknown session {session_id!r}")
        with session.lock:
            return CdvhResponse(
                session_id=session.session_id,
                case_id=session.case_id,
                prompt_text=session.prompt_text,
                prescription_dose=state.cases[session.case_id].prescription_dose,
                curves=[_curve_series(p) for p in session.curves],
            )

    @app.post("/sessions/{session_id}/instruct", response_model=SessionResponse)
    def instruct(session_id: str, body: InstructRequest):
        session = _get_session(session_id)
        if session is None:
            return _error(404, f"unknown session {session_id!r}")
        with session.lock:
            _run_instruction(state, session, body.text)
            _journal(
                state,
                {
                    "event": "instruct",
                    "session_id": session.session_id,
                    "case_id": session.case_id,
                    "instruction": body.text,
                    "mse": session.mse,
                },
            )
            return _session_response(state, session)

    @app.get("/sessions/{session_id}/history", response_model=HistoryResponse)
    def get_history(session_id: str):
        session = _get_session(session_id)
        if session is None:
            return _error(404, f"unknown session {session_id!r}")
        with session.lock:
            return HistoryResponse(
                session_id=session.session_id,
                case_id=session.case_id,
                entries=list(session.history),
            )

    if frontend_dir is not None and Path(frontend_dir).is_dir():
        app.mount("/", StaticFiles(directory=frontend_dir, html=True), name="console")

    return app
