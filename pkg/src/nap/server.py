"""HTTP service exposing prediction and live role-play sessions.

One process serves one model over one procedure graph.  Stateless prediction
lives at ``POST /predict``; stateful conversations go through the session
endpoints (start, turn, close, rate) plus read-only replay and export views
for reviewers.  ``GET /healthz`` reports identity and a rolling latency p95.

Error contract, used consistently by every endpoint:

* 400 — a referenced action name is not in the procedure graph
* 404 — unknown session id
* 409 — wrong session lifecycle stage (turn/close on closed, rate on open,
  second rating from the same rater role)
* 422 — malformed input (missing/blank utterance, score outside 1..5,
  unknown rater role, unknown difficulty or model id)
* 503 — the service has no model loaded
"""

from __future__ import annotations

import time
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field, field_validator

from .errors import ConfigError, UnknownActionError
from .live import (LatencyWindow, ModelNotLoadedError, RatingStore,
                   SessionNotFoundError, SessionStateError, SessionStore)
from .models import NextActionModel, PredictionRequest, predict_next_action
from .sop import SOPGraph

__all__ = ["create_app"]


class PredictBody(BaseModel):
    utterance: str
    action_history: List[str] = Field(default_factory=list)
    top_k: int = Field(default=5, ge=1)

    @field_validator("utterance")
    @classmethod
    def _utterance_not_blank(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("utterance must be a non-empty string")
        return value


class StartBody(BaseModel):
    difficulty: str = "medium"
    model_id: Optional[str] = None


class TurnBody(BaseModel):
    utterance: str

    @field_validator("utterance")
    @classmethod
    def _utterance_not_blank(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("utterance must be a non-empty string")
        return value


class RateBody(BaseModel):
    score: int = Field(ge=1, le=5)
    rater: str
    comment: str = ""


def create_app(*, model: Optional[NextActionModel], graph: SOPGraph,
               model_id: str = "model",
               rating_path: Optional[Union[str, Path]] = None,
               clock=time.time) -> FastAPI:
    """Build the service around one model instance and one procedure graph."""
    rating_store = RatingStore(rating_path) if rating_path is not None else None
    window = LatencyWindow()
    store = SessionStore(model=model, graph=graph, model_id=model_id,
                         rating_store=rating_store, latency_window=window,
                         clock=clock)
    app = FastAPI(title="next-action service", docs_url="/docs")
    app.state.store = store
    app.state.started_at = clock()

    def _error(status: int):
        def handler(_: Request, exc: Exception) -> JSONResponse:
            return JSONResponse(status_code=status, content={"detail": str(exc)})
        return handler

    app.add_exception_handler(UnknownActionError, _error(400))
    app.add_exception_handler(SessionNotFoundError, _error(404))
    app.add_exception_handler(SessionStateError, _error(409))
    app.add_exception_handler(ConfigError, _error(422))
    app.add_exception_handler(ModelNotLoadedError, _error(503))

    # -- stateless prediction ------------------------------------------------

    @app.post("/predict")
    def predict(body: PredictBody):
        live_model = store.require_model()
        request = PredictionRequest(utterance=body.utterance,
                                    action_history=tuple(body.action_history))
        started = time.perf_counter()
        prediction = predict_next_action(live_model, request)
        latency_ms = (time.perf_counter() - started) * 1000.0
        window.record(latency_ms)
        names = graph.action_names
        order = np.argsort(-prediction.distribution, kind="stable")
        order = order[:min(body.top_k, len(names))]
        top = [{"action": names[int(i)],
                "probability": float(prediction.distribution[int(i)])}
               for i in order]
        return {"action": prediction.action_name,
                "probability": prediction.probability,
                "top_k": top,
                "latency_ms": latency_ms}

    # -- sessions -------------------------------------------------------------

    @app.post("/session/start")
    def session_start(body: StartBody):
        return store.start(difficulty=body.difficulty, model_id=body.model_id)

    @app.post("/session/{session_id}/turn")
    def session_turn(session_id: str, body: TurnBody):
        return store.turn(session_id, body.utterance)

    @app.post("/session/{session_id}/close")
    def session_close(session_id: str):
        return store.close(session_id)

    @app.post("/session/{session_id}/rate")
    def session_rate(session_id: str, body: RateBody):
        return store.rate(session_id, score=body.score, rater=body.rater,
                          comment=body.comment)

    # -- read-only views -------------------------------------------------------

    @app.get("/session/{session_id}")
    def session_view(session_id: str):
        return store.get(session_id)

    @app.get("/sessions")
    def session_list():
        return {"sessions": store.sessions()}

    @app.get("/ratings")
    def rating_export():
        return {"ratings": store.ratings()}

    # -- health ----------------------------------------------------------------

    @app.get("/healthz")
    def healthz():
        return {
            "status": "ok" if store.model is not None else "degraded",
            "model_id": store.model_id,
            "sop_hash": graph.document_hash,
            "uptime_s": max(0.0, clock() - app.state.started_at),
            "latency_p95_ms": window.p95(),
            "n_requests": window.count,
        }

    return app
