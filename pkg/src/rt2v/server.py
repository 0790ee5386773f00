"""Read-oriented HTTP service over a loaded engine.

POST /v1/retrieve runs the full two-stage pipeline; the GET endpoints
expose twin documents and mask files verbatim. Responses reuse the
engine's canonical byte serialization so the service and the CLI agree
byte-for-byte in fixture mode. While no engine is attached every route
answers 503.
"""
from __future__ import annotations

import logging

from fastapi import FastAPI, HTTPException, Response
from pydantic import BaseModel, Field

from .engine import Engine
from .errors import Rt2vError

__all__ = ["create_app"]

logger = logging.getLogger(__name__)


class RetrieveRequest(BaseModel):
    query: str = Field(min_length=1)
    k: int | None = Field(default=None, ge=1)
    tau: float | None = Field(default=None, ge=0.0, le=1.0)
    aggregation: str | None = None


def create_app(engine: Engine | None) -> FastAPI:
    app = FastAPI(title="rt2v", version="0.1.0")
    app.state.engine = engine

    def _engine() -> Engine:
        if app.state.engine is None:
            raise HTTPException(status_code=503, detail="index is not loaded yet")
        return app.state.engine

    @app.post("/v1/retrieve")
    def retrieve(request: RetrieveRequest) -> Response:
        engine = _engine()
        try:
            body = engine.retrieve_bytes(request.query, request.k, request.tau,
                                         request.aggregation)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        except Rt2vError as exc:
            logger.error("retrieval failed: %s", exc)
            raise HTTPException(status_code=500, detail=str(exc)) from exc
        return Response(content=body, media_type="application/json")

    @app.get("/v1/twins/{video_id}")
    def twin(video_id: str) -> Response:
        engine = _engine()
        try:
            text = engine.twin_text(video_id)
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc
        return Response(content=text, media_type="application/json")

    @app.get("/v1/masks/{video_id}/{instance_id}/{frame_index}")
    def mask(video_id: str, instance_id: int, frame_index: int) -> Response:
        engine = _engine()
        try:
            text = engine.mask_text(video_id, instance_id, frame_index)
        except (KeyError, FileNotFoundError) as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc
        return Response(content=text, media_type="text/plain")

    @app.get("/health")
    def health() -> dict:
        return _engine().health()

    return app
