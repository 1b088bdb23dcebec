"""HTTP front end: the same session handler behind FastAPI."""

from __future__ import annotations

import threading

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, PlainTextResponse

from ..artifact import ModelArtifact
from .protocol import ErrorResponse, RiskResponse, SampleRequest
from .session import StreamHandler


def create_app(artifact: ModelArtifact, attrib: bool = False) -> FastAPI:
    """Routes:

    * ``POST /v1/samples``: one sample record, one risk record (409 on protocol errors)
    * ``POST /v1/stream``: newline-delimited records in, one response line per record
    * ``DELETE /v1/sessions/{session}``: forget a session's buffer
    * ``GET /v1/model``, ``GET /healthz``
    """
    handler = StreamHandler(artifact, attrib=attrib)
    lock = threading.Lock()
    app = FastAPI(title="spo2warn", version="1")
    app.state.handler = handler

    @app.get("/healthz")
    def healthz() -> dict:
        return {"status": "ok"}

    @app.get("/v1/model")
    def model_info() -> dict:
        return {
            "model_kind": artifact.kind,
            "hyperparameters": artifact.model.hyperparameters(),
            "seed": artifact.seed,
            "data_fingerprint": artifact.data_fingerprint,
            "attrib_default": attrib,
        }

    @app.post("/v1/samples", response_model=RiskResponse, response_model_exclude_none=True)
    def sample(req: SampleRequest):
        with lock:
            out = handler.handle(req)
        if isinstance(out, ErrorResponse):
            return JSONResponse(status_code=409, content=out.model_dump(exclude_none=True))
        return out

    @app.post("/v1/stream", response_class=PlainTextResponse)
    async def stream(request: Request) -> PlainTextResponse:
        body = (await request.body()).decode("utf-8", errors="replace")
        lines = []
        with lock:
            for line in body.splitlines():
                out = handler.handle_line(line)
                if out is not None:
                    lines.append(out)
        return PlainTextResponse("".join(l + "\n" for l in lines), media_type="application/x-ndjson")

    @app.delete("/v1/sessions/{session_id}")
    def drop(session_id: str):
        with lock:
            found = handler.drop(session_id)
        if not found:
            return JSONResponse(status_code=404, content={"error": f"no session {session_id!r}"})
        return {"session": session_id, "dropped": True}

    return app
