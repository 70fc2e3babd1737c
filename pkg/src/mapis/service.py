"""HTTP/JSON service over a loaded engine.

Bodies are parsed by hand rather than through framework models so every bad
request gets the engine's own field-level messages and a 400, never a crash.
The graph and configuration are read-only after startup; each request owns
its session.
"""
from __future__ import annotations

import json
import logging
import uuid

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from starlette.concurrency import run_in_threadpool

from .errors import BackendError, EmbedError, EmptyGraph, SchemaError, SessionExists, StorageError
from .patient import parse_record
from .store import SessionStore

logger = logging.getLogger(__name__)


def _error(status: int, message: str, **extra) -> JSONResponse:
    return JSONResponse({"error": message, **extra}, status_code=status)


async def _json_body(request: Request):
    raw = await request.body()
    try:
        return json.loads(raw or b"null")
    except (ValueError, UnicodeDecodeError) as exc:
        raise SchemaError(f"body: not valid JSON ({exc})") from None


def create_app(engine, store: SessionStore) -> FastAPI:
    """``engine`` is a :class:`mapis.config.LoadedEngine`; validate it before calling."""
    from .workflow import run_diagnosis

    app = FastAPI(title="mapis", version=_version())
    embedder = engine.embedder()
    cfg = engine.config

    @app.exception_handler(Exception)
    async def _unhandled(request: Request, exc: Exception):  # last line of defence
        logger.exception("unhandled error on %s", request.url.path)
        return _error(500, "internal error")

    @app.get("/healthz")
    async def healthz():
        return {"status": "ok", "backend": engine.backend.info.id, "config_hash": engine.config_hash,
                "kg": engine.kg.graph_hash() if engine.kg is not None else None}

    @app.post("/v1/diagnose")
    async def diagnose(request: Request):
        try:
            body = await _json_body(request)
            record = parse_record(body)
        except SchemaError as exc:
            return _error(400, "invalid patient record", violations=exc.violations)
        session_id = request.query_params.get("session_id") or uuid.uuid4().hex
        try:
            store.path(session_id)
        except StorageError as exc:
            return _error(400, "invalid session id", violations=[f"session_id: {exc}"])
        if session_id in store:
            return _error(409, f"session {session_id} already exists")

        def work():
            return run_diagnosis(record, engine.kg, engine.backend, engine.thresholds, cfg.policy,
                                 embedder=embedder, k=cfg.k, min_score=cfg.min_score, session_id=session_id,
                                 config_hash=engine.config_hash)

        try:
            state, report = await run_in_threadpool(work)
        except BackendError as exc:
            state = getattr(exc, "state", None)
            stored = False
            if state is not None:
                try:
                    store.save_partial(state, f"{type(exc).__name__}: {exc}")
                    stored = True
                except StorageError as store_exc:
                    logger.error("could not keep audit of %s: %s", session_id, store_exc)
            return _error(502, f"agent backend failed: {exc}", session_id=session_id, audit_stored=stored)
        payload = {"session_id": state.session_id, "report": report.to_dict()}
        try:
            store.save(state, report)
        except SessionExists:
            return _error(409, f"session {session_id} already exists")
        except StorageError as exc:
            # the caller still gets the result; persistence failure is reported alongside
            logger.error("could not persist %s: %s", session_id, exc)
            payload["storage_error"] = str(exc)
        return payload

    @app.get("/v1/sessions/{session_id}")
    async def get_session(session_id: str):
        try:
            return store.load_document(session_id)
        except (KeyError, StorageError) as exc:
            if isinstance(exc, KeyError) or session_id not in store:
                return _error(404, f"unknown session {session_id}")
            return _error(500, str(exc))

    @app.post("/v1/kg/query")
    async def kg_query(request: Request):
        from .kg import u_retrieve

        try:
            body = await _json_body(request)
        except SchemaError as exc:
            return _error(400, "invalid query", violations=exc.violations)
        violations = []
        if not isinstance(body, dict):
            violations.append("body: must be a JSON object")
            body = {}
        query, k = body.get("query"), body.get("k", cfg.k)
        if not isinstance(query, str) or not query.strip():
            violations.append("query: must be a non-empty string")
        if isinstance(k, bool) or not isinstance(k, int) or k < 0:
            violations.append("k: must be a non-negative integer")
        if violations:
            return _error(400, "invalid query", violations=violations)
        if engine.kg is None:
            return _error(503, "no knowledge graph loaded")
        try:
            result = await run_in_threadpool(u_retrieve, query, engine.kg, embedder, k)
        except EmptyGraph as exc:
            return _error(503, str(exc))
        except EmbedError as exc:
            return _error(502, f"embedding backend failed: {exc}")
        return result.to_dict()

    return app


def _version() -> str:
    from . import __version__

    return __version__


def serve(engine, store: SessionStore, host: str, port: int) -> None:
    import uvicorn

    uvicorn.run(create_app(engine, store), host=host, port=port, log_level="info")


__all__ = ["create_app", "serve"]
