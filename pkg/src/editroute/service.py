"""HTTP service: apply edits and answer queries on a live memory."""

from __future__ import annotations

import threading
from pathlib import Path
from typing import Any, Optional

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, field_validator

from .augmenter import Edit
from .config import Config, build_system
from .errors import EditRouteError
from .router import EditingSystem

STATUS = {"bad_request": 400, "schema_error": 422, "backend_unavailable": 503, "not_trained": 409}


class EditIn(BaseModel):
    query: str
    answer: str
    id: Optional[str] = None

    @field_validator("query", "answer")
    @classmethod
    def _non_empty(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("must be non-empty")
        return v


class QueryIn(BaseModel):
    query: str

    @field_validator("query")
    @classmethod
    def _non_empty(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("must be non-empty")
        return v


class SnapshotIn(BaseModel):
    path: Optional[str] = None


def error_body(code: str, message: str, detail: Any = None) -> dict:
    return {"error": {"code": code, "message": message, "detail": detail}}


def create_app(
    config: Config | None = None,
    system: EditingSystem | None = None,
    snapshot_path: str | Path | None = None,
) -> FastAPI:
    """Build the app from ``config``, or around an already-wired ``system``."""
    if system is None:
        config = config or Config()
        system = build_system(config, strict_filter=False)
    if snapshot_path is None and config is not None:
        snapshot_path = config.persistence.memory_snapshot_path
    app = FastAPI(title="editroute")
    app.state.system = system
    app.state.snapshot_path = Path(snapshot_path) if snapshot_path else None
    edit_lock = threading.Lock()

    @app.exception_handler(EditRouteError)
    async def _domain_error(request: Request, exc: EditRouteError):
        return JSONResponse(error_body(exc.code, exc.message, exc.detail), status_code=STATUS.get(exc.code, 400))

    @app.exception_handler(RequestValidationError)
    async def _validation_error(request: Request, exc: RequestValidationError):
        detail = [{"loc": list(e.get("loc", ())), "msg": e.get("msg", "")} for e in exc.errors()]
        return JSONResponse(error_body("bad_request", "malformed request body", detail), status_code=400)

    @app.get("/health")
    def health():
        return {"ok": True}

    @app.post("/edits")
    def post_edit(body: EditIn):
        with edit_lock:
            edit_id = body.id or f"edit-{system.memory.next_step()}"
            if edit_id in system.memory.edits:
                return JSONResponse(error_body("bad_request", f"edit id {edit_id!r} already exists"), status_code=400)
            entries = system.apply_edit(Edit(edit_id, body.query, body.answer, 0))
        return {"edit_id": edit_id, "forms_stored": len(entries)}

    @app.post("/query")
    def post_query(body: QueryIn):
        result = system.answer(body.query)
        decision = result.decision
        payload = {"answer": result.answer, "path": decision.path.value}
        if decision.matched_edit is not None:
            payload["matched_edit_id"] = decision.matched_edit.id
            payload["similarity"] = decision.similarity
        payload["candidates_considered"] = decision.candidates_considered
        payload["candidates_passed_filter"] = decision.candidates_passed_filter
        return payload

    @app.get("/memory/stats")
    def memory_stats():
        return system.memory.stats()

    @app.post("/memory/snapshot")
    def memory_snapshot(body: Optional[SnapshotIn] = None):
        target = Path(body.path) if body and body.path else app.state.snapshot_path
        if target is None:
            return JSONResponse(error_body("bad_request", "no snapshot path configured or given"), status_code=400)
        with edit_lock:  # blocks writers; readers keep using the current view
            entries = system.memory.snapshot(target)
        return {"path": str(target), "entries": entries}

    return app
