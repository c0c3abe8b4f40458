"""HTTP face of the controller: registry, rules, bootstrap approvals,
command issuance, and a live audit-event feed (server-sent events with a
JSON polling fallback). Handlers submit work to the controller loop, which
stays the single writer of home state.
"""

from __future__ import annotations

import json
import queue
from pathlib import Path
from typing import Any

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse, StreamingResponse
from pydantic import BaseModel, Field

from .controller import HomeController, VersionConflict
from .policy import RuleForm, UnresolvableScope

SSE_HEARTBEAT_S = 5.0


class RuleBody(BaseModel):
    verb: str
    subject: dict[str, Any] = Field(default_factory=dict)
    object: dict[str, Any] = Field(default_factory=dict)
    expected_version: int | None = None

    def to_form(self) -> RuleForm:
        return RuleForm.from_dict(
            {"verb": self.verb, "subject": self.subject, "object": self.object}
        )


class ApproveBody(BaseModel):
    label: str
    token: str
    service: str
    location: str


class CommandBody(BaseModel):
    topic: str
    params: Any = ""
    redundancy: int = 2


def _params_bytes(params: Any) -> bytes:
    if isinstance(params, bytes):
        return params
    if isinstance(params, str):
        return params.encode("utf-8")
    return json.dumps(params, sort_keys=True).encode("utf-8")


def create_app(controller: HomeController,
               frontend_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="sovereign-controller", docs_url=None, redoc_url=None)

    @app.exception_handler(UnresolvableScope)
    async def _scope_error(request: Request, exc: UnresolvableScope):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.exception_handler(VersionConflict)
    async def _conflict(request: Request, exc: VersionConflict):
        return JSONResponse(
            status_code=409,
            content={"error": str(exc), "policy_version": exc.current_version},
        )

    @app.get("/api/status")
    def status() -> dict:
        return controller.call(controller.status)

    @app.get("/api/entities")
    def entities() -> list[dict]:
        def collect():
            return [
                record.public_view(
                    [k.name.to_uri()
                     for k in controller.keys.authorized_keys(record.name)]
                )
                for record in controller.registry.values()
            ]

        return controller.call(collect)

    @app.get("/api/rules")
    def rules() -> dict:
        def collect():
            return {
                "policy_version": controller.policy_version,
                "rules": [stored.public_view() for stored in controller.rules],
                "policies": [p.to_line() for p in controller.policy_set],
            }

        return controller.call(collect)

    @app.post("/api/rules")
    def add_rule(body: RuleBody) -> dict:
        stored = controller.call(
            controller.add_rule, body.to_form(),
            "user", body.expected_version,
        )
        return {"id": stored.rule_id, "policy_version": controller.policy_version}

    @app.delete("/api/rules/{rule_id}")
    def remove_rule(rule_id: int, expected_version: int | None = None) -> dict:
        try:
            controller.call(controller.remove_rule, rule_id, expected_version)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"no rule {rule_id}")
        return {"policy_version": controller.policy_version}

    @app.get("/api/bootstrap/pending")
    def pending() -> list[dict]:
        return controller.call(controller.pending_bootstraps)

    @app.post("/api/bootstrap/approve")
    def approve(body: ApproveBody) -> dict:
        try:
            bytes.fromhex(body.token)
        except ValueError:
            raise HTTPException(status_code=400, detail="token must be hex")
        controller.call(controller.approve_bootstrap, body.label, body.token,
                        body.service, body.location)
        return {"label": body.label, "status": "armed"}

    @app.post("/api/bootstrap/deny")
    def deny(body: dict) -> dict:
        label = str(body.get("label", ""))
        controller.call(controller.deny_bootstrap, label)
        return {"label": label, "status": "denied"}

    @app.post("/api/commands")
    def command(body: CommandBody) -> dict:
        item = controller.call(controller.issue_command, body.topic,
                               _params_bytes(body.params), body.redundancy)
        return {"published": item.data.name.to_uri(), "topic": body.topic}

    @app.post("/api/keys/rotate")
    def rotate(body: dict) -> dict:
        scope = str(body.get("scope", ""))
        if not scope:
            raise HTTPException(status_code=400, detail="scope required")
        ekey, _ = controller.call(controller.rotate_key, scope)
        return {"scope": scope, "version": ekey.version}

    @app.get("/api/events")
    def events(request: Request, since: int = 0, stream: bool = False,
               limit: int = 0):
        """Audit feed: server-sent events when streaming is requested, plain
        JSON (the polling fallback) otherwise. `limit` ends the stream after
        that many events, for bounded consumers and tests."""
        wants_sse = stream or "text/event-stream" in request.headers.get("accept", "")
        if not wants_sse:
            return {"events": [e.to_dict() for e in
                               controller.call(controller.events_since, since)]}

        def sse():
            box: queue.Queue = queue.Queue()
            remove = controller.add_event_listener(box.put)
            sent = 0
            try:
                last = since
                for event in controller.events_since(since):
                    last = event.seq
                    sent += 1
                    yield f"id: {event.seq}\ndata: {json.dumps(event.to_dict())}\n\n"
                    if limit and sent >= limit:
                        return
                while True:
                    try:
                        event = box.get(timeout=SSE_HEARTBEAT_S)
                    except queue.Empty:
                        yield ": heartbeat\n\n"
                        continue
                    if event.seq <= last:
                        continue
                    last = event.seq
                    sent += 1
                    yield f"id: {event.seq}\ndata: {json.dumps(event.to_dict())}\n\n"
                    if limit and sent >= limit:
                        return
            finally:
                remove()

        return StreamingResponse(sse(), media_type="text/event-stream")

    if frontend_dir is not None and Path(frontend_dir).is_dir():
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=str(frontend_dir), html=True),
                  name="console")

    return app
