"""FastAPI service: the bridge WebSocket endpoint plus a REST control plane.

The WebSocket at `/` speaks the pub/sub protocol (one JSON object per text
frame). REST endpoints expose health, the topic registry, and scenario run
management; the CLI is a thin client of these.
"""

from __future__ import annotations

import asyncio

from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect

from ..bridge.broker import BridgeHub
from .models import (
    HealthResponse,
    RunAccepted,
    RunStatusResponse,
    RunSubmission,
    TopicInfo,
    TopicsResponse,
)
from .runs import RunBusyError, RunManager, UnknownRunError

OUTBOX_POLL_SECONDS = 0.2


def create_app(hub: BridgeHub | None = None) -> FastAPI:
    app = FastAPI(title="mrfleet bridge service", version="0.1.0")
    app.state.hub = hub or BridgeHub()
    app.state.ws_url = "ws://127.0.0.1:9090/"
    app.state.run_manager = RunManager(
        hub=app.state.hub, ws_url_getter=lambda: app.state.ws_url
    )

    @app.websocket("/")
    async def bridge_socket(ws: WebSocket):
        await ws.accept()
        hub: BridgeHub = app.state.hub
        endpoint = hub.create_endpoint()
        loop = asyncio.get_running_loop()

        async def pump_outbox():
            try:
                while True:
                    text = await loop.run_in_executor(None, endpoint.get, OUTBOX_POLL_SECONDS)
                    if endpoint.closed:
                        await ws.close()
                        return
                    if text is not None:
                        await ws.send_text(text)
            except Exception:
                return

        writer = asyncio.create_task(pump_outbox())
        try:
            while True:
                raw = await ws.receive_text()
                hub.submit(endpoint.client_id, raw)
        except WebSocketDisconnect:
            pass
        finally:
            hub.remove_endpoint(endpoint.client_id)
            writer.cancel()

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        hub: BridgeHub = app.state.hub
        return HealthResponse(
            clients=len(hub.connected_clients()),
            topics=len(hub.topics()),
            active_run=app.state.run_manager.active_run(),
        )

    @app.get("/topics", response_model=TopicsResponse)
    def topics() -> TopicsResponse:
        return TopicsResponse(
            topics=[TopicInfo.model_validate(t) for t in app.state.hub.topics()]
        )

    @app.post("/runs", response_model=RunAccepted, status_code=202)
    def submit_run(submission: RunSubmission) -> RunAccepted:
        from ..scenario.config import ConfigInvalidError, load_config, load_template

        try:
            if submission.template is not None:
                config = load_template(submission.template)
            else:
                config = load_config(text=submission.config_toml)
            if submission.duration is not None:
                config = config.with_duration(submission.duration)
        except ConfigInvalidError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        try:
            run_id = app.state.run_manager.submit(
                config, seed=submission.seed, log_dir=submission.log_dir
            )
        except RunBusyError as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from exc
        return RunAccepted(run_id=run_id)

    @app.get("/runs/{run_id}", response_model=RunStatusResponse)
    def run_status(run_id: str) -> RunStatusResponse:
        try:
            record = app.state.run_manager.record(run_id)
        except UnknownRunError as exc:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id}") from exc
        return RunStatusResponse(
            run_id=record.run_id,
            state=record.state,
            error=record.error,
            log_dir=record.log_dir,
            summary=record.summary,
        )

    @app.get("/runs/{run_id}/metrics")
    def run_metrics(run_id: str) -> dict:
        try:
            record = app.state.run_manager.record(run_id)
        except UnknownRunError as exc:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id}") from exc
        if record.metrics is None:
            raise HTTPException(status_code=409, detail="run has no metrics yet")
        return record.metrics.to_dict()

    return app
