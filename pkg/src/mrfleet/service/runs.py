"""Scenario execution inside the service: one run at a time on a worker thread."""

from __future__ import annotations

import threading
import uuid
from dataclasses import dataclass, field
from typing import Any, Callable


class RunBusyError(RuntimeError):
    pass


class UnknownRunError(KeyError):
    pass


@dataclass
class RunRecord:
    run_id: str
    state: str = "running"
    error: str | None = None
    log_dir: str | None = None
    summary: dict[str, Any] | None = None
    metrics: Any = None


@dataclass
class RunManager:
    """Serializes scenario runs against the shared bridge hub."""

    hub: Any
    ws_url_getter: Callable[[], str]
    _records: dict[str, RunRecord] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock)
    _active: str | None = None

    def submit(self, config, seed: int | None, log_dir: str | None) -> str:
        from ..scenario.runner import run_scenario

        with self._lock:
            if self._active is not None and self._records[self._active].state == "running":
                raise RunBusyError(f"run {self._active} is still executing")
            run_id = uuid.uuid4().hex[:12]
            record = RunRecord(run_id=run_id)
            self._records[run_id] = record
            self._active = run_id

        def work():
            try:
                metrics = run_scenario(
                    config,
                    seed=seed,
                    log_dir=log_dir,
                    hub=self.hub,
                    ws_url=self.ws_url_getter(),
                )
                record.metrics = metrics
                record.log_dir = str(metrics.log_dir) if metrics.log_dir else None
                record.summary = metrics.summary()
                record.state = "finished"
            except Exception as exc:  # surfaced via the status endpoint
                record.error = f"{type(exc).__name__}: {exc}"
                record.state = "failed"

        threading.Thread(target=work, daemon=True).start()
        return run_id

    def record(self, run_id: str) -> RunRecord:
        try:
            return self._records[run_id]
        except KeyError:
            raise UnknownRunError(run_id) from None

    def active_run(self) -> str | None:
        with self._lock:
            if self._active and self._records[self._active].state == "running":
                return self._active
            return None
