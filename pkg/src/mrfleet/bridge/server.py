"""Uvicorn harness: run the FastAPI service on a background thread.

Binds its own socket so an ephemeral port (port 0) is discoverable before
any client connects.
"""

from __future__ import annotations

import socket
import threading
import time

import uvicorn


class ServiceHandle:
    """Owns one uvicorn server thread; exposes the bound ws/http URLs."""

    def __init__(self, app, host: str = "127.0.0.1", port: int = 0):
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(128)
        self.host, self.port = self._sock.getsockname()[:2]
        config = uvicorn.Config(
            app, host=host, port=self.port, log_level="warning", ws="websockets-sansio"
        )
        if hasattr(app, "state"):
            app.state.ws_url = self.ws_url
        self._server = uvicorn.Server(config)
        self._thread = threading.Thread(
            target=self._server.run, kwargs={"sockets": [self._sock]}, daemon=True
        )

    @property
    def ws_url(self) -> str:
        return f"ws://{self.host}:{self.port}/"

    @property
    def http_url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self, timeout: float = 10.0) -> "ServiceHandle":
        self._thread.start()
        deadline = time.monotonic() + timeout
        while not self._server.started:
            if not self._thread.is_alive():
                raise RuntimeError("bridge server thread exited during startup")
            if time.monotonic() > deadline:
                raise RuntimeError("bridge server did not start in time")
            time.sleep(0.01)
        return self

    def stop(self, timeout: float = 5.0) -> None:
        self._server.should_exit = True
        self._thread.join(timeout)
        try:
            self._sock.close()
        except OSError:
            pass
