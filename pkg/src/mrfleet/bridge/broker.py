"""JSON pub/sub broker: topic registry, fan-out, latching and backpressure.

The Broker is a locked state machine with no I/O: it turns one inbound frame
into a list of deliveries. BridgeHub owns the per-client outboxes, applies
the overflow policy, and is what transports (WebSocket sessions, in-process
endpoints) talk to. The simulation core attaches through the same path as
every other client.
"""

from __future__ import annotations

import json
import threading
from collections import deque
from dataclasses import dataclass, field

from . import schemas

OUTBOX_LIMIT = 1024

OPS = ("advertise", "unadvertise", "publish", "subscribe", "unsubscribe", "status")


@dataclass
class Delivery:
    target: str
    text: str
    kind: str  # "data" | "command"


@dataclass
class _Topic:
    name: str
    schema: str | None = None
    advertised: bool = False
    publishers: dict[str, None] = field(default_factory=dict)
    subscribers: dict[str, None] = field(default_factory=dict)
    latched: str | None = None


def _status_text(level: str, message: str, correlation: str | None) -> str:
    payload: dict = {"op": "status", "level": level, "msg": message}
    if correlation is not None:
        payload["id"] = correlation
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def publish_text(topic: str, msg: object) -> str:
    """Canonical serialization used for fan-out, latches and logs."""
    return json.dumps(
        {"msg": msg, "op": "publish", "topic": topic},
        sort_keys=True,
        separators=(",", ":"),
        allow_nan=False,
    )


class Broker:
    """Registry plus dispatch; thread-safe, deterministic fan-out order."""

    def __init__(self):
        self._topics: dict[str, _Topic] = {}
        self._clients: set[str] = set()
        self._lock = threading.RLock()

    def client_connected(self, client_id: str) -> None:
        with self._lock:
            self._clients.add(client_id)

    def client_disconnected(self, client_id: str) -> None:
        with self._lock:
            self._clients.discard(client_id)
            for topic in self._topics.values():
                topic.publishers.pop(client_id, None)
                topic.subscribers.pop(client_id, None)

    def handle_message(self, client_id: str, raw: str) -> list[Delivery]:
        try:
            frame = json.loads(raw)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            return [Delivery(client_id, _status_text("error", f"malformed JSON: {exc}", None), "data")]
        if not isinstance(frame, dict):
            return [Delivery(client_id, _status_text("error", "frame must be a JSON object", None), "data")]
        op = frame.get("op")
        correlation = frame.get("id") if isinstance(frame.get("id"), str) else None
        with self._lock:
            if client_id not in self._clients:
                return []
            if op == "publish":
                return self._publish(client_id, frame, correlation)
            if op == "subscribe":
                return self._subscribe(client_id, frame, correlation)
            if op == "advertise":
                return self._advertise(client_id, frame, correlation)
            if op == "unadvertise":
                return self._unadvertise(client_id, frame, correlation)
            if op == "unsubscribe":
                return self._unsubscribe(client_id, frame, correlation)
            if op == "status":
                return self._status(client_id, correlation)
            return [
                Delivery(client_id, _status_text("error", f"unknown op {op!r}", correlation), "data")
            ]

    def _topic_field(self, frame: dict) -> str | None:
        topic = frame.get("topic")
        return topic if isinstance(topic, str) and topic else None

    def _advertise(self, client_id: str, frame: dict, corr: str | None) -> list[Delivery]:
        name = self._topic_field(frame)
        schema = frame.get("type")
        if name is None or not isinstance(schema, str):
            return [Delivery(client_id, _status_text("error", "advertise needs topic and type", corr), "data")]
        if not schemas.known_schema(schema):
            return [Delivery(client_id, _status_text("error", f"unknown schema {schema!r}", corr), "data")]
        topic = self._topics.setdefault(name, _Topic(name))
        if topic.schema is not None and topic.schema != schema:
            return [
                Delivery(
                    client_id,
                    _status_text(
                        "error",
                        f"topic {name} already carries schema {topic.schema}",
                        corr,
                    ),
                    "data",
                )
            ]
        topic.schema = schema
        topic.advertised = True
        topic.publishers[client_id] = None
        return []

    def _unadvertise(self, client_id: str, frame: dict, corr: str | None) -> list[Delivery]:
        name = self._topic_field(frame)
        topic = self._topics.get(name) if name else None
        if topic is None or client_id not in topic.publishers:
            return [Delivery(client_id, _status_text("error", f"not a publisher of {name}", corr), "data")]
        topic.publishers.pop(client_id, None)
        return []

    def _publish(self, client_id: str, frame: dict, corr: str | None) -> list[Delivery]:
        name = self._topic_field(frame)
        topic = self._topics.get(name) if name else None
        if topic is None or not topic.advertised or topic.schema is None:
            return [
                Delivery(
                    client_id,
                    _status_text("error", f"publish before advertise on {name}", corr),
                    "data",
                )
            ]
        msg = frame.get("msg")
        problem = schemas.validate_message(topic.schema, msg)
        if problem is not None:
            return [
                Delivery(
                    client_id,
                    _status_text("error", f"schema violation on {name}: {problem}", corr),
                    "data",
                )
            ]
        try:
            text = publish_text(name, msg)
        except ValueError as exc:
            return [Delivery(client_id, _status_text("error", f"unserializable payload: {exc}", corr), "data")]
        if schemas.is_latched_topic(name):
            topic.latched = text
        kind = schemas.schema_kind(topic.schema)
        return [Delivery(sub, text, kind) for sub in topic.subscribers]

    def _subscribe(self, client_id: str, frame: dict, corr: str | None) -> list[Delivery]:
        name = self._topic_field(frame)
        if name is None:
            return [Delivery(client_id, _status_text("error", "subscribe needs a topic", corr), "data")]
        declared = frame.get("type")
        topic = self._topics.setdefault(name, _Topic(name))
        if isinstance(declared, str):
            if not schemas.known_schema(declared):
                return [Delivery(client_id, _status_text("error", f"unknown schema {declared!r}", corr), "data")]
            if topic.schema is not None and topic.schema != declared:
                return [
                    Delivery(
                        client_id,
                        _status_text(
                            "error",
                            f"topic {name} already carries schema {topic.schema}",
                            corr,
                        ),
                        "data",
                    )
                ]
            if topic.schema is None:
                topic.schema = declared
        topic.subscribers[client_id] = None
        if topic.latched is not None:
            kind = schemas.schema_kind(topic.schema) if topic.schema else "data"
            return [Delivery(client_id, topic.latched, kind)]
        return []

    def _unsubscribe(self, client_id: str, frame: dict, corr: str | None) -> list[Delivery]:
        name = self._topic_field(frame)
        topic = self._topics.get(name) if name else None
        if topic is None or client_id not in topic.subscribers:
            return [Delivery(client_id, _status_text("error", f"not subscribed to {name}", corr), "data")]
        topic.subscribers.pop(client_id, None)
        return []

    def _status(self, client_id: str, corr: str | None) -> list[Delivery]:
        summary = ", ".join(
            f"{t.name}[{t.schema or '?'}]" for t in sorted(self._topics.values(), key=lambda t: t.name)
        )
        return [Delivery(client_id, _status_text("info", f"topics: {summary}", corr), "data")]

    def snapshot(self) -> list[dict]:
        with self._lock:
            return [
                {
                    "name": t.name,
                    "schema": t.schema,
                    "publishers": sorted(t.publishers),
                    "subscribers": sorted(t.subscribers),
                    "latched": t.latched is not None,
                }
                for t in sorted(self._topics.values(), key=lambda t: t.name)
            ]


class Endpoint:
    """One client's connection: an outbox with the overflow policy applied."""

    def __init__(self, client_id: str, hub: "BridgeHub", maxlen: int = OUTBOX_LIMIT):
        self.client_id = client_id
        self._hub = hub
        self._maxlen = maxlen
        self._queue: deque[str] = deque()
        self._cond = threading.Condition()
        self.closed = False

    def _offer(self, text: str, kind: str) -> bool:
        """Enqueue a delivery; False tells the hub to disconnect this client."""
        with self._cond:
            if self.closed:
                return True
            if len(self._queue) >= self._maxlen:
                if kind == "command":
                    return False
                self._queue.popleft()
            self._queue.append(text)
            self._cond.notify_all()
        return True

    def _shutdown(self) -> None:
        with self._cond:
            self.closed = True
            self._cond.notify_all()

    def get(self, timeout: float | None = None) -> str | None:
        """Blocking raw receive; None on timeout or when closed and drained."""
        with self._cond:
            if not self._queue:
                self._cond.wait(timeout)
            if self._queue:
                return self._queue.popleft()
            return None

    def send_raw(self, raw: str) -> None:
        self._hub.submit(self.client_id, raw)

    def send(self, frame: dict) -> None:
        self.send_raw(json.dumps(frame, sort_keys=True, separators=(",", ":"), allow_nan=False))

    def advertise(self, topic: str, schema: str) -> None:
        self.send({"op": "advertise", "topic": topic, "type": schema})

    def subscribe(self, topic: str, schema: str | None = None) -> None:
        frame = {"op": "subscribe", "topic": topic}
        if schema:
            frame["type"] = schema
        self.send(frame)

    def publish(self, topic: str, msg: object) -> None:
        self.send({"op": "publish", "topic": topic, "msg": msg})

    def recv(self, timeout: float | None = None) -> dict | None:
        raw = self.get(timeout)
        return None if raw is None else json.loads(raw)

    def drain(self) -> list[dict]:
        out = []
        while True:
            with self._cond:
                if not self._queue:
                    return out
                raw = self._queue.popleft()
            out.append(json.loads(raw))

    def close(self) -> None:
        self._hub.remove_endpoint(self.client_id)


class ClockBroadcaster:
    """Simulated-time authority: publishes /clock and rejects regressions."""

    def __init__(self, endpoint: Endpoint):
        self._endpoint = endpoint
        self._last: float | None = None
        endpoint.advertise("/clock", "clock")

    def broadcast(self, sim_time: float) -> None:
        if self._last is not None and sim_time < self._last:
            raise ValueError(
                f"clock regression: {sim_time} after {self._last} (never published)"
            )
        self._last = sim_time
        self._endpoint.publish("/clock", {"sim_time": sim_time})

    @property
    def now(self) -> float | None:
        return self._last


class BridgeHub:
    """Broker plus connected endpoints; the single message-routing authority."""

    def __init__(self):
        self.broker = Broker()
        self._endpoints: dict[str, Endpoint] = {}
        self._taps: dict[str, list[str]] = {}
        self.record_all = False  # test hook: capture every inbound frame per client
        self._lock = threading.Lock()
        self._counter = 0

    def create_endpoint(self, client_id: str | None = None) -> Endpoint:
        with self._lock:
            if client_id is None:
                self._counter += 1
                client_id = f"client-{self._counter}"
            if client_id in self._endpoints:
                raise ValueError(f"client id {client_id!r} already connected")
            endpoint = Endpoint(client_id, self)
            self._endpoints[client_id] = endpoint
        self.broker.client_connected(client_id)
        return endpoint

    def remove_endpoint(self, client_id: str) -> None:
        with self._lock:
            endpoint = self._endpoints.pop(client_id, None)
        if endpoint is not None:
            endpoint._shutdown()
            self.broker.client_disconnected(client_id)

    def tap(self, client_id: str) -> list[str]:
        """Record (and expose) every raw frame a client sends; test hook."""
        return self._taps.setdefault(client_id, [])

    def submit(self, client_id: str, raw: str) -> None:
        if self.record_all:
            self._taps.setdefault(client_id, []).append(raw)
        else:
            tap = self._taps.get(client_id)
            if tap is not None:
                tap.append(raw)
        deliveries = self.broker.handle_message(client_id, raw)
        to_drop: list[str] = []
        for delivery in deliveries:
            with self._lock:
                endpoint = self._endpoints.get(delivery.target)
            if endpoint is None:
                continue
            if not endpoint._offer(delivery.text, delivery.kind):
                to_drop.append(delivery.target)
        for target in to_drop:
            self.remove_endpoint(target)

    def connected_clients(self) -> list[str]:
        with self._lock:
            return sorted(self._endpoints)

    def topics(self) -> list[dict]:
        return self.broker.snapshot()
