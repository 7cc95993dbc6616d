"""Bridge: JSON pub/sub over WebSocket plus in-process endpoints."""

from .broker import BridgeHub, Broker, ClockBroadcaster, Delivery, Endpoint, publish_text

__all__ = [
    "BridgeHub",
    "Broker",
    "ClockBroadcaster",
    "Delivery",
    "Endpoint",
    "publish_text",
]
