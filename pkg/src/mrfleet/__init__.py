"""Mixed-reality multi-robot simulation framework.

Emulated physical robots localize themselves on a private map, get projected
as doppelgangers into a shared virtual world, perceive virtual objects
through virtual lidar, and interact with purely virtual robots under
follower control and FIFO intersection management. All traffic flows over a
JSON pub/sub bridge served by a FastAPI WebSocket endpoint.
"""

__version__ = "0.1.0"
