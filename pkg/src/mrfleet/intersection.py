"""Per-roundabout FIFO intersection manager.

Robots inside the manager's area report their velocity and movement type
(exit the intersection, follow the traffic queue, enter the intersection).
Each resolve pass takes the queue head, compares times-to-intersection with
the immediate successor, and slows the later-arrived robot just enough to
clear the conflict window. Exit requests are additionally serialized: only
one exit grant is outstanding per queue until the granted robot has left
the manager's area.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .control import Twist2D, time_to_intersection
from .geometry import Pose2D

MOVEMENT_EXIT = "exit"
MOVEMENT_FOLLOW = "follow"
MOVEMENT_ENTER = "enter"
MOVEMENTS = (MOVEMENT_EXIT, MOVEMENT_FOLLOW, MOVEMENT_ENTER)

# Movement-type pairs that contend for the intersection point.
_CONTENDING = {
    frozenset((MOVEMENT_ENTER,)),  # enter vs enter
    frozenset((MOVEMENT_ENTER, MOVEMENT_EXIT)),
}

DEFAULT_CONFLICT_WINDOW = 1.5


class OutsideIMAreaError(ValueError):
    """Request pose lies outside the manager's area disc."""


class UnknownRobotError(KeyError):
    """Robot is not enqueued with the required movement type."""


@dataclass(frozen=True)
class IMRequest:
    robot_id: int
    velocity: float
    movement: str
    pose: Pose2D
    stamp: float

    def __post_init__(self):
        if self.velocity < 0:
            raise ValueError(f"velocity must be >= 0, got {self.velocity}")
        if self.movement not in MOVEMENTS:
            raise ValueError(f"movement must be one of {MOVEMENTS}, got {self.movement!r}")


@dataclass(frozen=True)
class IMQueue:
    """FIFO queue of requests for one intersection."""

    intersection_id: int
    intersection_point: tuple[float, float]
    area_radius: float
    entries: tuple[IMRequest, ...] = ()

    def robot_ids(self) -> list[int]:
        return [e.robot_id for e in self.entries]

    def find(self, robot_id: int) -> IMRequest | None:
        for e in self.entries:
            if e.robot_id == robot_id:
                return e
        return None


def _distance_to_point(pose: Pose2D, point: tuple[float, float]) -> float:
    return math.hypot(pose.x - point[0], pose.y - point[1])


def enqueue(queue: IMQueue, req: IMRequest) -> IMQueue:
    """Append a request; a repeat from the same robot refreshes its entry in place."""
    if _distance_to_point(req.pose, queue.intersection_point) > queue.area_radius:
        raise OutsideIMAreaError(
            f"robot {req.robot_id} is outside intersection {queue.intersection_id} area"
        )
    entries = list(queue.entries)
    for i, e in enumerate(entries):
        if e.robot_id == req.robot_id:
            entries[i] = req
            return replace(queue, entries=tuple(entries))
    entries.append(req)
    return replace(queue, entries=tuple(entries))


def request_tti(
    req: IMRequest,
    queue: IMQueue,
    capture_radius: float = 0.15,
    horizon: float = 30.0,
    velocity: float | None = None,
) -> float | None:
    """Straight-line time to the intersection point from a request snapshot.

    Requests carry no curvature, so the manager predicts along the heading.
    """
    v = req.velocity if velocity is None else velocity
    return time_to_intersection(
        req.pose, Twist2D(v, 0.0), queue.intersection_point, capture_radius, horizon
    )


def _movements_contend(a: str, b: str) -> bool:
    return frozenset((a, b)) in _CONTENDING


def _slowed_velocity(
    req: IMRequest,
    queue: IMQueue,
    target_tti: float,
    capture_radius: float,
    horizon: float,
) -> float:
    """Bisect over velocity in (0, v] until the request's TTI meets target_tti."""
    lo, hi = 0.0, req.velocity
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if mid <= 0.0:
            break
        tti = request_tti(req, queue, capture_radius, horizon, velocity=mid)
        if tti is None or tti >= target_tti:
            lo = mid  # slow enough (or disc unreachable in horizon): can go faster
        else:
            hi = mid
        if hi - lo < 1e-9:
            break
    return lo


def resolve_step(
    queue: IMQueue,
    conflict_window: float = DEFAULT_CONFLICT_WINDOW,
    capture_radius: float = 0.15,
    horizon: float = 30.0,
) -> tuple[list[tuple[int, float]], IMQueue]:
    """Process the queue head against its immediate successor.

    A conflict exists when both times-to-intersection fall within the window
    of each other and the movement types contend; the later-arrived robot is
    slowed so its TTI lands one window after the head's. The head is removed
    and decisions for the inspected robots are emitted in arrival order.
    """
    if conflict_window <= 0:
        raise ValueError("conflict window must be > 0")
    if not queue.entries:
        return [], queue
    head = queue.entries[0]
    decisions = [(head.robot_id, head.velocity)]
    if len(queue.entries) >= 2:
        nxt = queue.entries[1]
        tti_head = request_tti(head, queue, capture_radius, horizon)
        tti_next = request_tti(nxt, queue, capture_radius, horizon)
        velocity = nxt.velocity
        if (
            tti_head is not None
            and tti_next is not None
            and abs(tti_head - tti_next) < conflict_window
            and _movements_contend(head.movement, nxt.movement)
        ):
            velocity = _slowed_velocity(
                nxt, queue, tti_head + conflict_window, capture_radius, horizon
            )
        decisions.append((nxt.robot_id, velocity))
    return decisions, replace(queue, entries=queue.entries[1:])


def grant_merge(queue: IMQueue, robot_id: int, outstanding: int | None) -> bool:
    """Exit grant: True iff no other exit grant is outstanding this cycle."""
    entry = queue.find(robot_id)
    if entry is None or entry.movement != MOVEMENT_EXIT:
        raise UnknownRobotError(
            f"robot {robot_id} has no exit request at intersection {queue.intersection_id}"
        )
    return outstanding is None or outstanding == robot_id


@dataclass
class IntersectionManager:
    """Single-actor manager for one intersection: mailbox in, decisions out."""

    intersection_id: int
    intersection_point: tuple[float, float]
    area_radius: float
    conflict_window: float = DEFAULT_CONFLICT_WINDOW
    capture_radius: float = 0.15
    horizon: float = 30.0
    grant_stale_after: float = 1.0
    queue: IMQueue = field(init=False)
    outstanding_exit: int | None = field(default=None, init=False)
    _grantee_last_seen: float = field(default=0.0, init=False)
    # Monotonic arrival index per queued robot; a refresh keeps the original
    # index (it replaces the entry in place), re-entry after a pop gets a new
    # one. This is what FIFO fairness is audited against.
    _arrival_counter: int = field(default=0, init=False)
    _arrival_seq: dict = field(default_factory=dict, init=False)

    def __post_init__(self):
        self.queue = IMQueue(self.intersection_id, self.intersection_point, self.area_radius)

    def in_area(self, pose: Pose2D) -> bool:
        return _distance_to_point(pose, self.intersection_point) <= self.area_radius

    def submit(self, req: IMRequest) -> None:
        fresh = self.queue.find(req.robot_id) is None
        self.queue = enqueue(self.queue, req)
        if fresh:
            self._arrival_seq[req.robot_id] = self._arrival_counter
            self._arrival_counter += 1
        if req.robot_id == self.outstanding_exit and req.movement == MOVEMENT_EXIT:
            self._grantee_last_seen = req.stamp

    def try_grant(self, robot_id: int, now: float) -> bool:
        """Evaluate an exit request; records the grant when given."""
        granted = grant_merge(self.queue, robot_id, self.outstanding_exit)
        if granted and self.outstanding_exit is None:
            self.outstanding_exit = robot_id
            self._grantee_last_seen = now
        return granted

    def close_cycle_if_departed(self, now: float) -> bool:
        """Close the exit cycle once the grantee departs.

        Departure is observed through the request stream: a robot executing
        its exit keeps refreshing an exit request while it is still on the
        intersection, and goes silent once it has left.
        """
        if self.outstanding_exit is None:
            return False
        if now - self._grantee_last_seen > self.grant_stale_after:
            self.outstanding_exit = None
            return True
        return False

    def arrival_seq(self, robot_id: int) -> int | None:
        return self._arrival_seq.get(robot_id)

    def resolve_pass(self) -> list[tuple[int, float]]:
        head = self.queue.entries[0].robot_id if self.queue.entries else None
        decisions, self.queue = resolve_step(
            self.queue, self.conflict_window, self.capture_radius, self.horizon
        )
        if head is not None:
            self._arrival_seq.pop(head, None)
        return decisions
