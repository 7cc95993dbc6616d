"""Per-robot behaviors executed by the simulation core.

Manual and follower behaviors are stateless wrappers around the controllers.
The roundabout agent adds the route state machine for merges: circulate,
wait for an exit grant, leave along the road, and enter the other roundabout,
reporting movement types to the intersection managers on the way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from ..control import (
    FollowerGains,
    PIDState,
    Twist2D,
    follower_step,
    linear_gap_control,
    pid_lane_control,
)
from ..geometry import Pose2D, wrap_angle
from ..intersection import MOVEMENT_ENTER, MOVEMENT_EXIT, MOVEMENT_FOLLOW
from ..lidar import LaserScan, nearest_target_in_cone
from ..worldmap import LanePath, RoundaboutWorld
from .config import RobotConfig

# Gap keeping on lanes: a narrow cone so corridor walls do not read as
# blocking traffic, and a stop distance that clears the footprint sum
# even with scans one publish interval stale.
LANE_GAP_CONE = math.radians(20.0)

# IM velocity caps expire when not refreshed for this many seconds.
IM_CAP_TTL = 0.5


@dataclass(frozen=True)
class RequestIntent:
    intersection_id: int
    movement: str
    velocity: float
    pose: Pose2D


@dataclass
class AgentContext:
    sim_time: float
    dt: float
    pose: Pose2D
    scan: LaserScan | None


class Behavior(Protocol):
    def step(self, ctx: AgentContext) -> tuple[Twist2D, list[RequestIntent]]: ...


class ManualBehavior:
    def __init__(self, config: RobotConfig):
        self.cmd = Twist2D(config.cmd[0], config.cmd[1])

    def step(self, ctx: AgentContext) -> tuple[Twist2D, list[RequestIntent]]:
        return self.cmd, []


class FollowerBehavior:
    """Chase whatever the scan shows ahead; stop when nothing is there."""

    def __init__(self, config: RobotConfig, v_max: float = 0.22):
        self.gap_target = config.gap_target
        self.v_max = min(v_max, config.v_desired) if config.v_desired > 0 else v_max
        self.gains = FollowerGains()

    def step(self, ctx: AgentContext) -> tuple[Twist2D, list[RequestIntent]]:
        if ctx.scan is None:
            return Twist2D(0.0, 0.0), []
        return follower_step(ctx.scan, self.gap_target, self.v_max, self.gains), []


# Roundabout agent states.
CIRCULATE = "circulate"
EXIT_WAIT = "exit_wait"
EXITING = "exiting"
TRANSIT = "transit"
ENTERING = "entering"


@dataclass(frozen=True)
class ImZone:
    intersection_id: int
    point: tuple[float, float]
    area_radius: float

    def contains(self, pose: Pose2D) -> bool:
        return math.hypot(pose.x - self.point[0], pose.y - self.point[1]) <= self.area_radius


def _arc_waypoints(center, radius, angle_from, angle_to, step_deg=5.0):
    """CCW arc samples from angle_from to angle_to (unwrapped forward)."""
    span = (angle_to - angle_from) % (2.0 * math.pi)
    n = max(int(span / math.radians(step_deg)), 2)
    angles = angle_from + np.linspace(0.0, span, n + 1)
    return [
        (center[0] + radius * math.cos(a), center[1] + radius * math.sin(a))
        for a in angles
    ]


def build_merge_path(world: RoundaboutWorld, origin: int, start_pose: Pose2D) -> LanePath:
    """Open path: along the origin circle to its exit junction, down the road,
    then a half lap onto the target circle."""
    p = world.params
    if origin == 2:
        o_center, o_radius = world.center2, p.r2
        t_center, t_radius = world.center1, p.r1
        exit_point, entry_point = world.west_from, world.west_to
    else:
        o_center, o_radius = world.center1, p.r1
        t_center, t_radius = world.center2, p.r2
        exit_point, entry_point = world.east_from, world.east_to
    start_angle = math.atan2(start_pose.y - o_center[1], start_pose.x - o_center[0])
    exit_angle = math.atan2(exit_point[1] - o_center[1], exit_point[0] - o_center[0])
    entry_angle = math.atan2(entry_point[1] - t_center[1], entry_point[0] - t_center[0])
    waypoints = _arc_waypoints(o_center, o_radius, start_angle, exit_angle)
    waypoints.append(entry_point)
    waypoints.extend(
        _arc_waypoints(t_center, t_radius, entry_angle, entry_angle + math.pi)[1:]
    )
    # De-duplicate junction corners that may coincide with arc endpoints.
    cleaned = [waypoints[0]]
    for pt in waypoints[1:]:
        if math.hypot(pt[0] - cleaned[-1][0], pt[1] - cleaned[-1][1]) > 1e-9:
            cleaned.append(pt)
    return LanePath(cleaned, closed=False)


class RoundaboutAgent:
    """Lane following plus the merge route state machine of the dual-roundabout
    scenario; emits IM requests for the zone its current route segment belongs to."""

    def __init__(
        self,
        config: RobotConfig,
        world: RoundaboutWorld,
        zones: dict[int, ImZone],
        home: int,
        omega_max: float = 2.84,
    ):
        self.robot_id = config.robot_id
        self.world = world
        self.zones = zones
        self.home = home  # roundabout id the robot currently belongs to
        self.v_desired = config.v_desired
        self.d_stop = config.d_stop
        self.d_slow = config.d_slow
        self.omega_max = omega_max
        self.state = CIRCULATE
        self.lane: LanePath = world.lanes[f"circle{home}"]
        self.pid = PIDState()
        self.merge_origin: int | None = None
        self.merge_target: int | None = None
        self.merge_path: LanePath | None = None
        self.last_v = 0.0
        self._requested_v = 0.0
        self._im_cap: float | None = None
        self._im_cap_stamp = -math.inf
        self.merge_completed_at: float | None = None

    # -- runner hooks --------------------------------------------------------

    def command_exit(self, intersection_id: int) -> None:
        """A merge order arrived (scripted event or operator console)."""
        if self.state == CIRCULATE and intersection_id == self.home:
            self.state = EXIT_WAIT
            self.merge_origin = self.home
            self.merge_target = 1 if self.home == 2 else 2

    def on_exit_granted(self, intersection_id: int, pose: Pose2D) -> None:
        if self.state == EXIT_WAIT and intersection_id == self.merge_origin:
            self.merge_path = build_merge_path(self.world, self.merge_origin, pose)
            self.lane = self.merge_path
            self.state = EXITING

    def on_im_velocity(self, velocity: float, sim_time: float) -> None:
        """A decision at the requested velocity is an all-clear echo, not a cap;
        anything lower is a genuine adjustment and binds until refreshed."""
        if velocity >= self._requested_v - 1e-9:
            self._im_cap = None
            return
        self._im_cap = velocity
        self._im_cap_stamp = sim_time

    # -- stepping ------------------------------------------------------------

    def _gap_velocity(self, scan: LaserScan | None, v: float) -> float:
        if scan is None:
            return v
        target = nearest_target_in_cone(scan, LANE_GAP_CONE)
        distance = target[1] if target is not None else None
        return linear_gap_control(distance, v, self.d_stop, self.d_slow)

    def _advance_state(self, ctx: AgentContext) -> None:
        pose = ctx.pose
        if self.state == EXITING:
            o_center = self.world.center1 if self.merge_origin == 1 else self.world.center2
            o_radius = self.world.params.r1 if self.merge_origin == 1 else self.world.params.r2
            off_circle = (
                math.hypot(pose.x - o_center[0], pose.y - o_center[1])
                > o_radius + self.world.params.lane_width
            )
            if off_circle:
                self.state = TRANSIT
        if self.state == TRANSIT:
            zone = self.zones[self.merge_target]
            if zone.contains(pose):
                self.state = ENTERING
        if self.state == ENTERING:
            t_center = self.world.center1 if self.merge_target == 1 else self.world.center2
            t_radius = self.world.params.r1 if self.merge_target == 1 else self.world.params.r2
            on_circle = abs(math.hypot(pose.x - t_center[0], pose.y - t_center[1]) - t_radius) < 0.05
            tangent = math.atan2(pose.y - t_center[1], pose.x - t_center[0]) + math.pi / 2
            aligned = abs(wrap_angle(pose.theta - tangent)) < 0.5
            if on_circle and aligned:
                self.home = self.merge_target
                self.lane = self.world.lanes[f"circle{self.home}"]
                self.state = CIRCULATE
                self.merge_completed_at = ctx.sim_time
                self.pid = self.pid.reset()

    def _requests(self, ctx: AgentContext) -> list[RequestIntent]:
        pose = ctx.pose
        velocity = self.last_v
        self._requested_v = velocity
        state = self.state
        if state in (CIRCULATE, EXIT_WAIT):
            zone = self.zones.get(self.home)
            if zone is not None and zone.contains(pose):
                movement = MOVEMENT_EXIT if state == EXIT_WAIT else MOVEMENT_FOLLOW
                return [RequestIntent(zone.intersection_id, movement, velocity, pose)]
            return []
        if state == EXITING:
            zone = self.zones[self.merge_origin]
            if zone.contains(pose):
                return [RequestIntent(zone.intersection_id, MOVEMENT_EXIT, velocity, pose)]
            return []
        zone = self.zones[self.merge_target]
        if zone.contains(pose):
            return [RequestIntent(zone.intersection_id, MOVEMENT_ENTER, velocity, pose)]
        return []

    def step(self, ctx: AgentContext) -> tuple[Twist2D, list[RequestIntent]]:
        self._advance_state(ctx)
        twist, self.pid = pid_lane_control(
            self.pid, ctx.pose, self.lane, self.v_desired, ctx.dt, self.omega_max
        )
        v = self._gap_velocity(ctx.scan, twist.v)
        if self._im_cap is not None and ctx.sim_time - self._im_cap_stamp <= IM_CAP_TTL:
            v = min(v, self._im_cap)
        self.last_v = v
        return Twist2D(v, twist.omega), self._requests(ctx)


def make_behavior(
    config: RobotConfig,
    world: RoundaboutWorld | None,
    zones: dict[int, ImZone],
) -> Behavior:
    if config.controller == "manual":
        return ManualBehavior(config)
    if config.controller == "follower":
        return FollowerBehavior(config)
    if config.controller == "lane-pid":
        if world is None or config.lane is None:
            raise ValueError(
                f"robot {config.robot_id}: lane-pid requires a roundabout world and a lane"
            )
        home = 1 if config.lane == "circle1" else 2
        return RoundaboutAgent(config, world, zones, home)
    raise ValueError(f"unknown controller {config.controller!r}")
