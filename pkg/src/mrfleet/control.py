"""Differential-drive kinematics and the velocity controllers.

Three controllers: PID lane following on a composite cross-track plus heading
error, linear gap keeping from a lidar distance, and follower behavior that
chases the nearest target seen in a forward cone. Also the closed-form
time-to-intersection used by the intersection manager.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import Pose2D, wrap_angle
from .lidar import LaserScan, nearest_target_in_cone
from .worldmap import LanePath

# Turtlebot3 Burger-class command limits.
DEFAULT_V_MAX = 0.22
DEFAULT_OMEGA_MAX = 2.84

# Heading error contributes at half weight next to cross-track error; a pure
# cross-track PID oscillates on tight circles at these speeds.
HEADING_ERROR_WEIGHT = 0.5

FOLLOWER_CONE_HALF_ANGLE = math.pi / 4.0


@dataclass(frozen=True)
class Twist2D:
    """Velocity command: forward speed and yaw rate."""

    v: float = 0.0
    omega: float = 0.0

    def clamped(self, v_max: float = DEFAULT_V_MAX, omega_max: float = DEFAULT_OMEGA_MAX) -> "Twist2D":
        return Twist2D(
            min(max(self.v, -v_max), v_max),
            min(max(self.omega, -omega_max), omega_max),
        )


def step_diff_drive(pose: Pose2D, cmd: Twist2D, dt: float) -> Pose2D:
    """Exact constant-(v, omega) arc integration over dt."""
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    if abs(cmd.omega) < 1e-9:
        return Pose2D(
            pose.x + cmd.v * dt * math.cos(pose.theta),
            pose.y + cmd.v * dt * math.sin(pose.theta),
            pose.theta,
        )
    radius = cmd.v / cmd.omega
    theta1 = pose.theta + cmd.omega * dt
    return Pose2D(
        pose.x + radius * (math.sin(theta1) - math.sin(pose.theta)),
        pose.y - radius * (math.cos(theta1) - math.cos(pose.theta)),
        theta1,
    )


@dataclass(frozen=True)
class PIDState:
    """Gains plus integrator/derivative memory for the lane controller."""

    kp: float = 2.0
    ki: float = 0.0
    kd: float = 0.5
    integral: float = 0.0
    previous_error: float | None = None
    integral_limit: float = 1.0

    def __post_init__(self):
        if abs(self.integral) > self.integral_limit + 1e-12:
            raise ValueError("integral exceeds its limit")

    def reset(self) -> "PIDState":
        return replace(self, integral=0.0, previous_error=None)


def pid_lane_control(
    state: PIDState,
    pose: Pose2D,
    lane: LanePath,
    v_desired: float,
    dt: float,
    omega_max: float = DEFAULT_OMEGA_MAX,
) -> tuple[Twist2D, PIDState]:
    """Steer onto a lane path; forward speed passes through unchanged.

    The error is signed cross-track distance (positive left of the lane)
    plus half the heading error to the local tangent; positive error steers
    right (negative omega). Lane curvature enters as a feedforward yaw rate,
    otherwise a proportional controller rides a constant offset on circles.
    """
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    proj = lane.project(pose.x, pose.y)
    heading_error = wrap_angle(pose.theta - proj.tangent)
    error = proj.cross_track + HEADING_ERROR_WEIGHT * heading_error
    integral = state.integral + error * dt
    integral = min(max(integral, -state.integral_limit), state.integral_limit)
    derivative = 0.0 if state.previous_error is None else (error - state.previous_error) / dt
    feedforward = v_desired * proj.curvature
    omega = feedforward - (state.kp * error + state.ki * integral + state.kd * derivative)
    omega = min(max(omega, -omega_max), omega_max)
    new_state = replace(state, integral=integral, previous_error=error)
    return Twist2D(v_desired, omega), new_state


def linear_gap_control(
    distance_ahead: float | None, v_desired: float, d_stop: float, d_slow: float
) -> float:
    """Linear speed ramp on the distance to the object ahead.

    None, NaN or infinite distance counts as an open road.
    """
    if not d_slow > d_stop or d_stop < 0:
        raise ValueError("need d_slow > d_stop >= 0")
    if distance_ahead is None or not math.isfinite(distance_ahead):
        return v_desired
    ramp = (distance_ahead - d_stop) / (d_slow - d_stop)
    return v_desired * min(max(ramp, 0.0), 1.0)


@dataclass(frozen=True)
class FollowerGains:
    k_bearing: float = 1.5
    omega_max: float = DEFAULT_OMEGA_MAX


def follower_step(
    scan: LaserScan,
    gap_target: float,
    v_max: float,
    gains: FollowerGains = FollowerGains(),
) -> Twist2D:
    """Chase the nearest target in the +/-45 degree cone of the (merged) scan.

    Speed ramps linearly between half and one-and-a-half gap targets; steering
    is proportional to the target bearing. No target means a zero command.
    """
    target = nearest_target_in_cone(scan, FOLLOWER_CONE_HALF_ANGLE)
    if target is None:
        return Twist2D(0.0, 0.0)
    bearing, distance = target
    v = linear_gap_control(distance, v_max, 0.5 * gap_target, 1.5 * gap_target)
    omega = min(max(gains.k_bearing * bearing, -gains.omega_max), gains.omega_max)
    return Twist2D(v, omega)


def _arc_positions(pose: Pose2D, cmd: Twist2D, ts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if abs(cmd.omega) < 1e-9:
        xs = pose.x + cmd.v * ts * math.cos(pose.theta)
        ys = pose.y + cmd.v * ts * math.sin(pose.theta)
    else:
        radius = cmd.v / cmd.omega
        theta = pose.theta + cmd.omega * ts
        xs = pose.x + radius * (np.sin(theta) - math.sin(pose.theta))
        ys = pose.y - radius * (np.cos(theta) - math.cos(pose.theta))
    return xs, ys


def time_to_intersection(
    pose: Pose2D,
    cmd: Twist2D,
    intersection_point: tuple[float, float],
    capture_radius: float = 0.15,
    horizon: float = 30.0,
    coarse_dt: float = 1e-3,
    refine_tol: float = 1e-4,
) -> float | None:
    """Earliest time the constant-command arc enters the capture disc.

    The exact arc is sampled on a coarse grid and the entry bracket refined
    by bisection; None when the disc is not reached within the horizon.
    """
    if capture_radius <= 0 or horizon <= 0:
        raise ValueError("need capture_radius > 0 and horizon > 0")
    px, py = intersection_point
    cap2 = capture_radius * capture_radius

    def inside(t: float) -> bool:
        xs, ys = _arc_positions(pose, cmd, np.array([t]))
        return (xs[0] - px) ** 2 + (ys[0] - py) ** 2 <= cap2

    ts = np.arange(0.0, horizon + coarse_dt, coarse_dt)
    xs, ys = _arc_positions(pose, cmd, ts)
    hit = (xs - px) ** 2 + (ys - py) ** 2 <= cap2
    indices = np.nonzero(hit)[0]
    if indices.size == 0:
        return None
    first = int(indices[0])
    if first == 0:
        return 0.0
    lo, hi = float(ts[first - 1]), float(ts[first])
    while hi - lo > refine_tol:
        mid = 0.5 * (lo + hi)
        if inside(mid):
            hi = mid
        else:
            lo = mid
    return hi
