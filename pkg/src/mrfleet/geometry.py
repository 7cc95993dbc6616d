"""SE(2) pose algebra, a time-stamped transform tree, and 2D frame alignment.

Poses are planar (x, y, theta). Transforms between named frames are buffered
with simulated-time stamps and interpolated on lookup. Frame alignment maps
points between two planar coordinate systems with rotation, translation and
uniform scale (a 2D similarity transform).
"""

from __future__ import annotations

import bisect
import math
import threading
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = math.remainder(theta, TWO_PI)
    if w <= -math.pi:
        w += TWO_PI
    return w


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorized wrap to (-pi, pi]."""
    w = np.remainder(np.asarray(theta, dtype=float) + math.pi, TWO_PI) - math.pi
    return np.where(w <= -math.pi, w + TWO_PI, w)


@dataclass(frozen=True)
class Pose2D:
    """Planar pose: position in meters, heading in radians wrapped to (-pi, pi]."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @staticmethod
    def identity() -> "Pose2D":
        return Pose2D(0.0, 0.0, 0.0)

    def compose(self, other: "Pose2D") -> "Pose2D":
        """Return self * other (apply other in this pose's local frame)."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2D(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )

    def invert(self) -> "Pose2D":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2D(-(c * self.x + s * self.y), -(-s * self.x + c * self.y), -self.theta)

    def apply_point(self, px: float, py: float) -> tuple[float, float]:
        """Map a point given in this pose's local frame into the parent frame."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return (self.x + c * px - s * py, self.y + s * px + c * py)

    def distance_to(self, other: "Pose2D") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def almost_equal(self, other: "Pose2D", tol_xy: float = 1e-9, tol_theta: float = 1e-9) -> bool:
        return (
            abs(self.x - other.x) <= tol_xy
            and abs(self.y - other.y) <= tol_xy
            and abs(wrap_angle(self.theta - other.theta)) <= tol_theta
        )


def compose(a: Pose2D, b: Pose2D) -> Pose2D:
    """SE(2) group operation a * b."""
    return a.compose(b)


def invert(a: Pose2D) -> Pose2D:
    """SE(2) group inverse."""
    return a.invert()


@dataclass(frozen=True)
class StampedTransform:
    """Transform from `parent` frame to `child` frame at a simulated-time stamp."""

    parent: str
    child: str
    transform: Pose2D
    stamp: float

    def __post_init__(self):
        if self.parent == self.child:
            raise FrameGraphError(f"self-transform for frame {self.parent!r}")


class TransformTreeError(Exception):
    """Base class for transform tree failures."""


class UnknownFrameError(TransformTreeError):
    """No transform chain connects the requested frames."""


class ExtrapolationError(TransformTreeError):
    """Requested time lies outside the buffered span of an edge."""


class FrameGraphError(TransformTreeError):
    """Insertion would break the forest structure (cycle, reparent, self-edge)."""


class TransformStampError(TransformTreeError):
    """Stamps on one edge must be non-decreasing as inserted."""


class _EdgeBuffer:
    __slots__ = ("stamps", "poses")

    def __init__(self):
        self.stamps: list[float] = []
        self.poses: list[Pose2D] = []

    def insert(self, stamp: float, pose: Pose2D, window: float) -> None:
        if self.stamps and stamp < self.stamps[-1]:
            raise TransformStampError(
                f"stamp {stamp} older than newest buffered stamp {self.stamps[-1]}"
            )
        self.stamps.append(stamp)
        self.poses.append(pose)
        cutoff = stamp - window
        drop = bisect.bisect_left(self.stamps, cutoff)
        if drop:
            del self.stamps[:drop]
            del self.poses[:drop]

    def sample(self, at: float) -> Pose2D:
        stamps = self.stamps
        if not stamps:
            raise ExtrapolationError("edge has no buffered transforms")
        i = bisect.bisect_left(stamps, at)
        if i < len(stamps) and stamps[i] == at:
            return self.poses[i]
        if i == 0 or i == len(stamps):
            raise ExtrapolationError(
                f"time {at} outside buffered span [{stamps[0]}, {stamps[-1]}]"
            )
        s0, s1 = stamps[i - 1], stamps[i]
        p0, p1 = self.poses[i - 1], self.poses[i]
        f = (at - s0) / (s1 - s0)
        return Pose2D(
            p0.x + f * (p1.x - p0.x),
            p0.y + f * (p1.y - p0.y),
            p0.theta + f * wrap_angle(p1.theta - p0.theta),
        )


class TransformTree:
    """Buffer of stamped transforms over a forest of named frames.

    Single-writer / multi-reader: the simulation tick inserts, any thread may
    look up. A retention window (simulated seconds) bounds per-edge memory.
    """

    def __init__(self, window: float = 10.0):
        self._window = float(window)
        self._edges: dict[tuple[str, str], _EdgeBuffer] = {}
        self._parent_of: dict[str, str] = {}
        self._lock = threading.RLock()

    def insert(self, st: StampedTransform) -> None:
        with self._lock:
            known_parent = self._parent_of.get(st.child)
            if known_parent is not None and known_parent != st.parent:
                raise FrameGraphError(
                    f"frame {st.child!r} already has parent {known_parent!r}"
                )
            if known_parent is None:
                # Adding a new edge: reject if child is an ancestor of parent.
                cur = st.parent
                while cur is not None:
                    if cur == st.child:
                        raise FrameGraphError(
                            f"edge {st.parent!r}->{st.child!r} would close a cycle"
                        )
                    cur = self._parent_of.get(cur)
            buf = self._edges.get((st.parent, st.child))
            if buf is None:
                buf = _EdgeBuffer()
                buf.insert(st.stamp, st.transform, self._window)
                self._edges[(st.parent, st.child)] = buf
                self._parent_of[st.child] = st.parent
            else:
                buf.insert(st.stamp, st.transform, self._window)

    def lookup(self, parent: str, child: str, at: float) -> Pose2D:
        """Chain per-edge transforms from `parent` down to `child`, interpolated at `at`."""
        with self._lock:
            if parent == child:
                if parent not in self._parent_of and parent not in {
                    p for p, _ in self._edges
                }:
                    raise UnknownFrameError(f"unknown frame {parent!r}")
                return Pose2D.identity()
            chain: list[tuple[str, str]] = []
            cur = child
            while cur != parent:
                up = self._parent_of.get(cur)
                if up is None:
                    raise UnknownFrameError(f"no chain from {parent!r} to {child!r}")
                chain.append((up, cur))
                cur = up
            out = Pose2D.identity()
            for edge in reversed(chain):
                out = out.compose(self._edges[edge].sample(at))
            return out

    def has_frame(self, frame: str) -> bool:
        with self._lock:
            return frame in self._parent_of or any(p == frame for p, _ in self._edges)

    def edges(self) -> list[tuple[str, str]]:
        with self._lock:
            return sorted(self._edges)


@dataclass(frozen=True)
class FrameAlignment:
    """2D similarity transform: p' = scale * R(rotation) @ p + (tx, ty)."""

    rotation: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if not (self.scale > 0.0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive, got {self.scale}")

    @staticmethod
    def identity() -> "FrameAlignment":
        return FrameAlignment()

    def apply_point(self, px: float, py: float) -> tuple[float, float]:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return (
            self.scale * (c * px - s * py) + self.tx,
            self.scale * (s * px + c * py) + self.ty,
        )

    def inverse(self) -> "FrameAlignment":
        c, s = math.cos(-self.rotation), math.sin(-self.rotation)
        inv_scale = 1.0 / self.scale
        return FrameAlignment(
            rotation=-self.rotation,
            tx=-inv_scale * (c * self.tx - s * self.ty),
            ty=-inv_scale * (s * self.tx + c * self.ty),
            scale=inv_scale,
        )

    def nudged(self, rotation=0.0, tx=0.0, ty=0.0, scale=1.0) -> "FrameAlignment":
        """Incremental operator edit: additive in rotation/translation, multiplicative in scale."""
        return FrameAlignment(
            rotation=wrap_angle(self.rotation + rotation),
            tx=self.tx + tx,
            ty=self.ty + ty,
            scale=self.scale * scale,
        )


class DegenerateInputError(ValueError):
    """Alignment estimation input does not constrain the transform."""


def estimate_alignment(
    pairs: Sequence[tuple[tuple[float, float], tuple[float, float]]],
) -> FrameAlignment:
    """Least-squares 2D similarity (rotation, translation, uniform scale) from point pairs.

    Each pair maps a point in frame A to its observed location in frame B.
    Closed-form solution via the cross-covariance of the centered point sets.
    Raises DegenerateInputError when the A-points are (nearly) coincident.
    """
    if len(pairs) < 2:
        raise DegenerateInputError("need at least 2 point pairs")
    a = np.array([p[0] for p in pairs], dtype=float)
    b = np.array([p[1] for p in pairs], dtype=float)
    mu_a = a.mean(axis=0)
    mu_b = b.mean(axis=0)
    ac = a - mu_a
    bc = b - mu_b
    var_a = float((ac**2).sum()) / len(pairs)
    if var_a < 1e-24:
        raise DegenerateInputError("all source points coincide")
    m = bc.T @ ac / len(pairs)
    rotation = math.atan2(m[1, 0] - m[0, 1], m[0, 0] + m[1, 1])
    c, s = math.cos(rotation), math.sin(rotation)
    scale = ((m[0, 0] + m[1, 1]) * c + (m[1, 0] - m[0, 1]) * s) / var_a
    if not (scale > 0.0):
        raise DegenerateInputError(f"recovered non-positive scale {scale}")
    tx = mu_b[0] - scale * (c * mu_a[0] - s * mu_a[1])
    ty = mu_b[1] - scale * (s * mu_a[0] + c * mu_a[1])
    return FrameAlignment(rotation=rotation, tx=tx, ty=ty, scale=scale)


def alignment_residual(
    align: FrameAlignment,
    pairs: Iterable[tuple[tuple[float, float], tuple[float, float]]],
) -> float:
    """Sum of squared distances between mapped A-points and their B-points."""
    total = 0.0
    for (ax, ay), (bx, by) in pairs:
        mx, my = align.apply_point(ax, ay)
        total += (mx - bx) ** 2 + (my - by) ** 2
    return total


def project_to_virtual(pose_physical: Pose2D, align: FrameAlignment) -> Pose2D:
    """Map a physical-frame pose into the virtual frame through the alignment."""
    x, y = align.apply_point(pose_physical.x, pose_physical.y)
    return Pose2D(x, y, pose_physical.theta + align.rotation)


def project_to_physical(pose_virtual: Pose2D, align: FrameAlignment) -> Pose2D:
    """Inverse of project_to_virtual."""
    return project_to_virtual(pose_virtual, align.inverse())
