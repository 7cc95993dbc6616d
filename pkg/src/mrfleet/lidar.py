"""2D lidar simulation against an occupancy grid plus dynamic disc footprints.

Beams traverse grid cells with a DDA march and test robot footprints with an
analytic ray-disc intersection; the nearer hit wins. The same routine produces
both the emulated physical scans and the doppelganger's virtual scans; merging
takes the per-beam minimum so a physical robot perceives virtual objects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Pose2D
from .worldmap import OccupancyGrid, RobotFootprint

# Beams whose range gap is below this cluster into one target (meters).
CLUSTER_GAP = 0.1


class PoseOutsideMapError(ValueError):
    pass


class ParamMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ScanParams:
    """Beam fan geometry; defaults mimic a 360-beam hobby-class 2D lidar."""

    angle_min: float = -math.pi
    angle_increment: float = 2.0 * math.pi / 360.0
    n_beams: int = 360
    range_min: float = 0.12
    range_max: float = 3.5

    def __post_init__(self):
        if self.n_beams < 1 or self.angle_increment <= 0:
            raise ValueError("scan needs at least one beam and positive increment")
        if not (0 <= self.range_min < self.range_max):
            raise ValueError("need 0 <= range_min < range_max")

    @property
    def angle_max(self) -> float:
        return self.angle_min + (self.n_beams - 1) * self.angle_increment

    def bearings(self) -> np.ndarray:
        return self.angle_min + np.arange(self.n_beams) * self.angle_increment


@dataclass(frozen=True)
class LaserScan:
    """One beam fan; NaN in `ranges` marks no-return."""

    frame: str
    stamp: float
    angle_min: float
    angle_max: float
    angle_increment: float
    range_min: float
    range_max: float
    ranges: np.ndarray

    def __post_init__(self):
        ranges = np.asarray(self.ranges, dtype=float)
        ranges.setflags(write=False)
        object.__setattr__(self, "ranges", ranges)
        expected = int(math.floor((self.angle_max - self.angle_min) / self.angle_increment + 1e-9)) + 1
        if ranges.size != expected:
            raise ValueError(f"scan has {ranges.size} ranges, geometry implies {expected}")
        finite = ranges[np.isfinite(ranges)]
        if finite.size and (finite.min() < self.range_min - 1e-9 or finite.max() > self.range_max + 1e-9):
            raise ValueError("finite ranges must lie within [range_min, range_max]")

    def bearings(self) -> np.ndarray:
        return self.angle_min + np.arange(self.ranges.size) * self.angle_increment

    def params(self) -> ScanParams:
        return ScanParams(
            angle_min=self.angle_min,
            angle_increment=self.angle_increment,
            n_beams=int(self.ranges.size),
            range_min=self.range_min,
            range_max=self.range_max,
        )


def _grid_raycast(pose: Pose2D, grid: OccupancyGrid, angles: np.ndarray, max_range: float) -> np.ndarray:
    """Distance to the first occupied cell per beam (inf when none within range).

    Amanatides-Woo style DDA over the occupancy mask, vectorized across beams;
    the returned distance is the ray parameter at which the beam enters the
    blocking cell, so the error against exact geometry is below one cell.
    """
    res = grid.resolution
    occ = grid.occupied_mask()
    h, w = occ.shape
    n = angles.size
    # Work in cell units.
    gx = (pose.x - grid.origin.x) / res
    gy = (pose.y - grid.origin.y) / res
    dx = np.cos(angles)
    dy = np.sin(angles)
    t_limit = max_range / res

    col = np.full(n, int(math.floor(gx)), dtype=np.int64)
    row = np.full(n, int(math.floor(gy)), dtype=np.int64)
    step_x = np.where(dx > 0, 1, -1).astype(np.int64)
    step_y = np.where(dy > 0, 1, -1).astype(np.int64)
    with np.errstate(divide="ignore"):
        t_delta_x = np.abs(1.0 / dx)
        t_delta_y = np.abs(1.0 / dy)
    next_x = np.where(dx > 0, col + 1.0, col)
    next_y = np.where(dy > 0, row + 1.0, row)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_max_x = np.where(dx != 0, (next_x - gx) / dx, np.inf)
        t_max_y = np.where(dy != 0, (next_y - gy) / dy, np.inf)

    hit_t = np.full(n, np.inf)
    t_entry = np.zeros(n)
    idx = np.arange(n)
    while idx.size:
        inside = (row[idx] >= 0) & (row[idx] < h) & (col[idx] >= 0) & (col[idx] < w)
        sub = idx[inside]
        if sub.size:
            blocked = occ[row[sub], col[sub]]
            hits = sub[blocked]
            hit_t[hits] = t_entry[hits]
        # Cells outside the grid read as free: beams keep marching (a pose may
        # graze the boundary) until they hit, or exceed the range limit.
        keep = np.isinf(hit_t[idx]) & (t_entry[idx] <= t_limit)
        idx = idx[keep]
        if not idx.size:
            break
        use_x = t_max_x[idx] < t_max_y[idx]
        t_entry[idx] = np.where(use_x, t_max_x[idx], t_max_y[idx])
        col[idx] += np.where(use_x, step_x[idx], 0)
        row[idx] += np.where(use_x, 0, step_y[idx])
        t_max_x[idx] += np.where(use_x, t_delta_x[idx], 0.0)
        t_max_y[idx] += np.where(use_x, 0.0, t_delta_y[idx])
    return hit_t * res


def _disc_raycast(
    pose: Pose2D,
    angles: np.ndarray,
    footprints: Sequence[RobotFootprint],
    exclude_id: int | None,
) -> np.ndarray:
    """Nearest analytic ray-disc hit per beam (inf when none)."""
    n = angles.size
    best = np.full(n, np.inf)
    dx = np.cos(angles)
    dy = np.sin(angles)
    for fp in footprints:
        if exclude_id is not None and fp.robot_id == exclude_id:
            continue
        ox = pose.x - fp.center.x
        oy = pose.y - fp.center.y
        b = ox * dx + oy * dy
        c0 = ox * ox + oy * oy - fp.radius * fp.radius
        disc = b * b - c0
        valid = disc >= 0.0
        sq = np.sqrt(np.where(valid, disc, 0.0))
        t = -b - sq
        # Origin inside the disc counts as an immediate hit.
        t = np.where(t < 0.0, np.where(-b + sq >= 0.0, 0.0, np.inf), t)
        t = np.where(valid, t, np.inf)
        best = np.minimum(best, t)
    return best


def cast_scan(
    pose: Pose2D,
    grid: OccupancyGrid,
    footprints: Sequence[RobotFootprint] = (),
    params: ScanParams = ScanParams(),
    noise_sigma: float = 0.0,
    rng: np.random.Generator | int | None = None,
    frame: str = "scan",
    stamp: float = 0.0,
    exclude_id: int | None = None,
) -> LaserScan:
    """Cast one beam fan from `pose` against the grid and the robot footprints.

    Gaussian range noise of `noise_sigma` is drawn per beam index from `rng`,
    so identical seeds give bit-identical scans. True hits beyond range_max
    report no-return; everything else is clamped into [range_min, range_max].

    Poses grazing the grid edge are tolerated (cells outside the grid read as
    free space); a pose farther than range_max outside the grid envelope is
    rejected as a misuse.
    """
    margin = params.range_max
    if (
        pose.x < grid.origin.x - margin
        or pose.y < grid.origin.y - margin
        or pose.x > grid.origin.x + grid.width * grid.resolution + margin
        or pose.y > grid.origin.y + grid.height * grid.resolution + margin
    ):
        raise PoseOutsideMapError(f"scan pose ({pose.x}, {pose.y}) outside the grid")
    angles = pose.theta + params.bearings()
    true_range = _grid_raycast(pose, grid, angles, params.range_max + grid.resolution)
    if footprints:
        true_range = np.minimum(true_range, _disc_raycast(pose, angles, footprints, exclude_id))
    ranges = true_range.copy()
    if noise_sigma > 0.0:
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        noise = gen.normal(0.0, noise_sigma, ranges.size)
        finite = np.isfinite(ranges)
        ranges[finite] += noise[finite]
    no_return = true_range > params.range_max
    ranges = np.clip(ranges, params.range_min, params.range_max)
    ranges[no_return] = np.nan
    return LaserScan(
        frame=frame,
        stamp=stamp,
        angle_min=params.angle_min,
        angle_max=params.angle_max,
        angle_increment=params.angle_increment,
        range_min=params.range_min,
        range_max=params.range_max,
        ranges=ranges,
    )


def merge_scans(physical: LaserScan, virtual: LaserScan) -> LaserScan:
    """Per-beam minimum of two scans; no-return loses to any finite range."""
    if physical.frame != virtual.frame:
        raise ParamMismatchError(
            f"frame mismatch: {physical.frame!r} vs {virtual.frame!r}"
        )
    if physical.ranges.size != virtual.ranges.size:
        raise ParamMismatchError(
            f"beam count mismatch: {physical.ranges.size} vs {virtual.ranges.size}"
        )
    for attr in ("angle_min", "angle_max", "angle_increment"):
        if getattr(physical, attr) != getattr(virtual, attr):
            raise ParamMismatchError(f"{attr} mismatch")
    merged = np.fmin(physical.ranges, virtual.ranges)
    return LaserScan(
        frame=physical.frame,
        stamp=max(physical.stamp, virtual.stamp),
        angle_min=physical.angle_min,
        angle_max=physical.angle_max,
        angle_increment=physical.angle_increment,
        range_min=min(physical.range_min, virtual.range_min),
        range_max=max(physical.range_max, virtual.range_max),
        ranges=merged,
    )


def nearest_target_in_cone(
    scan: LaserScan, cone_half_angle: float
) -> tuple[float, float] | None:
    """Nearest return cluster within |bearing| <= cone_half_angle.

    Consecutive finite beams whose range gap is below CLUSTER_GAP form one
    cluster; the nearest cluster's (centroid bearing, minimum distance) is
    returned, or None when no finite return lies in the cone.
    """
    bearings = scan.bearings()
    in_cone = np.abs(bearings) <= cone_half_angle + 1e-12
    idx = np.nonzero(in_cone & np.isfinite(scan.ranges))[0]
    if idx.size == 0:
        return None
    clusters: list[tuple[float, float]] = []
    start = 0
    for k in range(1, idx.size + 1):
        boundary = k == idx.size or idx[k] != idx[k - 1] + 1 or abs(
            scan.ranges[idx[k]] - scan.ranges[idx[k - 1]]
        ) >= CLUSTER_GAP
        if boundary:
            members = idx[start:k]
            clusters.append(
                (
                    float(np.mean(bearings[members])),
                    float(np.min(scan.ranges[members])),
                )
            )
            start = k
    best = min(clusters, key=lambda c: c[1])
    return best
