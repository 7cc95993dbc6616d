"""Occupancy-grid world model, map file I/O, scenario geometry and collision checks.

Grids are immutable after construction. The map frame has x right, y up,
and the grid origin is the pose of the corner of cell (0, 0); row index
increases with y. Map files are binary PGM (P5) plus a plain-text metadata
sidecar (`key: value` lines).
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Pose2D, wrap_angle

# Occupancy classification thresholds (fraction of full occupancy).
OCCUPIED_THRESHOLD = 0.65
FREE_THRESHOLD = 0.196

# Pixel values used when writing maps; chosen so classification round-trips.
_PIXEL_OCCUPIED = 0
_PIXEL_FREE = 254
_PIXEL_UNKNOWN = 205

DEFAULT_ROBOT_RADIUS = 0.105  # Turtlebot3 Burger-class disc footprint


class MapError(Exception):
    """Base class for map loading/validation failures."""


class MalformedImageError(MapError):
    pass


class MissingMetadataError(MapError):
    pass


class NonPositiveResolutionError(MapError):
    pass


class InvalidGeometryError(ValueError):
    """Scenario geometry parameters are inconsistent."""


@dataclass(frozen=True)
class MapMetadata:
    resolution: float
    origin_x: float = 0.0
    origin_y: float = 0.0
    origin_theta: float = 0.0


class OccupancyGrid:
    """2D occupancy grid; cell values in [0, 1], NaN marks explicit unknown."""

    def __init__(self, cells: np.ndarray, resolution: float, origin: Pose2D):
        cells = np.asarray(cells, dtype=np.float64)
        if cells.ndim != 2 or cells.shape[0] < 1 or cells.shape[1] < 1:
            raise MapError(f"grid must be 2D and non-empty, got shape {cells.shape}")
        if resolution <= 0:
            raise NonPositiveResolutionError(f"resolution must be > 0, got {resolution}")
        finite = cells[np.isfinite(cells)]
        if finite.size and (finite.min() < 0.0 or finite.max() > 1.0):
            raise MapError("cell values must lie in [0, 1] or be NaN (unknown)")
        if abs(wrap_angle(origin.theta)) > 1e-12:
            raise MapError("rotated grid origins are not supported")
        self.cells = cells
        self.cells.setflags(write=False)
        self.resolution = float(resolution)
        self.origin = origin
        self._occupied: np.ndarray | None = None
        self._distance_field: np.ndarray | None = None

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @staticmethod
    def full_free(width: int, height: int, resolution: float, origin: Pose2D) -> "OccupancyGrid":
        return OccupancyGrid(np.zeros((height, width)), resolution, origin)

    def occupied_mask(self) -> np.ndarray:
        if self._occupied is None:
            with np.errstate(invalid="ignore"):
                m = self.cells >= OCCUPIED_THRESHOLD
            m.setflags(write=False)
            self._occupied = m
        return self._occupied

    def free_mask(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return self.cells <= FREE_THRESHOLD

    def unknown_mask(self) -> np.ndarray:
        return ~(self.occupied_mask() | self.free_mask())

    def world_to_cell(self, x: float, y: float) -> tuple[int, int]:
        """Map-frame point to (row, col); may be out of range."""
        col = int(math.floor((x - self.origin.x) / self.resolution))
        row = int(math.floor((y - self.origin.y) / self.resolution))
        return row, col

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        return (
            self.origin.x + (col + 0.5) * self.resolution,
            self.origin.y + (row + 0.5) * self.resolution,
        )

    def in_bounds(self, x: float, y: float) -> bool:
        row, col = self.world_to_cell(x, y)
        return 0 <= row < self.height and 0 <= col < self.width

    def is_occupied_world(self, x: float, y: float) -> bool:
        row, col = self.world_to_cell(x, y)
        if not (0 <= row < self.height and 0 <= col < self.width):
            return False
        return bool(self.occupied_mask()[row, col])

    def distance_field(self) -> np.ndarray:
        """Meters from each cell center to the nearest occupied cell center.

        Two-pass 5x5 chamfer transform (weights 1, sqrt2, sqrt5); worst-case
        overestimate of the true Euclidean distance is about 2 percent.
        """
        if self._distance_field is None:
            d = _chamfer_distance(self.occupied_mask()) * self.resolution
            d.setflags(write=False)
            self._distance_field = d
        return self._distance_field

    def classification(self) -> np.ndarray:
        """Per-cell class: 1 occupied, 0 free, -1 unknown."""
        out = np.full(self.cells.shape, -1, dtype=np.int8)
        out[self.occupied_mask()] = 1
        out[self.free_mask()] = 0
        return out


def _chamfer_distance(occupied: np.ndarray) -> np.ndarray:
    h, w = occupied.shape
    inf = np.inf
    d = np.where(occupied, 0.0, inf)
    a, b, c = 1.0, math.sqrt(2.0), math.sqrt(5.0)

    def horizontal_scan(row: np.ndarray, reverse: bool) -> np.ndarray:
        # Running min of row[k] + a*(j-k) via an accumulate over row - a*j.
        idx = np.arange(row.size) * a
        if reverse:
            r = row[::-1]
            return (np.minimum.accumulate(r - idx) + idx)[::-1]
        return np.minimum.accumulate(row - idx) + idx

    # Forward pass: rows bottom-up, propagate from below and from the left.
    for i in range(h):
        row = d[i]
        if i >= 1:
            below = d[i - 1]
            row = np.minimum(row, below + a)
            row[1:] = np.minimum(row[1:], below[:-1] + b)
            row[:-1] = np.minimum(row[:-1], below[1:] + b)
            row[2:] = np.minimum(row[2:], below[:-2] + c)
            row[:-2] = np.minimum(row[:-2], below[2:] + c)
        if i >= 2:
            below2 = d[i - 2]
            row[1:] = np.minimum(row[1:], below2[:-1] + c)
            row[:-1] = np.minimum(row[:-1], below2[1:] + c)
        d[i] = horizontal_scan(row, reverse=False)
        d[i] = horizontal_scan(d[i], reverse=True)
    # Backward pass: rows top-down.
    for i in range(h - 1, -1, -1):
        row = d[i]
        if i <= h - 2:
            above = d[i + 1]
            row = np.minimum(row, above + a)
            row[1:] = np.minimum(row[1:], above[:-1] + b)
            row[:-1] = np.minimum(row[:-1], above[1:] + b)
            row[2:] = np.minimum(row[2:], above[:-2] + c)
            row[:-2] = np.minimum(row[:-2], above[2:] + c)
        if i <= h - 3:
            above2 = d[i + 2]
            row[1:] = np.minimum(row[1:], above2[:-1] + c)
            row[:-1] = np.minimum(row[:-1], above2[1:] + c)
        d[i] = horizontal_scan(row, reverse=False)
        d[i] = horizontal_scan(d[i], reverse=True)
    return d


def parse_map_metadata(text: str) -> MapMetadata:
    values: dict[str, float] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise MissingMetadataError(f"bad metadata line: {line!r}")
        key, _, raw = line.partition(":")
        try:
            values[key.strip()] = float(raw.strip())
        except ValueError as exc:
            raise MissingMetadataError(f"bad metadata value in line {line!r}") from exc
    if "resolution" not in values:
        raise MissingMetadataError("metadata missing required key 'resolution'")
    if values["resolution"] <= 0:
        raise NonPositiveResolutionError(
            f"resolution must be > 0, got {values['resolution']}"
        )
    return MapMetadata(
        resolution=values["resolution"],
        origin_x=values.get("origin_x", 0.0),
        origin_y=values.get("origin_y", 0.0),
        origin_theta=values.get("origin_theta", 0.0),
    )


def format_map_metadata(meta: MapMetadata) -> str:
    return (
        f"resolution: {meta.resolution!r}\n"
        f"origin_x: {meta.origin_x!r}\n"
        f"origin_y: {meta.origin_y!r}\n"
        f"origin_theta: {meta.origin_theta!r}\n"
    )


def _read_pgm_token(stream: io.BytesIO) -> bytes:
    token = b""
    while True:
        ch = stream.read(1)
        if not ch:
            raise MalformedImageError("truncated PGM header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = stream.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def load_map(image_bytes: bytes, metadata: MapMetadata | str) -> OccupancyGrid:
    """Load a binary PGM (P5) map image.

    Pixel p maps to occupancy (255 - p) / 255. Image row 0 is the top of the
    map, so rows are flipped into the y-up grid convention.
    """
    if isinstance(metadata, str):
        metadata = parse_map_metadata(metadata)
    if metadata is None:
        raise MissingMetadataError("map metadata is required")
    if metadata.resolution <= 0:
        raise NonPositiveResolutionError(
            f"resolution must be > 0, got {metadata.resolution}"
        )
    stream = io.BytesIO(image_bytes)
    magic = _read_pgm_token(stream)
    if magic != b"P5":
        raise MalformedImageError(f"not a binary PGM (P5) file, magic {magic!r}")
    try:
        width = int(_read_pgm_token(stream))
        height = int(_read_pgm_token(stream))
        maxval = int(_read_pgm_token(stream))
    except ValueError as exc:
        raise MalformedImageError("non-integer PGM header field") from exc
    if width < 1 or height < 1:
        raise MalformedImageError(f"bad PGM dimensions {width}x{height}")
    if maxval != 255:
        raise MalformedImageError(f"only 8-bit PGM supported, maxval {maxval}")
    data = stream.read()
    if len(data) != width * height:
        raise MalformedImageError(
            f"PGM payload has {len(data)} bytes, expected {width * height}"
        )
    pixels = np.frombuffer(data, dtype=np.uint8).reshape(height, width)
    occupancy = (255.0 - pixels) / 255.0
    cells = np.flipud(occupancy).copy()
    origin = Pose2D(metadata.origin_x, metadata.origin_y, metadata.origin_theta)
    return OccupancyGrid(cells, metadata.resolution, origin)


def save_map(grid: OccupancyGrid) -> tuple[bytes, str]:
    """Serialize a grid to (PGM bytes, metadata text); classification round-trips."""
    pixels = np.full(grid.cells.shape, _PIXEL_UNKNOWN, dtype=np.uint8)
    pixels[grid.occupied_mask()] = _PIXEL_OCCUPIED
    pixels[grid.free_mask()] = _PIXEL_FREE
    pixels = np.flipud(pixels)
    header = f"P5\n{grid.width} {grid.height}\n255\n".encode("ascii")
    meta = format_map_metadata(
        MapMetadata(grid.resolution, grid.origin.x, grid.origin.y, grid.origin.theta)
    )
    return header + pixels.tobytes(), meta


@dataclass(frozen=True)
class RobotFootprint:
    """Disc footprint standing in for a collision mesh."""

    robot_id: int
    center: Pose2D
    radius: float = DEFAULT_ROBOT_RADIUS

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"footprint radius must be > 0, got {self.radius}")


@dataclass(frozen=True)
class LaneProjection:
    """Result of projecting a point onto a lane path."""

    cross_track: float  # signed, positive left of travel direction
    tangent: float  # heading of the lane at the closest point
    arc_position: float  # distance along the path to the closest point
    distance: float  # unsigned distance to the path
    curvature: float  # signed turn rate per meter of the local segment pair


class LanePath:
    """Ordered waypoint path; optionally closed into a loop."""

    def __init__(self, waypoints: Sequence[tuple[float, float]], closed: bool = False):
        pts = np.array(waypoints, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise InvalidGeometryError("lane path needs at least 2 waypoints")
        seg = np.diff(pts, axis=0)
        if closed:
            seg = np.vstack([seg, pts[0] - pts[-1]])
        lengths = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(lengths < 1e-12):
            raise InvalidGeometryError("consecutive waypoints must not coincide")
        self.waypoints = pts
        self.closed = bool(closed)
        self._seg_start = pts if closed else pts[:-1]
        self._seg_vec = seg
        self._seg_len = lengths
        self._cum = np.concatenate([[0.0], np.cumsum(lengths)])

    @property
    def length(self) -> float:
        return float(self._cum[-1])

    def point_at(self, s: float) -> tuple[float, float]:
        """Point at arc distance s (wrapped when closed, clamped when open)."""
        if self.closed:
            s = s % self.length
        else:
            s = min(max(s, 0.0), self.length)
        i = int(np.searchsorted(self._cum, s, side="right")) - 1
        i = min(max(i, 0), len(self._seg_len) - 1)
        f = (s - self._cum[i]) / self._seg_len[i]
        p = self._seg_start[i] + f * self._seg_vec[i]
        return float(p[0]), float(p[1])

    def _segment_curvature(self, i: int) -> float:
        n = len(self._seg_len)
        j = (i + 1) % n
        if not self.closed and i == n - 1:
            return 0.0
        a = self._seg_vec[i] / self._seg_len[i]
        b = self._seg_vec[j] / self._seg_len[j]
        turn = math.atan2(a[0] * b[1] - a[1] * b[0], a[0] * b[0] + a[1] * b[1])
        return turn / (0.5 * (self._seg_len[i] + self._seg_len[j]))

    def project(self, x: float, y: float) -> LaneProjection:
        """Closest point on the path: signed cross-track, tangent and arc position."""
        p = np.array([x, y])
        rel = p - self._seg_start
        t = np.einsum("ij,ij->i", rel, self._seg_vec) / (self._seg_len**2)
        t = np.clip(t, 0.0, 1.0)
        closest = self._seg_start + t[:, None] * self._seg_vec
        deltas = p - closest
        dists = np.hypot(deltas[:, 0], deltas[:, 1])
        i = int(np.argmin(dists))
        vx, vy = self._seg_vec[i] / self._seg_len[i]
        dx, dy = deltas[i]
        cross = vx * dy - vy * dx  # positive when the point is left of travel
        return LaneProjection(
            cross_track=float(cross),
            tangent=math.atan2(vy, vx),
            arc_position=float(self._cum[i] + t[i] * self._seg_len[i]),
            distance=float(dists[i]),
            curvature=self._segment_curvature(i),
        )


def circle_lane(
    center: tuple[float, float], radius: float, step_deg: float = 5.0
) -> LanePath:
    """Closed circular lane sampled counterclockwise every step_deg degrees."""
    if radius <= 0 or step_deg <= 0:
        raise InvalidGeometryError("circle lane needs positive radius and step")
    n = int(round(360.0 / step_deg))
    ang = np.arange(n) * (2.0 * math.pi / n)
    pts = np.stack(
        [center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)], axis=1
    )
    return LanePath(pts, closed=True)


@dataclass(frozen=True)
class RoundaboutParams:
    r1: float = 1.0
    r2: float = 1.0
    center_distance: float = 4.0
    lane_width: float = 0.3
    resolution: float = 0.02


@dataclass(frozen=True)
class RoundaboutWorld:
    """Dual-roundabout scenario geometry: grid, lanes and junction points."""

    grid: OccupancyGrid
    lanes: dict[str, "LanePath"]
    params: RoundaboutParams
    center1: tuple[float, float]
    center2: tuple[float, float]
    # Junction points where the road lanes meet each lane circle.
    west_from: tuple[float, float]  # on circle 2, start of the westbound lane
    west_to: tuple[float, float]  # on circle 1, end of the westbound lane
    east_from: tuple[float, float]  # on circle 1, start of the eastbound lane
    east_to: tuple[float, float]  # on circle 2, end of the eastbound lane

    def lane_list(self) -> list["LanePath"]:
        return [
            self.lanes["circle1"],
            self.lanes["circle2"],
            self.lanes["road_west"],
            self.lanes["road_east"],
        ]


def build_roundabout_world(params: RoundaboutParams) -> RoundaboutWorld:
    """Two single-lane roundabouts joined by a two-lane road (one lane each way).

    Free space is the pair of lane annuli (half-width one lane width around
    each lane circle) plus the road envelope between the circle centers;
    everything else is occupied. The road envelope is three lane widths wide
    so each lane center keeps a full lane width of wall clearance, matching
    the annuli. Circulation is counterclockwise and road traffic keeps
    right, so the westbound lane sits at positive y.
    """
    r1, r2 = params.r1, params.r2
    d = params.center_distance
    lw = params.lane_width
    res = params.resolution
    if min(r1, r2, d, lw, res) <= 0:
        raise InvalidGeometryError("all roundabout parameters must be > 0")
    if d <= r1 + r2:
        raise InvalidGeometryError(
            f"center distance {d} must exceed r1 + r2 = {r1 + r2}"
        )
    if lw >= min(r1, r2):
        raise InvalidGeometryError("lane width must be smaller than the lane radii")

    rmax = max(r1, r2)
    world_w = r1 + d + r2
    world_h = 3.0 * rmax
    width = int(round(world_w / res))
    height = int(round(world_h / res))
    origin = Pose2D(-r1, -world_h / 2.0)
    c1 = (0.0, 0.0)
    c2 = (d, 0.0)

    xs = origin.x + (np.arange(width) + 0.5) * res
    ys = origin.y + (np.arange(height) + 0.5) * res
    gx, gy = np.meshgrid(xs, ys)
    dist1 = np.hypot(gx - c1[0], gy - c1[1])
    dist2 = np.hypot(gx - c2[0], gy - c2[1])
    free = (np.abs(dist1 - r1) <= lw) | (np.abs(dist2 - r2) <= lw)
    road_half = 1.5 * lw
    free |= (gx >= c1[0]) & (gx <= c2[0]) & (np.abs(gy) <= road_half)
    cells = np.where(free, 0.0, 1.0)
    grid = OccupancyGrid(cells, res, origin)

    yl = lw / 2.0
    x_on_1 = math.sqrt(r1 * r1 - yl * yl)
    x_on_2 = math.sqrt(r2 * r2 - yl * yl)
    west_from = (d - x_on_2, yl)
    west_to = (x_on_1, yl)
    east_from = (x_on_1, -yl)
    east_to = (d - x_on_2, -yl)
    lanes = {
        "circle1": circle_lane(c1, r1),
        "circle2": circle_lane(c2, r2),
        "road_west": LanePath([west_from, west_to]),
        "road_east": LanePath([east_from, east_to]),
    }
    return RoundaboutWorld(
        grid=grid,
        lanes=lanes,
        params=params,
        center1=c1,
        center2=c2,
        west_from=west_from,
        west_to=west_to,
        east_from=east_from,
        east_to=east_to,
    )


def build_open_room(
    width_m: float, height_m: float, resolution: float = 0.05, wall_cells: int = 2
) -> OccupancyGrid:
    """Free rectangular interior of the given size, centered on the origin,
    enclosed by occupied walls."""
    if min(width_m, height_m, resolution) <= 0:
        raise InvalidGeometryError("room dimensions and resolution must be > 0")
    cols = int(round(width_m / resolution)) + 2 * wall_cells
    rows = int(round(height_m / resolution)) + 2 * wall_cells
    cells = np.ones((rows, cols))
    cells[wall_cells:-wall_cells, wall_cells:-wall_cells] = 0.0
    origin = Pose2D(
        -width_m / 2.0 - wall_cells * resolution,
        -height_m / 2.0 - wall_cells * resolution,
        0.0,
    )
    return OccupancyGrid(cells, resolution, origin)


def stamp_obstacles(grid: OccupancyGrid, objects) -> OccupancyGrid:
    """New grid with extra occupied regions (discs and boxes) burned in."""
    if not objects:
        return grid
    cells = grid.cells.copy()
    xs = grid.origin.x + (np.arange(grid.width) + 0.5) * grid.resolution
    ys = grid.origin.y + (np.arange(grid.height) + 0.5) * grid.resolution
    gx, gy = np.meshgrid(xs, ys)
    for obj in objects:
        if obj.shape == "disc":
            mask = np.hypot(gx - obj.x, gy - obj.y) <= obj.radius
        else:
            mask = (np.abs(gx - obj.x) <= obj.width / 2.0) & (
                np.abs(gy - obj.y) <= obj.height / 2.0
            )
        cells[mask] = 1.0
    return OccupancyGrid(cells, grid.resolution, grid.origin)


@dataclass(frozen=True)
class CollisionEvent:
    """One detected overlap: robot pair or robot against the occupied grid."""

    kind: str  # "pair" | "grid"
    robot_a: int
    robot_b: int | None = None
    distance: float | None = None
    cell: tuple[int, int] | None = None


def footprint_hits_grid(footprint: RobotFootprint, grid: OccupancyGrid) -> tuple[int, int] | None:
    """First occupied cell overlapped by the disc, or None."""
    cx, cy = footprint.center.x, footprint.center.y
    r = footprint.radius
    res = grid.resolution
    row0, col0 = grid.world_to_cell(cx - r, cy - r)
    row1, col1 = grid.world_to_cell(cx + r, cy + r)
    row0 = max(row0, 0)
    col0 = max(col0, 0)
    row1 = min(row1, grid.height - 1)
    col1 = min(col1, grid.width - 1)
    if row0 > row1 or col0 > col1:
        return None
    window = grid.occupied_mask()[row0 : row1 + 1, col0 : col1 + 1]
    if not window.any():
        return None
    rows, cols = np.nonzero(window)
    # Closest point of each occupied cell rectangle to the disc center.
    cell_x0 = grid.origin.x + (cols + col0) * res
    cell_y0 = grid.origin.y + (rows + row0) * res
    nearest_x = np.clip(cx, cell_x0, cell_x0 + res)
    nearest_y = np.clip(cy, cell_y0, cell_y0 + res)
    d2 = (nearest_x - cx) ** 2 + (nearest_y - cy) ** 2
    hit = np.nonzero(d2 <= r * r)[0]
    if hit.size == 0:
        return None
    k = int(hit[0])
    return (int(rows[k]) + row0, int(cols[k]) + col0)


def check_collision(
    footprints: Sequence[RobotFootprint], grid: OccupancyGrid | None = None
) -> list[CollisionEvent]:
    """All pairwise disc overlaps plus disc-against-occupied-grid overlaps."""
    events: list[CollisionEvent] = []
    n = len(footprints)
    for i in range(n):
        for j in range(i + 1, n):
            a, b = footprints[i], footprints[j]
            dist = a.center.distance_to(b.center)
            if dist < a.radius + b.radius:
                events.append(
                    CollisionEvent(kind="pair", robot_a=a.robot_id, robot_b=b.robot_id, distance=dist)
                )
    if grid is not None:
        for fp in footprints:
            cell = footprint_hits_grid(fp, grid)
            if cell is not None:
                events.append(CollisionEvent(kind="grid", robot_a=fp.robot_id, cell=cell))
    return events


def min_pairwise_distance(footprints: Sequence[RobotFootprint]) -> float:
    """Smallest center distance over all pairs; inf for fewer than two."""
    best = math.inf
    for i in range(len(footprints)):
        for j in range(i + 1, len(footprints)):
            best = min(best, footprints[i].center.distance_to(footprints[j].center))
    return best
