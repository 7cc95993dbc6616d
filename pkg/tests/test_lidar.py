import math

import numpy as np
import pytest

from mrfleet.geometry import Pose2D
from mrfleet.lidar import (
    LaserScan,
    ParamMismatchError,
    PoseOutsideMapError,
    ScanParams,
    cast_scan,
    merge_scans,
    nearest_target_in_cone,
)
from mrfleet.worldmap import OccupancyGrid, RobotFootprint


def square_room(side=4.0, res=0.05, wall=2):
    """Free side x side interior with occupied walls; interior center at (0, 0)."""
    interior = int(round(side / res))
    size = interior + 2 * wall
    cells = np.ones((size, size))
    cells[wall:-wall, wall:-wall] = 0.0
    origin = Pose2D(-side / 2 - wall * res, -side / 2 - wall * res, 0.0)
    return OccupancyGrid(cells, res, origin)


def rect_ray_distance(direction, half=2.0):
    """Analytic distance from the origin to the walls of a centered square."""
    c, s = math.cos(direction), math.sin(direction)
    candidates = []
    if abs(c) > 1e-12:
        candidates.append(half / abs(c))
    if abs(s) > 1e-12:
        candidates.append(half / abs(s))
    return min(candidates)


PARAMS = ScanParams()


class TestCastScan:
    def test_forward_beam_in_square_room(self):
        grid = square_room()
        scan = cast_scan(Pose2D(0, 0, 0), grid, params=PARAMS)
        forward = scan.ranges[180]  # bearing 0 with angle_min = -pi
        assert forward == pytest.approx(2.0, abs=grid.resolution)

    def test_diagonal_beam(self):
        grid = square_room()
        scan = cast_scan(Pose2D(0, 0, 0), grid, params=PARAMS)
        diag = scan.ranges[225]  # bearing +45 degrees
        assert diag == pytest.approx(2 * math.sqrt(2), abs=grid.resolution)

    def test_all_beams_within_one_resolution_of_analytic(self):
        grid = square_room()
        scan = cast_scan(Pose2D(0, 0, 0), grid, params=PARAMS)
        bearings = scan.bearings()
        for i, bearing in enumerate(bearings):
            expected = rect_ray_distance(bearing)
            if expected > PARAMS.range_max:
                assert math.isnan(scan.ranges[i])
            else:
                assert scan.ranges[i] == pytest.approx(expected, abs=grid.resolution)

    def test_symmetry_of_centered_scan(self):
        grid = square_room()
        scan = cast_scan(Pose2D(0, 0, 0), grid, params=PARAMS)
        # bearing(i) = -pi + i * inc; mirror of beam i (i > 0) is beam 360 - i.
        for i in range(1, 180):
            a, b = scan.ranges[i], scan.ranges[360 - i]
            assert a == pytest.approx(b, abs=grid.resolution)

    def test_footprint_hit_is_analytic(self):
        grid = square_room(side=8.0, res=0.05)
        fp = RobotFootprint(7, Pose2D(1.0, 0.0, 0.0), 0.1)
        scan = cast_scan(Pose2D(0, 0, 0), grid, footprints=[fp], params=PARAMS)
        assert scan.ranges[180] == pytest.approx(0.9, abs=1e-6)

    def test_own_footprint_excluded(self):
        grid = square_room()
        own = RobotFootprint(5, Pose2D(0, 0, 0), 0.1)
        scan = cast_scan(Pose2D(0, 0, 0), grid, footprints=[own], params=PARAMS, exclude_id=5)
        assert scan.ranges[180] == pytest.approx(2.0, abs=grid.resolution)

    def test_beyond_range_max_is_no_return(self):
        grid = square_room(side=10.0)
        scan = cast_scan(Pose2D(0, 0, 0), grid, params=PARAMS)
        assert math.isnan(scan.ranges[180])  # wall at 5 m, range_max 3.5 m

    def test_pose_outside_map(self):
        grid = square_room()
        with pytest.raises(PoseOutsideMapError):
            cast_scan(Pose2D(50, 0, 0), grid, params=PARAMS)

    def test_determinism_with_seed(self):
        grid = square_room()
        a = cast_scan(Pose2D(0.3, -0.2, 0.4), grid, params=PARAMS, noise_sigma=0.01, rng=42)
        b = cast_scan(Pose2D(0.3, -0.2, 0.4), grid, params=PARAMS, noise_sigma=0.01, rng=42)
        np.testing.assert_array_equal(a.ranges, b.ranges)

    def test_noise_respects_range_bounds(self):
        grid = square_room()
        scan = cast_scan(Pose2D(0, 0, 0), grid, params=PARAMS, noise_sigma=0.05, rng=1)
        finite = scan.ranges[np.isfinite(scan.ranges)]
        assert finite.min() >= PARAMS.range_min
        assert finite.max() <= PARAMS.range_max


def make_scan(ranges, angle_min=-math.pi / 2, inc=math.radians(1.0)):
    ranges = np.asarray(ranges, float)
    return LaserScan(
        frame="robot",
        stamp=0.0,
        angle_min=angle_min,
        angle_max=angle_min + (len(ranges) - 1) * inc,
        angle_increment=inc,
        range_min=0.0,
        range_max=10.0,
        ranges=ranges,
    )


class TestMergeScans:
    def test_minimum_wins(self):
        a = make_scan([2.0, 2.0, 2.0])
        b = make_scan([0.9, 3.0, np.nan])
        merged = merge_scans(a, b)
        np.testing.assert_allclose(merged.ranges, [0.9, 2.0, 2.0])

    def test_no_return_loses(self):
        a = make_scan([1.0, np.nan])
        b = make_scan([np.nan, np.nan])
        merged = merge_scans(a, b)
        assert merged.ranges[0] == 1.0
        assert math.isnan(merged.ranges[1])

    def test_param_mismatch(self):
        a = make_scan([1.0, 1.0])
        b = make_scan([1.0, 1.0, 1.0])
        with pytest.raises(ParamMismatchError):
            merge_scans(a, b)

    def test_commutative_and_idempotent(self):
        rng = np.random.default_rng(2)
        vals = rng.uniform(0.5, 9.0, 30)
        vals[rng.uniform(size=30) < 0.3] = np.nan
        other = rng.uniform(0.5, 9.0, 30)
        a, b = make_scan(vals), make_scan(other)
        ab, ba = merge_scans(a, b), merge_scans(b, a)
        np.testing.assert_array_equal(ab.ranges, ba.ranges)
        np.testing.assert_array_equal(merge_scans(a, a).ranges, a.ranges)


class TestNearestTarget:
    def test_none_when_empty(self):
        scan = make_scan([np.nan] * 21, angle_min=-math.radians(10))
        assert nearest_target_in_cone(scan, math.pi / 4) is None

    def test_nearest_cluster_wins(self):
        ranges = [np.nan] * 41
        for i in range(18, 23):
            ranges[i] = 1.0  # cluster around bearing ~0
        ranges[3] = 0.5
        ranges[4] = 0.52  # nearer cluster off to the side
        scan = make_scan(ranges, angle_min=-math.radians(20))
        bearing, distance = nearest_target_in_cone(scan, math.pi / 4)
        assert distance == pytest.approx(0.5)
        assert bearing == pytest.approx(math.radians(-20 + 3.5), abs=1e-9)

    def test_range_gap_splits_clusters(self):
        ranges = [1.0, 1.0, 2.0, 2.0]
        scan = make_scan(ranges, angle_min=-math.radians(2))
        bearing, distance = nearest_target_in_cone(scan, math.pi / 4)
        assert distance == pytest.approx(1.0)
        assert bearing == pytest.approx(math.radians(-1.5))

    def test_cone_excludes_out_of_cone_returns(self):
        ranges = [0.4] + [np.nan] * 180
        scan = make_scan(ranges, angle_min=-math.pi / 2, inc=math.radians(1))
        assert nearest_target_in_cone(scan, math.radians(10)) is None

    def test_synthetic_disc_target(self):
        grid = square_room(side=8.0, res=0.05)
        fp = RobotFootprint(9, Pose2D(0.6, 0.0, 0.0), 0.1)
        scan = cast_scan(Pose2D(0, 0, 0), grid, footprints=[fp], params=ScanParams())
        bearing, distance = nearest_target_in_cone(scan, math.pi / 4)
        assert bearing == pytest.approx(0.0, abs=math.radians(1.5))
        assert distance == pytest.approx(0.5, abs=1e-6)
