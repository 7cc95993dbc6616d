import math

import numpy as np
import pytest

from mrfleet.control import Twist2D, step_diff_drive
from mrfleet.geometry import Pose2D
from mrfleet.intersection import (
    MOVEMENT_ENTER,
    MOVEMENT_EXIT,
    MOVEMENT_FOLLOW,
    IMQueue,
    IMRequest,
    IntersectionManager,
    OutsideIMAreaError,
    UnknownRobotError,
    enqueue,
    grant_merge,
    request_tti,
    resolve_step,
)

POINT = (0.0, 0.0)


def queue(*entries, radius=5.0):
    q = IMQueue(1, POINT, radius)
    for e in entries:
        q = enqueue(q, e)
    return q


def approach_request(robot_id, tti, v=0.2, movement=MOVEMENT_ENTER, stamp=0.0, capture=0.15):
    """Robot heading straight at the intersection point with the given straight-line TTI."""
    distance = capture + tti * v
    return IMRequest(robot_id, v, movement, Pose2D(-distance, 0.0, 0.0), stamp)


class TestEnqueue:
    def test_append_to_empty(self):
        q = queue(approach_request(1, 5.0))
        assert q.robot_ids() == [1]

    def test_fifo_order(self):
        q = queue(approach_request(1, 5.0, stamp=0.0), approach_request(2, 6.0, stamp=0.1))
        assert q.robot_ids() == [1, 2]

    def test_outside_area_rejected(self):
        q = IMQueue(1, POINT, 1.0)
        req = IMRequest(1, 0.2, MOVEMENT_ENTER, Pose2D(2.0, 0, 0), 0.0)
        with pytest.raises(OutsideIMAreaError):
            enqueue(q, req)

    def test_duplicate_refreshes_in_place(self):
        first = approach_request(1, 5.0, stamp=0.0)
        second = approach_request(2, 6.0, stamp=0.1)
        refresh = approach_request(1, 3.0, stamp=0.2)
        q = queue(first, second, refresh)
        assert q.robot_ids() == [1, 2]
        assert q.entries[0].stamp == 0.2


class TestResolveStep:
    def test_empty_queue_is_noop(self):
        decisions, q = resolve_step(queue())
        assert decisions == [] and q.entries == ()

    def test_single_entry_keeps_velocity(self):
        q = queue(approach_request(1, 5.0, v=0.2))
        decisions, q2 = resolve_step(q)
        assert decisions == [(1, 0.2)]
        assert q2.entries == ()

    def test_conflicting_pair_slows_the_later_robot(self):
        capture = 0.15
        q = queue(
            approach_request(1, 5.0, v=0.2, capture=capture),
            approach_request(2, 5.3, v=0.2, stamp=0.1, capture=capture),
        )
        decisions, q2 = resolve_step(q, conflict_window=1.0, capture_radius=capture)
        assert decisions[0] == (1, 0.2)
        robot, velocity = decisions[1]
        assert robot == 2 and velocity < 0.2
        # Adjusted TTI must land one window after the head's.
        adjusted = request_tti(
            q.entries[1], q, capture_radius=capture, velocity=velocity
        )
        assert adjusted == pytest.approx(6.0, abs=1e-3)
        # Straight-line motion: velocity equals remaining distance over target time.
        distance = 5.3 * 0.2
        assert velocity == pytest.approx(distance / 6.0, abs=1e-3)
        assert q2.robot_ids() == [2]

    def test_disjoint_windows_keep_velocities(self):
        q = queue(
            approach_request(1, 5.0, v=0.2),
            approach_request(2, 8.0, v=0.2, stamp=0.1),
        )
        decisions, _ = resolve_step(q, conflict_window=1.0)
        assert decisions == [(1, 0.2), (2, 0.2)]

    def test_follow_does_not_contend_with_enter(self):
        q = queue(
            approach_request(1, 5.0, movement=MOVEMENT_FOLLOW),
            approach_request(2, 5.1, movement=MOVEMENT_ENTER, stamp=0.1),
        )
        decisions, _ = resolve_step(q, conflict_window=1.0)
        assert decisions[1][1] == pytest.approx(0.2)

    def test_enter_vs_exit_contend(self):
        q = queue(
            approach_request(1, 5.0, movement=MOVEMENT_EXIT),
            approach_request(2, 5.1, movement=MOVEMENT_ENTER, stamp=0.1),
        )
        decisions, _ = resolve_step(q, conflict_window=1.0)
        assert decisions[1][1] < 0.2

    def test_never_increases_velocity(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            entries = [
                approach_request(
                    i,
                    tti=float(rng.uniform(1.0, 8.0)),
                    v=float(rng.uniform(0.05, 0.3)),
                    movement=str(rng.choice([MOVEMENT_ENTER, MOVEMENT_EXIT, MOVEMENT_FOLLOW])),
                    stamp=float(i),
                )
                for i in range(3)
            ]
            q = queue(*entries)
            decisions, _ = resolve_step(q)
            requested = {e.robot_id: e.velocity for e in entries}
            for robot, velocity in decisions:
                assert velocity <= requested[robot] + 1e-12

    def test_decisions_follow_arrival_order(self):
        q = queue(
            approach_request(3, 5.0, stamp=0.0),
            approach_request(1, 5.2, stamp=0.1),
            approach_request(2, 5.4, stamp=0.2),
        )
        order = []
        while q.entries:
            decisions, q = resolve_step(q)
            order.extend(robot for robot, _ in decisions[:1])
        assert order == [3, 1, 2]

    def test_liveness_queue_drains_in_length_passes(self):
        entries = [approach_request(i, 3.0 + i, stamp=float(i)) for i in range(5)]
        q = queue(*entries)
        for _ in range(len(entries)):
            _, q = resolve_step(q)
        assert q.entries == ()


class TestGrantMerge:
    def exit_request(self, robot_id, stamp=0.0, pose=None):
        return IMRequest(robot_id, 0.2, MOVEMENT_EXIT, pose or Pose2D(1.0, 0, 0), stamp)

    def test_first_exit_granted(self):
        q = queue(self.exit_request(1))
        assert grant_merge(q, 1, outstanding=None) is True

    def test_second_exit_deferred_while_outstanding(self):
        q = queue(self.exit_request(1), self.exit_request(2, stamp=0.1))
        assert grant_merge(q, 2, outstanding=1) is False

    def test_unknown_robot(self):
        q = queue(approach_request(1, 5.0, movement=MOVEMENT_FOLLOW))
        with pytest.raises(UnknownRobotError):
            grant_merge(q, 1, outstanding=None)
        with pytest.raises(UnknownRobotError):
            grant_merge(q, 99, outstanding=None)

    def test_cycle_closes_when_grantee_departs(self):
        im = IntersectionManager(1, POINT, area_radius=2.0, grant_stale_after=1.0)
        im.submit(self.exit_request(1, stamp=0.0))
        im.submit(self.exit_request(2, stamp=0.1))
        assert im.try_grant(1, now=0.0) is True
        assert im.try_grant(2, now=0.1) is False
        # Grantee keeps refreshing its exit request while still on the ring.
        im.submit(self.exit_request(1, stamp=0.5))
        assert im.close_cycle_if_departed(now=1.2) is False
        # Once it departs, its exit requests stop and the cycle closes.
        assert im.close_cycle_if_departed(now=1.6) is True
        assert im.try_grant(2, now=1.7) is True

    def test_cycle_closes_on_stale_grantee(self):
        im = IntersectionManager(1, POINT, area_radius=2.0, grant_stale_after=1.0)
        im.submit(self.exit_request(1, stamp=0.0))
        assert im.try_grant(1, now=0.0) is True
        assert im.close_cycle_if_departed(now=0.5) is False
        assert im.close_cycle_if_departed(now=1.5) is True


class TestClosedLoopSafety:
    def test_two_converging_robots_kept_apart(self):
        """Two robots aimed at the same point: the manager separates their
        arrival times, and their discs never meet."""
        window = 1.5
        capture = 0.15
        im = IntersectionManager(1, POINT, area_radius=10.0, conflict_window=window)
        poses = {
            1: Pose2D(-1.2, 0.0, 0.0),
            2: Pose2D(0.0, -1.3, math.pi / 2),
        }
        desired = {1: 0.2, 2: 0.2}
        caps = dict(desired)
        dt = 0.1
        min_dist = math.inf
        adjusted_ttis = []
        for step in range(160):
            now = step * dt
            for rid in (1, 2):
                im.submit(IMRequest(rid, caps[rid], MOVEMENT_ENTER, poses[rid], now))
            for rid, velocity in im.resolve_pass():
                caps[rid] = min(desired[rid], velocity)
            tti = {
                rid: request_tti(
                    IMRequest(rid, max(caps[rid], 1e-6), MOVEMENT_ENTER, poses[rid], now),
                    im.queue if im.queue.entries else IMQueue(1, POINT, 10.0),
                    capture_radius=capture,
                )
                for rid in (1, 2)
            }
            if tti[1] is not None and tti[2] is not None and min(tti.values()) > 0.2:
                adjusted_ttis.append(abs(tti[1] - tti[2]))
            for rid in (1, 2):
                poses[rid] = step_diff_drive(poses[rid], Twist2D(caps[rid], 0.0), dt)
            min_dist = min(min_dist, poses[1].distance_to(poses[2]))
        assert min_dist >= 2 * 0.105 + 0.05
        # Once both caps settle the predicted arrivals stay a window apart.
        assert adjusted_ttis and max(adjusted_ttis[-10:]) >= window * 0.9
