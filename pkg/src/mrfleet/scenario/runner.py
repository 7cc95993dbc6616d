"""Headless scenario orchestration.

Boots the bridge, spawns one emulator process per physical robot, advances
simulated time in lockstep (every clock tick is acknowledged by every
emulator before the next), runs controllers and intersection managers,
checks collisions, and records metrics plus a deterministic message log.

The core is an ordinary bridge client: doppelganger poses come only from
received `/tf` estimates, never from emulator internals.
"""

from __future__ import annotations

import json
import math
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from ..bridge import schemas
from ..bridge.broker import BridgeHub, ClockBroadcaster, Endpoint
from ..bridge.server import ServiceHandle
from ..control import DEFAULT_OMEGA_MAX, DEFAULT_V_MAX, Twist2D, step_diff_drive
from ..geometry import FrameAlignment, Pose2D, StampedTransform, project_to_virtual
from ..intersection import MOVEMENT_EXIT, IMRequest, IntersectionManager, OutsideIMAreaError
from ..lidar import LaserScan, ScanParams, cast_scan
from ..worldmap import (
    OccupancyGrid,
    RobotFootprint,
    RoundaboutWorld,
    build_open_room,
    build_roundabout_world,
    check_collision,
    load_map,
    min_pairwise_distance,
    save_map,
    stamp_obstacles,
)
from .config import ConfigInvalidError, ScenarioConfig
from .routes import AgentContext, ImZone, RoundaboutAgent, make_behavior


class EmulatorSpawnFailure(RuntimeError):
    pass


@dataclass
class RunMetrics:
    """Everything a run leaves behind, keyed for the acceptance checks."""

    name: str
    seed: int
    duration: float
    tick_rate: float
    trajectories: dict[int, list[tuple[float, float, float, float]]]
    truth: dict[int, list[tuple[float, float, float, float]]]
    estimates: dict[int, list[tuple[float, float, float, float]]]
    loc_errors: dict[int, list[tuple[float, float]]]
    collisions: list[dict]
    im_decisions: list[dict]
    im_grants: list[dict]
    merge_completions: dict[int, float]
    min_pair_distance: float
    log_dir: Path | None
    message_log_path: Path | None

    def summary(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "seed": self.seed,
            "duration": self.duration,
            "robots": sorted(self.trajectories),
            "collision_events": len(self.collisions),
            # None for single-robot runs (infinity is not valid JSON)
            "min_pair_distance": self.min_pair_distance
            if math.isfinite(self.min_pair_distance)
            else None,
            "im_decisions": len(self.im_decisions),
            "merges_completed": {str(k): v for k, v in self.merge_completions.items()},
            "max_loc_error": {
                str(rid): (max(e for _, e in series) if series else None)
                for rid, series in self.loc_errors.items()
            },
        }

    def to_dict(self) -> dict[str, Any]:
        return {
            "summary": self.summary(),
            "trajectories": {str(k): v for k, v in self.trajectories.items()},
            "truth": {str(k): v for k, v in self.truth.items()},
            "estimates": {str(k): v for k, v in self.estimates.items()},
            "loc_errors": {str(k): v for k, v in self.loc_errors.items()},
            "collisions": self.collisions,
            "im_decisions": self.im_decisions,
            "im_grants": self.im_grants,
            "merge_completions": {str(k): v for k, v in self.merge_completions.items()},
        }

    def save(self) -> None:
        if self.log_dir is None:
            return
        self.log_dir.mkdir(parents=True, exist_ok=True)
        (self.log_dir / "metrics.json").write_text(json.dumps(self.to_dict(), indent=2))
        with (self.log_dir / "events.jsonl").open("w") as fh:
            for event in self.collisions:
                fh.write(json.dumps({"event": "collision", **event}, sort_keys=True) + "\n")
            for decision in self.im_decisions:
                fh.write(json.dumps({"event": "im_decision", **decision}, sort_keys=True) + "\n")
            for grant in self.im_grants:
                fh.write(json.dumps({"event": "im_grant", **grant}, sort_keys=True) + "\n")
            for rid, stamp in sorted(self.merge_completions.items()):
                fh.write(
                    json.dumps({"event": "merge_complete", "robot": rid, "t": stamp}, sort_keys=True)
                    + "\n"
                )
        for rid, rows in self.trajectories.items():
            with (self.log_dir / f"trajectory_{rid}.csv").open("w") as fh:
                fh.write("t,x,y,theta\n")
                for t, x, y, theta in rows:
                    fh.write(f"{t!r},{x!r},{y!r},{theta!r}\n")


@dataclass
class _World:
    grid_virtual: OccupancyGrid
    grid_physical: OccupancyGrid
    roundabout: RoundaboutWorld | None


def _build_world(config: ScenarioConfig) -> _World:
    world = config.world
    roundabout = None
    if world.kind == "roundabout":
        roundabout = build_roundabout_world(world.roundabout)
        base = roundabout.grid
    elif world.kind == "open_room":
        base = build_open_room(world.room_width, world.room_height, world.resolution)
    else:
        base = load_map(
            Path(world.map_path).read_bytes(), Path(world.map_meta_path).read_text()
        )
    return _World(
        grid_virtual=stamp_obstacles(base, world.virtual_objects),
        grid_physical=base,
        roundabout=roundabout,
    )


def _build_zones(config: ScenarioConfig, world: _World) -> dict[int, ImZone]:
    zones: dict[int, ImZone] = {}
    for entry in config.ims:
        point = entry.point
        radius = entry.area_radius
        if world.roundabout is not None:
            rb = world.roundabout
            if point is None:
                if entry.intersection_id == 1:
                    point = (rb.west_to[0], 0.0)
                else:
                    point = (rb.west_from[0], 0.0)
            if radius is None:
                lane_r = rb.params.r1 if entry.intersection_id == 1 else rb.params.r2
                radius = 3.0 * lane_r
        if point is None or radius is None:
            raise ConfigInvalidError(
                f"IM {entry.intersection_id}: point and area_radius required outside roundabout worlds"
            )
        zones[entry.intersection_id] = ImZone(entry.intersection_id, point, radius)
    return zones


class _MessageLog:
    """Streamed `tick dir frame` lines; received frames sorted within a tick."""

    def __init__(self, path: Path | None):
        self.path = path
        self._fh = path.open("w") if path else None
        self._pending_in: list[str] = []

    def sent(self, tick: int, raw: str) -> None:
        if self._fh:
            self._fh.write(f"{tick} out {raw}\n")

    def received(self, raw: str) -> None:
        if self._fh:
            self._pending_in.append(raw)

    def flush_tick(self, tick: int) -> None:
        if self._fh:
            for raw in sorted(self._pending_in):
                self._fh.write(f"{tick} in {raw}\n")
            self._pending_in.clear()

    def close(self) -> None:
        if self._fh:
            self.flush_tick(-1)
            self._fh.close()


class _LoggedEndpoint:
    """Wraps the core endpoint so every frame crossing it lands in the log."""

    def __init__(self, endpoint: Endpoint, log: _MessageLog):
        self._endpoint = endpoint
        self._log = log
        self.tick = 0

    def publish(self, topic: str, msg: object) -> None:
        raw = json.dumps(
            {"msg": msg, "op": "publish", "topic": topic},
            sort_keys=True,
            separators=(",", ":"),
            allow_nan=False,
        )
        self._log.sent(self.tick, raw)
        self._endpoint.send_raw(raw)

    def advertise(self, topic: str, schema: str) -> None:
        self._endpoint.advertise(topic, schema)

    def subscribe(self, topic: str, schema: str | None = None) -> None:
        self._endpoint.subscribe(topic, schema)

    def recv_raw(self, timeout: float | None) -> str | None:
        raw = self._endpoint.get(timeout)
        if raw is not None:
            self._log.received(raw)
        return raw

    def close(self) -> None:
        self._endpoint.close()


def run_scenario(
    config: ScenarioConfig,
    *,
    seed: int | None = None,
    log_dir: str | Path | None = None,
    hub: BridgeHub | None = None,
    ws_url: str | None = None,
    progress: bool = False,
) -> RunMetrics:
    """Execute one scenario to completion and return its metrics."""
    if seed is not None:
        config = config.with_seed(seed)
    run = config.run
    dt = 1.0 / run.tick_rate
    n_ticks = max(int(round(run.duration * run.tick_rate)), 1)
    scan_every = max(int(round(run.tick_rate / run.scan_rate)), 1)
    im_every = max(int(round(run.tick_rate / run.im_rate)), 1)

    world = _build_world(config)
    zones = _build_zones(config, world)
    scan_params = ScanParams()

    log_path = Path(log_dir) if log_dir else Path(tempfile.mkdtemp(prefix="mrfleet-run-"))
    log_path.mkdir(parents=True, exist_ok=True)

    own_server = hub is None
    handle: ServiceHandle | None = None
    if own_server:
        from ..service.app import create_app

        hub = BridgeHub()
        handle = ServiceHandle(create_app(hub), port=run.bridge_port).start()
        ws_url = handle.ws_url
    if ws_url is None:
        raise ValueError("ws_url is required when reusing an existing hub")

    message_log = _MessageLog(log_path / "messages.log")
    core = _LoggedEndpoint(hub.create_endpoint(), message_log)
    processes: dict[int, subprocess.Popen] = {}
    metrics: RunMetrics | None = None
    try:
        _advertise_and_subscribe(core, config, zones)
        clock = ClockBroadcaster(core._endpoint)  # advertises /clock
        _publish_world(core, config, world.grid_virtual, zones)
        core.publish("/world/alignment", schemas.alignment_to_msg(FrameAlignment.identity()))
        clock.broadcast(0.0)  # latched epoch for (re)joining clients
        message_log.sent(0, json.dumps({"epoch": 0.0}, sort_keys=True))

        sim = _CoreState(config, world, zones, scan_params, dt)
        # On a shared hub (service mode) subscriptions replay latched leftovers
        # of earlier runs; keep the alignment echo, drop stale transforms. The
        # drain bypasses the message log: setup replay is not simulation
        # traffic and would make service-hosted logs diverge from fresh ones.
        while True:
            raw = core._endpoint.get(0.0)
            if raw is None:
                break
            frame = json.loads(raw)
            if frame.get("topic") != "/tf":
                sim.ingest(frame)

        processes = _spawn_emulators(config, world, log_path, ws_url)
        _wait_for_ready(core, sim, processes, run.ack_timeout)

        for k in range(1, n_ticks + 1):
            core.tick = k
            t = k * dt
            sim.step_virtual_robots(dt)
            sim.refresh_doppelgangers()
            if k % scan_every == 0:
                _cast_and_publish_virtual_scans(core, sim, t, scan_params)
            _run_behaviors(core, sim, t, dt)
            _fire_scripted_events(core, sim, config, t)
            if k % im_every == 0:
                _im_pass(core, sim, t)
            sim.check_collisions(t)
            if k % scan_every == 0:
                _publish_virtual_tf(core, sim, t)
            sim.record_trajectories(t)
            clock.broadcast(t)
            _barrier(core, sim, processes, k, run.ack_timeout)
            message_log.flush_tick(k)
            if progress and n_ticks >= 10 and k % (n_ticks // 10) == 0:
                print(f"[mr-fleet] t={t:.2f}s / {run.duration:.2f}s", flush=True)

        core.publish("/sim/shutdown", {})
        _reap_emulators(processes)
        metrics = sim.finish(config, log_path)
        return metrics
    finally:
        for proc in processes.values():
            if proc.poll() is None:
                proc.terminate()
        message_log.close()
        core.close()
        if handle is not None:
            handle.stop()
        if metrics is not None:
            metrics.message_log_path = log_path / "messages.log"
            metrics.save()


def _advertise_and_subscribe(core: _LoggedEndpoint, config: ScenarioConfig, zones) -> None:
    core.advertise("/tf", "tf")
    core.advertise("/world/map_meta", "map_meta")
    core.advertise("/world/map", "map_grid")
    core.advertise("/world/alignment", "alignment")
    core.advertise("/world/robots", "roster")
    core.advertise("/sim/shutdown", "shutdown")
    for robot in config.robots:
        core.advertise(schemas.robot_topic(robot.robot_id, "cmd_vel"), "twist")
        core.advertise(schemas.robot_topic(robot.robot_id, "virtual_scan"), "scan")
    for iid in zones:
        core.advertise(schemas.im_topic(iid, "request"), "im_request")
        core.advertise(schemas.im_topic(iid, "velocity"), "im_velocity")
        core.advertise(schemas.im_topic(iid, "grant"), "im_grant")
        core.subscribe(schemas.im_topic(iid, "request"))
    core.subscribe("/tf")
    core.subscribe("/tick_ack", "tick_ack")
    core.subscribe("/world/alignment")
    for robot in config.emulated_robots():
        core.subscribe(schemas.robot_topic(robot.robot_id, "merged_scan"))
        core.subscribe(schemas.robot_topic(robot.robot_id, "pose_estimate"))


def _publish_world(
    core: _LoggedEndpoint, config: ScenarioConfig, grid: OccupancyGrid, zones
) -> None:
    core.publish("/world/map_meta", schemas.map_meta_to_msg(grid))
    core.publish("/world/map", schemas.map_grid_to_msg(grid))
    core.publish(
        "/world/robots",
        {
            "robots": [
                {"id": r.robot_id, "kind": r.kind, "radius": r.footprint_radius}
                for r in config.robots
            ],
            "ims": [
                {
                    "id": zone.intersection_id,
                    "x": zone.point[0],
                    "y": zone.point[1],
                    "area_radius": zone.area_radius,
                }
                for zone in zones.values()
            ],
        },
    )


def _spawn_emulators(
    config: ScenarioConfig, world: _World, log_path: Path, ws_url: str
) -> dict[int, subprocess.Popen]:
    emulated = config.emulated_robots()
    if not emulated:
        return {}
    image, meta = save_map(world.grid_physical)
    map_file = log_path / "physical_map.pgm"
    meta_file = log_path / "physical_map.meta"
    map_file.write_bytes(image)
    meta_file.write_text(meta)
    run = config.run
    scan_every = max(int(round(run.tick_rate / run.scan_rate)), 1)
    processes: dict[int, subprocess.Popen] = {}
    for robot in emulated:
        argv = [
            sys.executable,
            "-m",
            "mrfleet.emulator",
            "--id",
            str(robot.robot_id),
            "--bridge",
            ws_url,
            "--map",
            str(map_file),
            "--map-meta",
            str(meta_file),
            f"--start-pose={robot.start_pose.x},{robot.start_pose.y},{robot.start_pose.theta}",
            "--seed",
            str(run.seed * 1000 + robot.robot_id),
            "--scan-every",
            str(scan_every),
            "--footprint-radius",
            str(robot.footprint_radius),
            "--beams",
            "360",
            "--range-max",
            "3.5",
            "--truth-log",
            str(log_path / f"truth_{robot.robot_id}.log"),
        ]
        processes[robot.robot_id] = subprocess.Popen(
            argv, stdout=subprocess.DEVNULL, stderr=subprocess.PIPE, text=True
        )
    return processes


def _reap_emulators(processes: dict[int, subprocess.Popen], timeout: float = 10.0) -> None:
    deadline = time.monotonic() + timeout
    for rid, proc in processes.items():
        remaining = max(deadline - time.monotonic(), 0.1)
        try:
            proc.wait(remaining)
        except subprocess.TimeoutExpired:
            proc.terminate()


class _CoreState:
    """Mutable world state owned by the tick loop."""

    def __init__(self, config, world: _World, zones, scan_params, dt):
        self.config = config
        self.world = world
        self.zones = zones
        self.scan_params = scan_params
        self.dt = dt
        self.alignment = FrameAlignment.identity()
        self.virtual_pose: dict[int, Pose2D] = {}
        self.dopp_pose: dict[int, Pose2D] = {}
        self.estimate: dict[int, tuple[float, Pose2D]] = {}
        self.cmd: dict[int, Twist2D] = {}
        self.latest_scan: dict[int, LaserScan] = {}  # controller input per robot
        self.behaviors = {}
        self.agents: dict[int, RoundaboutAgent] = {}
        self.ims: dict[int, IntersectionManager] = {}
        self.pending_requests: list[tuple[float, int, int, dict]] = []
        self.fired_events: set[int] = set()
        self.trajectories: dict[int, list] = {r.robot_id: [] for r in config.robots}
        self.estimates_series: dict[int, list] = {
            r.robot_id: [] for r in config.emulated_robots()
        }
        self.emulated_ids = {r.robot_id for r in config.emulated_robots()}
        self.collisions: list[dict] = []
        self.im_decisions: list[dict] = []
        self.im_grants: list[dict] = []
        self.min_pair_distance = math.inf
        self.acked: dict[int, int] = {}

        rb = world.roundabout
        for entry in config.ims:
            zone = zones[entry.intersection_id]
            self.ims[entry.intersection_id] = IntersectionManager(
                intersection_id=entry.intersection_id,
                intersection_point=zone.point,
                area_radius=zone.area_radius,
                conflict_window=entry.conflict_window,
                capture_radius=entry.capture_radius,
            )
        for robot in config.robots:
            behavior = make_behavior(robot, rb, zones)
            self.behaviors[robot.robot_id] = behavior
            if isinstance(behavior, RoundaboutAgent):
                self.agents[robot.robot_id] = behavior
            self.cmd[robot.robot_id] = Twist2D(0.0, 0.0)
            if robot.kind == "virtual":
                self.virtual_pose[robot.robot_id] = robot.start_pose

    # -- world advancement ---------------------------------------------------

    def step_virtual_robots(self, dt: float) -> None:
        for rid in sorted(self.virtual_pose):
            self.virtual_pose[rid] = step_diff_drive(self.virtual_pose[rid], self.cmd[rid], dt)

    def refresh_doppelgangers(self) -> None:
        for rid in sorted(self.estimate):
            _, pose = self.estimate[rid]
            self.dopp_pose[rid] = project_to_virtual(pose, self.alignment)

    def world_pose(self, rid: int) -> Pose2D | None:
        if rid in self.virtual_pose:
            return self.virtual_pose[rid]
        return self.dopp_pose.get(rid)

    def footprints(self) -> list[RobotFootprint]:
        out = []
        for robot in self.config.robots:
            pose = self.world_pose(robot.robot_id)
            if pose is not None:
                out.append(RobotFootprint(robot.robot_id, pose, robot.footprint_radius))
        return out

    def check_collisions(self, t: float) -> None:
        footprints = self.footprints()
        for event in check_collision(footprints, self.world.grid_virtual):
            self.collisions.append(
                {
                    "t": t,
                    "kind": event.kind,
                    "robot_a": event.robot_a,
                    "robot_b": event.robot_b,
                    "distance": event.distance,
                    "cell": list(event.cell) if event.cell else None,
                }
            )
        if len(footprints) >= 2:
            self.min_pair_distance = min(
                self.min_pair_distance, min_pairwise_distance(footprints)
            )

    def record_trajectories(self, t: float) -> None:
        for robot in self.config.robots:
            pose = self.world_pose(robot.robot_id)
            if pose is not None:
                self.trajectories[robot.robot_id].append((t, pose.x, pose.y, pose.theta))

    # -- inbox ----------------------------------------------------------------

    def ingest(self, frame: dict) -> None:
        if frame.get("op") != "publish":
            return
        topic = frame.get("topic", "")
        msg = frame.get("msg", {})
        if topic == "/tick_ack":
            rid = msg["robot_id"]
            self.acked[rid] = max(self.acked.get(rid, -1), msg["tick"])
            return
        if topic == "/tf":
            for st in schemas.transforms_from_msg(msg):
                if st.parent == "map" and st.child.startswith("robot_") and st.child.endswith("/base"):
                    rid = int(st.child.split("_")[1].split("/")[0])
                    if rid not in self.emulated_ids:
                        continue
                    self.estimate[rid] = (st.stamp, st.transform)
                    self.estimates_series.setdefault(rid, []).append(
                        (st.stamp, st.transform.x, st.transform.y, st.transform.theta)
                    )
            return
        if topic == "/world/alignment":
            self.alignment = schemas.alignment_from_msg(msg)
            return
        if topic.endswith("/merged_scan"):
            rid = int(topic.split("_")[1].split("/")[0])
            self.latest_scan[rid] = schemas.scan_from_msg(msg)
            return
        if topic.startswith("/im/") and topic.endswith("/request"):
            iid = int(topic.split("/")[2])
            self.pending_requests.append((msg["stamp"], iid, msg["robot_id"], msg))
            return

    def finish(self, config, log_path: Path) -> RunMetrics:
        truth: dict[int, list] = {}
        loc_errors: dict[int, list] = {}
        for robot in config.emulated_robots():
            rid = robot.robot_id
            rows = []
            truth_file = log_path / f"truth_{rid}.log"
            if truth_file.exists():
                for line in truth_file.read_text().splitlines():
                    st, x, y, theta = (float(v) for v in line.split())
                    rows.append((st, x, y, theta))
            truth[rid] = rows
            by_stamp = {row[0]: row for row in rows}
            series = []
            for st, x, y, _ in self.estimates_series.get(rid, []):
                row = by_stamp.get(st)
                if row is not None:
                    series.append((st, math.hypot(x - row[1], y - row[2])))
            loc_errors[rid] = series
        merges = {
            rid: agent.merge_completed_at
            for rid, agent in self.agents.items()
            if agent.merge_completed_at is not None
        }
        return RunMetrics(
            name=config.name,
            seed=config.run.seed,
            duration=config.run.duration,
            tick_rate=config.run.tick_rate,
            trajectories=self.trajectories,
            truth=truth,
            estimates=self.estimates_series,
            loc_errors=loc_errors,
            collisions=self.collisions,
            im_decisions=self.im_decisions,
            im_grants=self.im_grants,
            merge_completions=merges,
            min_pair_distance=self.min_pair_distance,
            log_dir=log_path,
            message_log_path=log_path / "messages.log",
        )


def _cast_and_publish_virtual_scans(core, sim: _CoreState, t: float, params: ScanParams) -> None:
    footprints = sim.footprints()
    for robot in sim.config.robots:
        rid = robot.robot_id
        pose = sim.world_pose(rid)
        if pose is None:
            continue
        scan = cast_scan(
            pose,
            sim.world.grid_virtual,
            footprints=footprints,
            params=params,
            noise_sigma=0.0,
            frame=schemas.robot_base_frame(rid),
            stamp=t,
            exclude_id=rid,
        )
        core.publish(schemas.robot_topic(rid, "virtual_scan"), schemas.scan_to_msg(scan))
        if robot.kind == "virtual" or robot.scan_source == "virtual":
            sim.latest_scan[rid] = scan


def _run_behaviors(core, sim: _CoreState, t: float, dt: float) -> None:
    for robot in sorted(sim.config.robots, key=lambda r: r.robot_id):
        rid = robot.robot_id
        pose = sim.world_pose(rid)
        if pose is None:
            continue  # emulated robot before its first estimate
        ctx = AgentContext(sim_time=t, dt=dt, pose=pose, scan=sim.latest_scan.get(rid))
        twist, intents = sim.behaviors[rid].step(ctx)
        twist = twist.clamped(DEFAULT_V_MAX, DEFAULT_OMEGA_MAX)
        sim.cmd[rid] = twist
        core.publish(
            schemas.robot_topic(rid, "cmd_vel"), schemas.twist_to_msg(twist.v, twist.omega)
        )
        for intent in intents:
            core.publish(
                schemas.im_topic(intent.intersection_id, "request"),
                {
                    "robot_id": rid,
                    "velocity": max(intent.velocity, 0.0),
                    "movement": intent.movement,
                    "pose": schemas.pose_to_msg(intent.pose),
                    "stamp": t,
                },
            )


def _fire_scripted_events(core, sim: _CoreState, config: ScenarioConfig, t: float) -> None:
    for index, event in enumerate(config.events):
        if index in sim.fired_events or event.t > t:
            continue
        sim.fired_events.add(index)
        agent = sim.agents.get(event.robot_id)
        pose = sim.world_pose(event.robot_id)
        if agent is not None and event.movement == MOVEMENT_EXIT:
            agent.command_exit(event.intersection_id)
        if pose is not None:
            core.publish(
                schemas.im_topic(event.intersection_id, "request"),
                {
                    "robot_id": event.robot_id,
                    "velocity": sim.cmd[event.robot_id].v,
                    "movement": event.movement,
                    "pose": schemas.pose_to_msg(pose),
                    "stamp": t,
                },
            )


def _im_pass(core, sim: _CoreState, t: float) -> None:
    requests = sorted(sim.pending_requests, key=lambda r: (r[0], r[1], r[2]))
    sim.pending_requests.clear()
    for stamp, iid, rid, msg in requests:
        manager = sim.ims.get(iid)
        if manager is None:
            continue
        req = IMRequest(
            robot_id=rid,
            velocity=msg["velocity"],
            movement=msg["movement"],
            pose=schemas.pose_from_msg(msg["pose"]),
            stamp=stamp,
        )
        try:
            manager.submit(req)
        except OutsideIMAreaError:
            continue  # stale or misdirected request; nothing to arbitrate
        if req.movement == MOVEMENT_EXIT:
            agent = sim.agents.get(rid)
            if agent is not None:
                agent.command_exit(iid)

    for iid in sorted(sim.ims):
        manager = sim.ims[iid]
        if manager.close_cycle_if_departed(t):
            sim.im_grants.append({"t": t, "im": iid, "event": "cycle_closed"})
        for entry in list(manager.queue.entries):
            if entry.movement != MOVEMENT_EXIT:
                continue
            granted = manager.try_grant(entry.robot_id, t)
            sim.im_grants.append(
                {"t": t, "im": iid, "robot": entry.robot_id, "granted": granted}
            )
            core.publish(
                schemas.im_topic(iid, "grant"),
                {"robot_id": entry.robot_id, "granted": granted, "stamp": t},
            )
            if granted:
                agent = sim.agents.get(entry.robot_id)
                pose = sim.world_pose(entry.robot_id)
                if agent is not None and pose is not None:
                    agent.on_exit_granted(iid, pose)
        arrival = {
            e.robot_id: manager.arrival_seq(e.robot_id) for e in manager.queue.entries
        }
        decisions = manager.resolve_pass()
        for position, (rid, velocity) in enumerate(decisions):
            sim.im_decisions.append(
                {
                    "t": t,
                    "im": iid,
                    "robot": rid,
                    "velocity": velocity,
                    "position": position,
                    "arrival_seq": arrival.get(rid),
                }
            )
            core.publish(
                schemas.im_topic(iid, "velocity"), {"robot_id": rid, "velocity": velocity}
            )
            agent = sim.agents.get(rid)
            if agent is not None:
                agent.on_im_velocity(velocity, t)


def _publish_virtual_tf(core, sim: _CoreState, t: float) -> None:
    transforms = [
        StampedTransform("map", schemas.robot_base_frame(rid), sim.virtual_pose[rid], t)
        for rid in sorted(sim.virtual_pose)
    ]
    if transforms:
        core.publish("/tf", schemas.tf_to_msg(transforms))


def _wait_for_ready(core, sim: _CoreState, processes, timeout: float) -> None:
    _collect_until(core, sim, processes, expected_tick=0, timeout=timeout)


def _barrier(core, sim: _CoreState, processes, tick: int, timeout: float) -> None:
    _collect_until(core, sim, processes, expected_tick=tick, timeout=timeout)


def _collect_until(core, sim: _CoreState, processes, expected_tick: int, timeout: float) -> None:
    """Drain the core inbox until every emulator acknowledged the tick.

    Per-connection FIFO ordering guarantees all of an emulator's tick-k
    messages precede its tick-k ack, so the drain is complete and the run
    is independent of wall-clock scheduling.
    """
    if not processes:
        while True:
            raw = core.recv_raw(0.0)
            if raw is None:
                return
            sim.ingest(json.loads(raw))
    deadline = time.monotonic() + timeout
    while True:
        if all(sim.acked.get(rid, -1) >= expected_tick for rid in processes):
            return
        raw = core.recv_raw(0.05)
        if raw is not None:
            sim.ingest(json.loads(raw))
            continue
        for rid, proc in processes.items():
            code = proc.poll()
            if code is not None and sim.acked.get(rid, -1) < expected_tick:
                stderr = proc.stderr.read() if proc.stderr else ""
                raise EmulatorSpawnFailure(
                    f"emulator {rid} exited with code {code} before tick {expected_tick}: {stderr.strip()}"
                )
        if time.monotonic() > deadline:
            raise EmulatorSpawnFailure(
                f"timed out waiting for tick {expected_tick} acks; "
                f"acked={sim.acked}, expected from {sorted(processes)}"
            )
