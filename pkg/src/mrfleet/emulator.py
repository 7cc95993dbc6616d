"""Stand-in for a real robot: a separate process owning hidden ground truth.

The emulator holds a private "physical" map and a true pose that never leaves
the process over the bridge. It executes velocity commands with actuation
noise, integrates a drifting odometry frame, casts noisy lidar against its
private map, localizes itself with MCL, and publishes only what a real robot
would: scans, odometry, the pose estimate, and the merged scan that folds in
the virtual scan received from the simulation core.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .bridge import schemas
from .control import Twist2D, step_diff_drive
from .geometry import Pose2D, StampedTransform, wrap_angle
from .lidar import LaserScan, ScanParams, cast_scan, merge_scans
from .localization import LikelihoodFieldModel, MclFilter, OdometryDelta
from .worldmap import OccupancyGrid, RobotFootprint, footprint_hits_grid, load_map

CONNECT_ATTEMPTS = 5


@dataclass(frozen=True)
class NoiseProfile:
    actuation_sigma_v: float = 0.005
    actuation_sigma_omega: float = 0.01
    odom_alphas: tuple[float, float, float, float] = (0.02, 0.02, 0.02, 0.02)
    scan_sigma: float = 0.01

    @staticmethod
    def from_file(path: str | Path) -> "NoiseProfile":
        data = json.loads(Path(path).read_text())
        return NoiseProfile(
            actuation_sigma_v=data.get("actuation_sigma_v", 0.005),
            actuation_sigma_omega=data.get("actuation_sigma_omega", 0.01),
            odom_alphas=tuple(data.get("odom_alphas", (0.02, 0.02, 0.02, 0.02))),
            scan_sigma=data.get("scan_sigma", 0.01),
        )


@dataclass(frozen=True)
class GroundTruthState:
    """Hidden truth plus the drifting dead-reckoning frame."""

    true_pose: Pose2D
    odom_pose: Pose2D
    noise: NoiseProfile


def _arc_delta(v: float, omega: float, dt: float) -> OdometryDelta:
    """Exact rot-trans-rot decomposition of one constant-command arc step.

    Computing it from the command keeps the decomposition well-conditioned;
    deriving it from pose differences turns millimeter jitter into arbitrary
    bearing rotations. The chord of the arc points half a turn off the
    starting heading, so the turn splits evenly around the translation.
    """
    half_turn = omega * dt / 2.0
    if abs(omega) < 1e-9:
        chord = v * dt
    else:
        chord = 2.0 * (v / omega) * math.sin(half_turn)
    if chord >= 0.0:
        return OdometryDelta(half_turn, chord, half_turn)
    # Reverse motion: the displacement bearing points behind the robot.
    return OdometryDelta(
        wrap_angle(half_turn + math.pi), -chord, wrap_angle(half_turn - math.pi)
    )


def emulator_tick(
    state: GroundTruthState,
    cmd: Twist2D,
    dt: float,
    grid_physical: OccupancyGrid,
    rng: np.random.Generator,
    footprint_radius: float = 0.105,
) -> tuple[GroundTruthState, OdometryDelta]:
    """Advance hidden truth by one noisy actuation step.

    Motion is blocked (v forced to zero for the tick) when the step would
    drive the footprint into the physical grid. Odometry re-measures the
    executed (v, omega) through encoder noise scaled by the motion magnitude
    and integrates the same arc model, so the odom frame drifts from truth
    while a motionless tick measures exactly zero.
    """
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    noise = state.noise
    v = cmd.v + rng.normal(0.0, 1.0) * noise.actuation_sigma_v
    omega = cmd.omega + rng.normal(0.0, 1.0) * noise.actuation_sigma_omega
    blocked = False
    candidate = step_diff_drive(state.true_pose, Twist2D(v, omega), dt)
    if footprint_hits_grid(RobotFootprint(-1, candidate, footprint_radius), grid_physical):
        v = 0.0
        candidate = step_diff_drive(state.true_pose, Twist2D(v, omega), dt)
        if footprint_hits_grid(RobotFootprint(-1, candidate, footprint_radius), grid_physical):
            candidate = state.true_pose  # even turning in place is blocked
            blocked = True
    v_exec, omega_exec = (0.0, 0.0) if blocked else (v, omega)

    a1, a2, a3, a4 = noise.odom_alphas
    v_meas = v_exec + rng.normal(0.0, 1.0) * math.sqrt(
        a3 * v_exec**2 + a4 * omega_exec**2
    )
    omega_meas = omega_exec + rng.normal(0.0, 1.0) * math.sqrt(
        a1 * omega_exec**2 + a2 * v_exec**2
    )
    odom = step_diff_drive(state.odom_pose, Twist2D(v_meas, omega_meas), dt)
    measured = _arc_delta(v_meas, omega_meas, dt)
    return replace(state, true_pose=candidate, odom_pose=odom), measured


@dataclass(frozen=True)
class EmulatorConfig:
    robot_id: int
    bridge_url: str
    map_path: str
    map_meta_path: str
    start_pose: Pose2D
    seed: int
    noise: NoiseProfile = NoiseProfile()
    footprint_radius: float = 0.105
    scan_every: int = 4  # physical scans every N clock ticks
    particles: int = 500
    beams: int = 360
    range_max: float = 3.5
    truth_log: str | None = None
    retry_base: float = 0.5


class EmulatorSession:
    """Message-driven emulator logic; transport-independent for testability."""

    def __init__(self, config: EmulatorConfig, grid: OccupancyGrid):
        self.config = config
        self.grid = grid
        self.rng = np.random.default_rng(config.seed)
        self.state = GroundTruthState(
            true_pose=config.start_pose,
            odom_pose=Pose2D.identity(),
            noise=config.noise,
        )
        self.scan_params = ScanParams(
            angle_min=-math.pi,
            angle_increment=2.0 * math.pi / config.beams,
            n_beams=config.beams,
            range_max=config.range_max,
        )
        self.mcl = MclFilter(
            grid,
            n_particles=config.particles,
            model=LikelihoodFieldModel(),
            rng=self.rng,
        )
        self.mcl.initialize_at(config.start_pose, sigma_xy=0.03, sigma_theta=0.02)
        self.cmd = Twist2D(0.0, 0.0)
        self.virtual_scan: LaserScan | None = None
        self.sim_time = 0.0
        self.tick_count = 0
        self._odom_at_last_mcl = self.state.odom_pose
        self.truth_trace: list[tuple[float, Pose2D]] = []
        self.frame = schemas.robot_base_frame(config.robot_id)
        self.shutdown = False

    # -- protocol wiring ---------------------------------------------------

    def topic(self, suffix: str) -> str:
        return schemas.robot_topic(self.config.robot_id, suffix)

    def hello_frames(self) -> list[dict]:
        """Advertisements, subscriptions and the ready ack, in send order."""
        frames = [
            {"op": "advertise", "topic": self.topic("scan"), "type": "scan"},
            {"op": "advertise", "topic": self.topic("merged_scan"), "type": "scan"},
            {"op": "advertise", "topic": self.topic("odom"), "type": "odom"},
            {"op": "advertise", "topic": self.topic("pose_estimate"), "type": "pose_cov"},
            {"op": "advertise", "topic": "/tf", "type": "tf"},
            {"op": "advertise", "topic": "/tick_ack", "type": "tick_ack"},
            {"op": "subscribe", "topic": self.topic("cmd_vel"), "type": "twist"},
            {"op": "subscribe", "topic": self.topic("virtual_scan"), "type": "scan"},
            {"op": "subscribe", "topic": "/clock", "type": "clock"},
            {"op": "subscribe", "topic": "/sim/shutdown", "type": "shutdown"},
            {
                "op": "publish",
                "topic": "/tick_ack",
                "msg": {"robot_id": self.config.robot_id, "tick": 0},
            },
        ]
        return frames

    def on_message(self, frame: dict) -> list[dict]:
        if frame.get("op") == "status" and frame.get("level") == "error":
            raise RuntimeError(f"bridge rejected a frame: {frame.get('msg')}")
        if frame.get("op") != "publish":
            return []
        topic = frame.get("topic")
        msg = frame.get("msg", {})
        if topic == self.topic("cmd_vel"):
            self.cmd = Twist2D(msg["v"], msg["omega"])
            return []
        if topic == self.topic("virtual_scan"):
            self.virtual_scan = schemas.scan_from_msg(msg)
            return []
        if topic == "/sim/shutdown":
            self.shutdown = True
            return []
        if topic == "/clock":
            return self.on_clock(msg["sim_time"])
        return []

    # -- simulation --------------------------------------------------------

    def on_clock(self, sim_time: float) -> list[dict]:
        dt = sim_time - self.sim_time
        if dt <= 0:
            self.sim_time = max(self.sim_time, sim_time)
            return []
        self.sim_time = sim_time
        self.tick_count += 1
        self.state, _ = emulator_tick(
            self.state, self.cmd, dt, self.grid, self.rng, self.config.footprint_radius
        )
        self.truth_trace.append((sim_time, self.state.true_pose))

        out: list[dict] = []
        if self.tick_count % self.config.scan_every == 0:
            out.extend(self._scan_and_localize())
        out.append(
            {
                "op": "publish",
                "topic": "/tick_ack",
                "msg": {"robot_id": self.config.robot_id, "tick": self.tick_count},
            }
        )
        return out

    def _scan_and_localize(self) -> list[dict]:
        scan = cast_scan(
            self.state.true_pose,
            self.grid,
            params=self.scan_params,
            noise_sigma=self.config.noise.scan_sigma,
            rng=self.rng,
            frame=self.frame,
            stamp=self.sim_time,
        )
        delta = OdometryDelta.from_poses(self._odom_at_last_mcl, self.state.odom_pose)
        self._odom_at_last_mcl = self.state.odom_pose
        estimate = self.mcl.update(delta, scan)
        _, cov = self.mcl.estimate()

        merged = scan
        if self.virtual_scan is not None:
            merged = merge_scans(scan, self.virtual_scan)
        out = [
            {"op": "publish", "topic": self.topic("scan"), "msg": schemas.scan_to_msg(scan)},
            {
                "op": "publish",
                "topic": self.topic("merged_scan"),
                "msg": schemas.scan_to_msg(
                    LaserScan(
                        frame=merged.frame,
                        stamp=self.sim_time,
                        angle_min=merged.angle_min,
                        angle_max=merged.angle_max,
                        angle_increment=merged.angle_increment,
                        range_min=merged.range_min,
                        range_max=merged.range_max,
                        ranges=merged.ranges,
                    )
                ),
            },
            {
                "op": "publish",
                "topic": self.topic("odom"),
                "msg": {
                    "frame": f"robot_{self.config.robot_id}/odom",
                    "stamp": self.sim_time,
                    "pose": schemas.pose_to_msg(self.state.odom_pose),
                    "twist": schemas.twist_to_msg(self.cmd.v, self.cmd.omega),
                },
            },
            {
                "op": "publish",
                "topic": "/tf",
                "msg": schemas.tf_to_msg(
                    [StampedTransform("map", self.frame, estimate, self.sim_time)]
                ),
            },
            {
                "op": "publish",
                "topic": self.topic("pose_estimate"),
                "msg": {
                    "frame": "map",
                    "stamp": self.sim_time,
                    "pose": schemas.pose_to_msg(estimate),
                    "covariance": [float(c) for c in cov.ravel()],
                },
            },
        ]
        return out

    def write_truth_log(self) -> None:
        if self.config.truth_log is None:
            return
        path = Path(self.config.truth_log)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            for stamp, pose in self.truth_trace:
                fh.write(f"{stamp!r} {pose.x!r} {pose.y!r} {pose.theta!r}\n")


def _encode(frame: dict) -> str:
    return json.dumps(frame, sort_keys=True, separators=(",", ":"), allow_nan=False)


def run_emulator(config: EmulatorConfig) -> int:
    """Connect to the bridge and run until shutdown; returns an exit code."""
    from websockets.sync.client import connect as ws_connect

    try:
        grid = load_map(
            Path(config.map_path).read_bytes(), Path(config.map_meta_path).read_text()
        )
    except Exception as exc:
        print(f"emulator {config.robot_id}: cannot load map: {exc}", file=sys.stderr)
        return 3

    ws = None
    for attempt in range(CONNECT_ATTEMPTS):
        try:
            ws = ws_connect(config.bridge_url, max_size=None)
            break
        except (OSError, ConnectionError) as exc:
            wait = config.retry_base * (2**attempt)
            print(
                f"emulator {config.robot_id}: bridge unreachable "
                f"(attempt {attempt + 1}/{CONNECT_ATTEMPTS}): {exc}",
                file=sys.stderr,
            )
            if attempt + 1 < CONNECT_ATTEMPTS:
                time.sleep(wait)
    if ws is None:
        print(f"emulator {config.robot_id}: giving up on the bridge", file=sys.stderr)
        return 2

    session = EmulatorSession(config, grid)
    try:
        with ws:
            for frame in session.hello_frames():
                ws.send(_encode(frame))
            while not session.shutdown:
                try:
                    raw = ws.recv()
                except Exception:
                    break  # connection closed by the bridge: clean exit
                for out in session.on_message(json.loads(raw)):
                    ws.send(_encode(out))
    finally:
        session.write_truth_log()
    return 0


def parse_args(argv: list[str] | None = None) -> EmulatorConfig:
    parser = argparse.ArgumentParser(
        prog="emulator",
        description="Emulated physical robot: private map, hidden truth, MCL estimate.",
    )
    parser.add_argument("--id", type=int, required=True, dest="robot_id")
    parser.add_argument("--bridge", required=True, help="bridge WebSocket URL")
    parser.add_argument("--map", required=True, help="physical map PGM file")
    parser.add_argument("--map-meta", required=True, help="map metadata sidecar")
    parser.add_argument("--start-pose", required=True, help="x,y,theta (map frame)")
    parser.add_argument("--seed", type=int, required=True)
    parser.add_argument("--noise-profile", default=None, help="JSON noise profile")
    parser.add_argument("--footprint-radius", type=float, default=0.105)
    parser.add_argument("--scan-every", type=int, default=4)
    parser.add_argument("--particles", type=int, default=500)
    parser.add_argument("--beams", type=int, default=360)
    parser.add_argument("--range-max", type=float, default=3.5)
    parser.add_argument("--truth-log", default=None)
    parser.add_argument("--retry-base", type=float, default=0.5)
    args = parser.parse_args(argv)

    try:
        x, y, theta = (float(p) for p in args.start_pose.split(","))
    except ValueError:
        parser.error(f"--start-pose must be x,y,theta, got {args.start_pose!r}")
    noise = NoiseProfile.from_file(args.noise_profile) if args.noise_profile else NoiseProfile()
    return EmulatorConfig(
        robot_id=args.robot_id,
        bridge_url=args.bridge,
        map_path=args.map,
        map_meta_path=args.map_meta,
        start_pose=Pose2D(x, y, theta),
        seed=args.seed,
        noise=noise,
        footprint_radius=args.footprint_radius,
        scan_every=args.scan_every,
        particles=args.particles,
        beams=args.beams,
        range_max=args.range_max,
        truth_log=args.truth_log,
        retry_base=args.retry_base,
    )


def main(argv: list[str] | None = None) -> int:
    return run_emulator(parse_args(argv))


if __name__ == "__main__":
    sys.exit(main())
