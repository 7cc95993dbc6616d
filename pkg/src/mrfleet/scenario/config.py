"""Scenario configuration: TOML files, bundled templates, validation."""

from __future__ import annotations

import sys
from dataclasses import dataclass, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..geometry import Pose2D
from ..worldmap import RoundaboutParams

CONTROLLERS = ("lane-pid", "follower", "manual")
ROBOT_KINDS = ("virtual", "emulated")


class ConfigInvalidError(ValueError):
    pass


@dataclass(frozen=True)
class VirtualObject:
    """Obstacle present only in the virtual world, not in physical maps."""

    shape: str  # "disc" | "box"
    x: float
    y: float
    radius: float = 0.0  # disc
    width: float = 0.0  # box extent in x
    height: float = 0.0  # box extent in y


@dataclass(frozen=True)
class WorldConfig:
    kind: str  # "roundabout" | "open_room" | "file"
    roundabout: RoundaboutParams | None = None
    map_path: str | None = None
    map_meta_path: str | None = None
    room_width: float = 8.0
    room_height: float = 4.0
    resolution: float = 0.05
    virtual_objects: tuple[VirtualObject, ...] = ()


@dataclass(frozen=True)
class RobotConfig:
    robot_id: int
    kind: str
    start_pose: Pose2D
    controller: str
    v_desired: float = 0.15
    lane: str | None = None
    gap_target: float = 0.6
    cmd: tuple[float, float] = (0.0, 0.0)
    scan_source: str = "merged"  # follower input: "merged" | "virtual"
    footprint_radius: float = 0.105
    # Gap keeping while lane-following; d_slow tracks gap control defaults.
    d_stop: float = 0.3
    d_slow: float = 0.7


@dataclass(frozen=True)
class IMConfigEntry:
    intersection_id: int
    point: tuple[float, float] | None  # None: derive from roundabout geometry
    area_radius: float | None = None
    conflict_window: float = 1.5
    capture_radius: float = 0.15


@dataclass(frozen=True)
class ScriptedEvent:
    t: float
    robot_id: int
    movement: str
    intersection_id: int


@dataclass(frozen=True)
class RunSettings:
    tick_rate: float = 20.0
    duration: float = 10.0
    seed: int = 0
    scan_rate: float = 5.0
    im_rate: float = 10.0
    bridge_port: int = 0  # 0: ephemeral; mr-fleet serve defaults to 9090
    ack_timeout: float = 30.0


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    world: WorldConfig
    run: RunSettings
    robots: tuple[RobotConfig, ...]
    ims: tuple[IMConfigEntry, ...] = ()
    events: tuple[ScriptedEvent, ...] = ()

    def with_duration(self, duration: float) -> "ScenarioConfig":
        return replace(self, run=replace(self.run, duration=duration))

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return replace(self, run=replace(self.run, seed=seed))

    def emulated_robots(self) -> list[RobotConfig]:
        return [r for r in self.robots if r.kind == "emulated"]

    def robot(self, robot_id: int) -> RobotConfig:
        for r in self.robots:
            if r.robot_id == robot_id:
                return r
        raise KeyError(robot_id)


def _require(table: dict, key: str, context: str):
    if key not in table:
        raise ConfigInvalidError(f"{context}: missing key {key!r}")
    return table[key]


def _parse_world(table: dict) -> WorldConfig:
    kind = _require(table, "kind", "[world]")
    objects = tuple(
        VirtualObject(
            shape=_require(o, "shape", "[[world.virtual_objects]]"),
            x=float(_require(o, "x", "[[world.virtual_objects]]")),
            y=float(_require(o, "y", "[[world.virtual_objects]]")),
            radius=float(o.get("radius", 0.0)),
            width=float(o.get("width", 0.0)),
            height=float(o.get("height", 0.0)),
        )
        for o in table.get("virtual_objects", [])
    )
    for obj in objects:
        if obj.shape not in ("disc", "box"):
            raise ConfigInvalidError(f"virtual object shape must be disc or box, got {obj.shape!r}")
    if kind == "roundabout":
        params = RoundaboutParams(
            r1=float(table.get("r1", 1.0)),
            r2=float(table.get("r2", 1.0)),
            center_distance=float(table.get("center_distance", 4.0)),
            lane_width=float(table.get("lane_width", 0.3)),
            resolution=float(table.get("resolution", 0.02)),
        )
        return WorldConfig(kind=kind, roundabout=params, virtual_objects=objects)
    if kind == "open_room":
        return WorldConfig(
            kind=kind,
            room_width=float(table.get("width", 8.0)),
            room_height=float(table.get("height", 4.0)),
            resolution=float(table.get("resolution", 0.05)),
            virtual_objects=objects,
        )
    if kind == "file":
        return WorldConfig(
            kind=kind,
            map_path=str(_require(table, "map", "[world]")),
            map_meta_path=str(_require(table, "map_meta", "[world]")),
            virtual_objects=objects,
        )
    raise ConfigInvalidError(
        f"[world].kind must be 'roundabout', 'open_room' or 'file', got {kind!r}"
    )


def _parse_robot(table: dict) -> RobotConfig:
    robot_id = int(_require(table, "id", "[[robots]]"))
    kind = _require(table, "kind", f"robot {robot_id}")
    controller = _require(table, "controller", f"robot {robot_id}")
    if kind not in ROBOT_KINDS:
        raise ConfigInvalidError(f"robot {robot_id}: kind must be one of {ROBOT_KINDS}")
    if controller not in CONTROLLERS:
        raise ConfigInvalidError(f"robot {robot_id}: controller must be one of {CONTROLLERS}")
    pose = _require(table, "start_pose", f"robot {robot_id}")
    if not (isinstance(pose, list) and len(pose) == 3):
        raise ConfigInvalidError(f"robot {robot_id}: start_pose must be [x, y, theta]")
    cmd = table.get("cmd", [0.0, 0.0])
    return RobotConfig(
        robot_id=robot_id,
        kind=kind,
        start_pose=Pose2D(*(float(v) for v in pose)),
        controller=controller,
        v_desired=float(table.get("v_desired", 0.15)),
        lane=table.get("lane"),
        gap_target=float(table.get("gap_target", 0.6)),
        cmd=(float(cmd[0]), float(cmd[1])),
        scan_source=table.get("scan_source", "merged"),
        footprint_radius=float(table.get("footprint_radius", 0.105)),
        d_stop=float(table.get("d_stop", 0.3)),
        d_slow=float(table.get("d_slow", 0.7)),
    )


def _parse_im(table: dict) -> IMConfigEntry:
    point = table.get("point")
    return IMConfigEntry(
        intersection_id=int(_require(table, "id", "[[ims]]")),
        point=(float(point[0]), float(point[1])) if point is not None else None,
        area_radius=float(table["area_radius"]) if "area_radius" in table else None,
        conflict_window=float(table.get("conflict_window", 1.5)),
        capture_radius=float(table.get("capture_radius", 0.15)),
    )


def _parse_event(table: dict) -> ScriptedEvent:
    return ScriptedEvent(
        t=float(_require(table, "t", "[[events]]")),
        robot_id=int(_require(table, "robot", "[[events]]")),
        movement=str(table.get("movement", "exit")),
        intersection_id=int(_require(table, "im", "[[events]]")),
    )


def _validate(config: ScenarioConfig) -> ScenarioConfig:
    run = config.run
    if run.tick_rate <= 0 or run.duration <= 0:
        raise ConfigInvalidError("tick_rate and duration must be > 0")
    if run.scan_rate <= 0 or run.scan_rate > run.tick_rate:
        raise ConfigInvalidError("need 0 < scan_rate <= tick_rate")
    if run.im_rate <= 0 or run.im_rate > run.tick_rate:
        raise ConfigInvalidError("need 0 < im_rate <= tick_rate")
    ids = [r.robot_id for r in config.robots]
    if len(ids) != len(set(ids)):
        raise ConfigInvalidError(f"robot ids must be unique, got {sorted(ids)}")
    if not config.robots:
        raise ConfigInvalidError("a scenario needs at least one robot")
    for robot in config.robots:
        if robot.controller == "lane-pid" and robot.lane is None:
            raise ConfigInvalidError(f"robot {robot.robot_id}: lane-pid needs a lane name")
    if config.world.kind == "roundabout":
        speeds = [r.v_desired for r in config.robots if r.controller == "lane-pid"]
        if len(speeds) != len(set(speeds)):
            raise ConfigInvalidError(
                "roundabout scenarios initialize every lane robot with a unique speed; "
                f"got duplicates in {sorted(speeds)}"
            )
    im_ids = [im.intersection_id for im in config.ims]
    if len(im_ids) != len(set(im_ids)):
        raise ConfigInvalidError("intersection ids must be unique")
    for event in config.events:
        if event.robot_id not in ids:
            raise ConfigInvalidError(f"event references unknown robot {event.robot_id}")
        if config.ims and event.intersection_id not in im_ids:
            raise ConfigInvalidError(f"event references unknown IM {event.intersection_id}")
    return config


def parse_config(data: dict, name: str = "scenario") -> ScenarioConfig:
    if "world" not in data:
        raise ConfigInvalidError("missing [world] section")
    run_table = data.get("run", {})
    run = RunSettings(
        tick_rate=float(run_table.get("tick_rate", 20.0)),
        duration=float(run_table.get("duration", 10.0)),
        seed=int(run_table.get("seed", 0)),
        scan_rate=float(run_table.get("scan_rate", 5.0)),
        im_rate=float(run_table.get("im_rate", 10.0)),
        bridge_port=int(run_table.get("bridge_port", 0)),
        ack_timeout=float(run_table.get("ack_timeout", 30.0)),
    )
    config = ScenarioConfig(
        name=str(data.get("name", name)),
        world=_parse_world(data["world"]),
        run=run,
        robots=tuple(_parse_robot(t) for t in data.get("robots", [])),
        ims=tuple(_parse_im(t) for t in data.get("ims", [])),
        events=tuple(_parse_event(t) for t in data.get("events", [])),
    )
    return _validate(config)


def load_config(path: str | Path | None = None, text: str | None = None) -> ScenarioConfig:
    if (path is None) == (text is None):
        raise ConfigInvalidError("provide exactly one of path or text")
    if path is not None:
        raw = Path(path).read_bytes()
        name = Path(path).stem
    else:
        raw = text.encode()
        name = "inline"
    try:
        data = tomllib.loads(raw.decode())
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigInvalidError(f"bad TOML: {exc}") from exc
    return parse_config(data, name)


def template_path(name: str) -> Path:
    base = Path(__file__).resolve().parent.parent / "templates"
    path = base / f"{name}.toml"
    if not path.exists():
        available = sorted(p.stem for p in base.glob("*.toml"))
        raise ConfigInvalidError(f"unknown template {name!r}; bundled: {available}")
    return path


def load_template(name: str) -> ScenarioConfig:
    return load_config(path=template_path(name))
