"""Wire schemas for the bridge protocol and codecs to/from core types.

Every topic carries exactly one schema for its lifetime. All numbers are
plain JSON numbers (angles in radians, distances in meters); a scan beam's
no-return is null on the wire and NaN in core arrays.
"""

from __future__ import annotations

import math
from typing import Any, Callable

import numpy as np

from ..geometry import FrameAlignment, Pose2D, StampedTransform
from ..lidar import LaserScan
from ..worldmap import OccupancyGrid

MOVEMENT_VALUES = ("exit", "follow", "enter")

# Command-type schemas disconnect slow subscribers on overflow; everything
# else drops oldest (stale commands are dangerous, stale data is not).
COMMAND_SCHEMAS = frozenset({"twist", "im_request", "im_velocity", "alignment"})

# Topics whose last message is kept and replayed to late subscribers.
LATCHED_TOPICS = frozenset(
    {"/clock", "/tf", "/world/alignment", "/world/map", "/world/map_meta", "/world/robots"}
)


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _check_pose(v: Any) -> str | None:
    if not isinstance(v, dict):
        return "pose must be an object"
    for key in ("x", "y", "theta"):
        if not _is_number(v.get(key)):
            return f"pose.{key} must be a number"
    return None


def _check_fields(msg: Any, fields: dict[str, Callable[[Any], bool]]) -> str | None:
    if not isinstance(msg, dict):
        return "message must be an object"
    for name, check in fields.items():
        if name not in msg:
            return f"missing field {name!r}"
        if not check(msg[name]):
            return f"field {name!r} has the wrong type"
    return None


def _validate_scan(msg: Any) -> str | None:
    err = _check_fields(
        msg,
        {
            "frame": lambda v: isinstance(v, str),
            "stamp": _is_number,
            "angle_min": _is_number,
            "angle_max": _is_number,
            "angle_increment": _is_number,
            "range_min": _is_number,
            "range_max": _is_number,
            "ranges": lambda v: isinstance(v, list),
        },
    )
    if err:
        return err
    for r in msg["ranges"]:
        if r is not None and not _is_number(r):
            return "ranges entries must be numbers or null"
    return None


def _validate_twist(msg: Any) -> str | None:
    return _check_fields(msg, {"v": _is_number, "omega": _is_number})


def _validate_odom(msg: Any) -> str | None:
    err = _check_fields(
        msg,
        {
            "frame": lambda v: isinstance(v, str),
            "stamp": _is_number,
            "pose": lambda v: True,
            "twist": lambda v: True,
        },
    )
    if err:
        return err
    return _check_pose(msg["pose"]) or _validate_twist(msg["twist"])


def _validate_tf(msg: Any) -> str | None:
    err = _check_fields(msg, {"transforms": lambda v: isinstance(v, list)})
    if err:
        return err
    for t in msg["transforms"]:
        sub = _check_fields(
            t,
            {
                "parent": lambda v: isinstance(v, str),
                "child": lambda v: isinstance(v, str),
                "stamp": _is_number,
                "x": _is_number,
                "y": _is_number,
                "theta": _is_number,
            },
        )
        if sub:
            return f"transforms entry: {sub}"
    return None


def _validate_im_request(msg: Any) -> str | None:
    err = _check_fields(
        msg,
        {
            "robot_id": _is_int,
            "velocity": lambda v: _is_number(v) and v >= 0,
            "movement": lambda v: v in MOVEMENT_VALUES,
            "pose": lambda v: True,
            "stamp": _is_number,
        },
    )
    if err:
        return err
    return _check_pose(msg["pose"])


def _validate_im_velocity(msg: Any) -> str | None:
    return _check_fields(msg, {"robot_id": _is_int, "velocity": _is_number})


def _validate_clock(msg: Any) -> str | None:
    return _check_fields(msg, {"sim_time": _is_number})


def _validate_alignment(msg: Any) -> str | None:
    return _check_fields(
        msg,
        {
            "rotation": _is_number,
            "tx": _is_number,
            "ty": _is_number,
            "scale": lambda v: _is_number(v) and v > 0,
        },
    )


def _validate_pose_cov(msg: Any) -> str | None:
    err = _check_fields(
        msg,
        {
            "frame": lambda v: isinstance(v, str),
            "stamp": _is_number,
            "pose": lambda v: True,
            "covariance": lambda v: isinstance(v, list) and len(v) == 9,
        },
    )
    if err:
        return err
    if not all(_is_number(c) for c in msg["covariance"]):
        return "covariance entries must be numbers"
    return _check_pose(msg["pose"])


def _validate_tick_ack(msg: Any) -> str | None:
    return _check_fields(msg, {"robot_id": _is_int, "tick": _is_int})


def _validate_shutdown(msg: Any) -> str | None:
    return None if isinstance(msg, dict) else "message must be an object"


def _validate_im_grant(msg: Any) -> str | None:
    return _check_fields(
        msg,
        {
            "robot_id": _is_int,
            "granted": lambda v: isinstance(v, bool),
            "stamp": _is_number,
        },
    )


def _validate_roster(msg: Any) -> str | None:
    err = _check_fields(
        msg,
        {"robots": lambda v: isinstance(v, list), "ims": lambda v: isinstance(v, list)},
    )
    if err:
        return err
    for entry in msg["robots"]:
        sub = _check_fields(
            entry,
            {
                "id": _is_int,
                "kind": lambda v: v in ("virtual", "emulated"),
                "radius": lambda v: _is_number(v) and v > 0,
            },
        )
        if sub:
            return f"robots entry: {sub}"
    for entry in msg["ims"]:
        sub = _check_fields(
            entry,
            {
                "id": _is_int,
                "x": _is_number,
                "y": _is_number,
                "area_radius": lambda v: _is_number(v) and v > 0,
            },
        )
        if sub:
            return f"ims entry: {sub}"
    return None


def _validate_map_meta(msg: Any) -> str | None:
    return _check_fields(
        msg,
        {
            "width": _is_int,
            "height": _is_int,
            "resolution": lambda v: _is_number(v) and v > 0,
            "origin_x": _is_number,
            "origin_y": _is_number,
            "origin_theta": _is_number,
        },
    )


def _validate_map_grid(msg: Any) -> str | None:
    err = _validate_map_meta({k: v for k, v in msg.items() if k != "cells"}) if isinstance(msg, dict) else "message must be an object"
    if err:
        return err
    cells = msg.get("cells")
    if not isinstance(cells, list) or len(cells) != msg["width"] * msg["height"]:
        return "cells must be a list of width*height class values"
    if not all(c in (-1, 0, 1) for c in cells):
        return "cells entries must be -1, 0 or 1"
    return None


VALIDATORS: dict[str, Callable[[Any], str | None]] = {
    "scan": _validate_scan,
    "twist": _validate_twist,
    "odom": _validate_odom,
    "tf": _validate_tf,
    "im_request": _validate_im_request,
    "im_velocity": _validate_im_velocity,
    "clock": _validate_clock,
    "alignment": _validate_alignment,
    "pose_cov": _validate_pose_cov,
    "tick_ack": _validate_tick_ack,
    "map_meta": _validate_map_meta,
    "map_grid": _validate_map_grid,
    "shutdown": _validate_shutdown,
    "im_grant": _validate_im_grant,
    "roster": _validate_roster,
}


def known_schema(name: str) -> bool:
    return name in VALIDATORS


def validate_message(schema: str, msg: Any) -> str | None:
    """None when valid, else a human-readable reason."""
    validator = VALIDATORS.get(schema)
    if validator is None:
        return f"unknown schema {schema!r}"
    return validator(msg)


def schema_kind(schema: str) -> str:
    return "command" if schema in COMMAND_SCHEMAS else "data"


def is_latched_topic(topic: str) -> bool:
    return topic in LATCHED_TOPICS


# ---------------------------------------------------------------------------
# Codecs between core dataclasses and wire payloads.

def pose_to_msg(pose: Pose2D) -> dict:
    return {"x": pose.x, "y": pose.y, "theta": pose.theta}


def pose_from_msg(msg: dict) -> Pose2D:
    return Pose2D(msg["x"], msg["y"], msg["theta"])


def scan_to_msg(scan: LaserScan) -> dict:
    return {
        "frame": scan.frame,
        "stamp": scan.stamp,
        "angle_min": scan.angle_min,
        "angle_max": scan.angle_max,
        "angle_increment": scan.angle_increment,
        "range_min": scan.range_min,
        "range_max": scan.range_max,
        "ranges": [None if not math.isfinite(r) else float(r) for r in scan.ranges],
    }


def scan_from_msg(msg: dict) -> LaserScan:
    ranges = np.array(
        [math.nan if r is None else float(r) for r in msg["ranges"]], dtype=float
    )
    return LaserScan(
        frame=msg["frame"],
        stamp=msg["stamp"],
        angle_min=msg["angle_min"],
        angle_max=msg["angle_max"],
        angle_increment=msg["angle_increment"],
        range_min=msg["range_min"],
        range_max=msg["range_max"],
        ranges=ranges,
    )


def twist_to_msg(v: float, omega: float) -> dict:
    return {"v": v, "omega": omega}


def tf_to_msg(transforms: list[StampedTransform]) -> dict:
    return {
        "transforms": [
            {
                "parent": t.parent,
                "child": t.child,
                "stamp": t.stamp,
                "x": t.transform.x,
                "y": t.transform.y,
                "theta": t.transform.theta,
            }
            for t in transforms
        ]
    }


def transforms_from_msg(msg: dict) -> list[StampedTransform]:
    return [
        StampedTransform(
            parent=t["parent"],
            child=t["child"],
            transform=Pose2D(t["x"], t["y"], t["theta"]),
            stamp=t["stamp"],
        )
        for t in msg["transforms"]
    ]


def alignment_to_msg(align: FrameAlignment) -> dict:
    return {
        "rotation": align.rotation,
        "tx": align.tx,
        "ty": align.ty,
        "scale": align.scale,
    }


def alignment_from_msg(msg: dict) -> FrameAlignment:
    return FrameAlignment(
        rotation=msg["rotation"], tx=msg["tx"], ty=msg["ty"], scale=msg["scale"]
    )


def map_meta_to_msg(grid: OccupancyGrid) -> dict:
    return {
        "width": grid.width,
        "height": grid.height,
        "resolution": grid.resolution,
        "origin_x": grid.origin.x,
        "origin_y": grid.origin.y,
        "origin_theta": grid.origin.theta,
    }


def map_grid_to_msg(grid: OccupancyGrid) -> dict:
    msg = map_meta_to_msg(grid)
    msg["cells"] = [int(c) for c in grid.classification().ravel()]
    return msg


# Topic naming helpers.

def robot_topic(robot_id: int, suffix: str) -> str:
    return f"/robot_{robot_id}/{suffix}"


def im_topic(intersection_id: int, suffix: str) -> str:
    return f"/im/{intersection_id}/{suffix}"


def robot_base_frame(robot_id: int) -> str:
    return f"robot_{robot_id}/base"
