"""Meta-action labels from ego kinematics and chain-of-thought training text.

A trajectory is a float array of ``(t, x, y, heading, speed)`` rows.  Lanes
are centerline polylines (arrays of ``(x, y)`` points, ordered along the
driving direction).  Headings are counterclockwise-positive, so positive
heading change and positive lateral offset both mean "left".
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import templates as tpl
from .errors import ParseError

VELOCITY_ACTIONS = tpl.VELOCITY_ACTIONS
DIRECTION_ACTIONS = tpl.DIRECTION_ACTIONS


@dataclass(frozen=True)
class Thresholds:
    accel: float = 0.4
    turn_deg: float = 15.0
    stop_speed: float = 0.2
    lane_offset: float = 1.75


DEFAULT_THRESHOLDS = Thresholds()


class MetaAction(NamedTuple):
    velocity: str
    direction: str

    def __str__(self) -> str:
        return f"{self.velocity}|{self.direction}"


ALL_META = tuple(MetaAction(v, d) for v in VELOCITY_ACTIONS for d in DIRECTION_ACTIONS)

MIRROR_DIRECTION = {
    "GoStraight": "GoStraight",
    "TurnLeft": "TurnRight",
    "TurnRight": "TurnLeft",
    "ChangeLaneLeft": "ChangeLaneRight",
    "ChangeLaneRight": "ChangeLaneLeft",
    "Stop": "Stop",
}


def _check_traj(traj) -> np.ndarray:
    traj = np.asarray(traj, dtype=np.float64)
    if traj.ndim != 2 or traj.shape[1] != 5:
        raise ValueError(f"trajectory must have shape (n, 5), got {traj.shape}")
    if traj.shape[0] < 2:
        raise ValueError("trajectory needs at least 2 samples")
    if not np.all(np.isfinite(traj)):
        raise ValueError("trajectory contains non-finite values")
    if np.any(np.diff(traj[:, 0]) <= 0):
        raise ValueError("trajectory timestamps must be strictly increasing")
    return traj


def mean_acceleration(traj) -> float:
    traj = _check_traj(traj)
    return float((traj[-1, 4] - traj[0, 4]) / (traj[-1, 0] - traj[0, 0]))


def velocity_action(traj, th: Thresholds = DEFAULT_THRESHOLDS) -> str:
    a = mean_acceleration(traj)
    if a > th.accel:
        return "Accelerate"
    if a < -th.accel:
        return "Decelerate"
    return "MaintainSpeed"


def heading_change(traj) -> float:
    """Total heading change in radians, summing wrapped per-step differences."""
    traj = _check_traj(traj)
    steps = np.diff(traj[:, 3])
    return float(np.sum((steps + math.pi) % (2 * math.pi) - math.pi))


def _closest_on_polyline(p: np.ndarray, poly: np.ndarray) -> tuple[float, float]:
    """Unsigned distance and signed lateral offset (left positive) of ``p``."""
    best, signed = math.inf, 0.0
    for a, b in zip(poly[:-1], poly[1:]):
        e = b - a
        seg2 = float(e @ e)
        if seg2 == 0.0:
            continue
        t = min(max(float((p - a) @ e) / seg2, 0.0), 1.0)
        q = p - (a + t * e)
        dist = math.hypot(q[0], q[1])
        if dist < best:
            best = dist
            cross = e[0] * (p[1] - a[1]) - e[1] * (p[0] - a[0])
            signed = math.copysign(dist, cross) if cross != 0 else 0.0
    return best, signed


def lateral_offset(traj, lanes) -> float | None:
    """Signed offset of the last sample from the lane nearest the first sample."""
    traj = _check_traj(traj)
    polys = [np.asarray(l, dtype=np.float64) for l in lanes]
    polys = [p for p in polys if p.ndim == 2 and len(p) >= 2]
    if not polys:
        return None
    start = traj[0, 1:3]
    matched = min(range(len(polys)), key=lambda i: (_closest_on_polyline(start, polys[i])[0], i))
    return _closest_on_polyline(traj[-1, 1:3], polys[matched])[1]


def directional_action(traj, lanes=(), th: Thresholds = DEFAULT_THRESHOLDS) -> str:
    traj = _check_traj(traj)
    if np.all(traj[:, 4] < th.stop_speed):
        return "Stop"
    turn = heading_change(traj)
    if abs(turn) > math.radians(th.turn_deg):
        return "TurnLeft" if turn > 0 else "TurnRight"
    offset = lateral_offset(traj, lanes)
    if offset is not None and abs(offset) > th.lane_offset:
        return "ChangeLaneLeft" if offset > 0 else "ChangeLaneRight"
    return "GoStraight"


def compose_meta(velocity: str, direction: str, residual_motion: bool = False) -> MetaAction:
    """Combine the two labels; a Stop forces Decelerate while motion remains, else MaintainSpeed."""
    if velocity not in VELOCITY_ACTIONS:
        raise ValueError(f"unknown velocity action {velocity!r}")
    if direction not in DIRECTION_ACTIONS:
        raise ValueError(f"unknown direction action {direction!r}")
    if direction == "Stop":
        velocity = "Decelerate" if residual_motion else "MaintainSpeed"
    return MetaAction(velocity, direction)


def label_trajectory(traj, lanes=(), th: Thresholds = DEFAULT_THRESHOLDS) -> MetaAction:
    traj = _check_traj(traj)
    return compose_meta(
        velocity_action(traj, th),
        directional_action(traj, lanes, th),
        residual_motion=bool(np.any(traj[:, 4] > 0)),
    )


def mirror_meta(meta: MetaAction) -> MetaAction:
    return MetaAction(meta.velocity, MIRROR_DIRECTION[meta.direction])


# -- chain of thought -------------------------------------------------------

_META_RE = re.compile(r"META:\s*(\w+)\s*\|\s*(\w+)")


def parse_meta(text: str) -> MetaAction:
    matches = _META_RE.findall(text)
    if not matches:
        raise ParseError("no META line found")
    velocity, direction = matches[-1]
    if velocity not in VELOCITY_ACTIONS:
        raise ParseError(f"unknown velocity action {velocity!r}")
    if direction not in DIRECTION_ACTIONS:
        raise ParseError(f"unknown direction action {direction!r}")
    return MetaAction(velocity, direction)


def _lead_phrase(layout: dict) -> str:
    if "lead_distance" not in layout:
        return tpl.COT_LEAD[0]
    dist = min(int(round(layout["lead_distance"])), tpl.MAX_NUMBER)
    return tpl.COT_LEAD[2 if layout.get("lead_moving") else 1].format(dist=dist)


def _road_phrase(layout: dict) -> str:
    return tpl.ROAD_PHRASES[layout["kind"]].format(lanes=layout["n_lanes"])


def _future_phrase(meta: MetaAction) -> str:
    if meta.direction == "Stop":
        return tpl.FUTURE_DIRECTION["Stop"]
    return f"{tpl.FUTURE_VELOCITY[meta.velocity]} and {tpl.FUTURE_DIRECTION[meta.direction]}"


def _past_phrase(meta: MetaAction) -> str:
    if meta.direction == "Stop":
        return tpl.PAST_DIRECTION["Stop"]
    return f"{tpl.PAST_VELOCITY[meta.velocity]} and {tpl.PAST_DIRECTION[meta.direction]}"


def cot_prefix(past_meta) -> str:
    history = ", ".join(str(m) for m in past_meta) if past_meta else tpl.COT_NO_HISTORY
    return tpl.COT_PROMPT.format(history=history)


def build_cot(scene, past_meta, target: MetaAction) -> tuple[str, str]:
    """Prompt prefix and supervised suffix for one chain-of-thought sample.

    ``scene`` is a scene graph or its ``layout`` dict.
    """
    layout = scene.layout if hasattr(scene, "layout") else scene
    scene = tpl.COT_SCENE.format(road=_road_phrase(layout), lead=_lead_phrase(layout))
    if past_meta:
        intent = tpl.COT_INTENT.format(past=_past_phrase(past_meta[-1]), future=_future_phrase(target))
    else:
        intent = tpl.COT_INTENT_NO_HISTORY.format(future=_future_phrase(target))
    meta = tpl.COT_META.format(velocity=target.velocity, direction=target.direction)
    return cot_prefix(past_meta), f"{scene} {intent} {meta}"


# -- episode annotation -----------------------------------------------------

def future_with_origin(episode) -> np.ndarray:
    origin = np.array([[0.0, 0.0, 0.0, 0.0, episode.scene.ego.speed]], dtype=np.float64)
    return np.concatenate([origin, np.asarray(episode.future_traj, dtype=np.float64)])


def past_with_origin(episode) -> np.ndarray:
    origin = np.array([[0.0, 0.0, 0.0, 0.0, episode.scene.ego.speed]], dtype=np.float64)
    return np.concatenate([np.asarray(episode.past_traj, dtype=np.float64), origin])


def annotate_episode(episode, th: Thresholds = DEFAULT_THRESHOLDS):
    """Fill ``meta`` and the chain-of-thought texts of ``episode`` in place."""
    lanes = [l.centerline for l in episode.scene.lanes if l.road == "main"]
    meta = label_trajectory(future_with_origin(episode), lanes, th)
    past = label_trajectory(past_with_origin(episode), lanes, th)
    prefix, suffix = build_cot(episode.scene, [past], meta)
    episode.meta = meta
    episode.texts["past_meta"] = [list(past)]
    episode.texts["cot_prefix"] = prefix
    episode.texts["cot"] = suffix
    return episode
