"""Synthetic driving world: scene graphs, occupancy grids, camera views, QA.

Coordinates are in the ego frame at t = 0: x forward, y left, z up, metres.
The occupancy grid covers x, y in [-16, 16) and z in [0, 8) at 1 m
resolution; voxel ``(h, w, d)`` has its centre at
``(h - 15.5, w - 15.5, d + 0.5)``.  The ground layer ``d = 0`` is road or
sidewalk everywhere.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import templates as tpl
from .errors import GenerationError
from .rng import Rng

GRID_H, GRID_W, GRID_D = 32, 32, 8
NUM_CLASSES = 8
EMPTY, ROAD, LANE_MARKING, VEHICLE, PEDESTRIAN, BUILDING, VEGETATION, SIDEWALK = range(8)
CLASS_NAMES = ("empty", "road", "lane_marking", "vehicle", "pedestrian", "building", "vegetation", "sidewalk")

HALF_EXTENT = 16.0
LANE_WIDTH = 3.5
DT = 0.5
V_MAX = 15.0
PAST_TIMES = (-2.0, -1.5, -1.0, -0.5)
FUTURE_TIMES = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)

VIEW_NAMES = ("front", "left", "right", "rear")
VIEW_YAWS = (0.0, math.pi / 2, -math.pi / 2, math.pi)
IMAGE_SIZE = 32
CAMERA_HEIGHT = 2.6
CAMERA_PITCH = math.radians(15.0)
FOCAL = IMAGE_SIZE / 2 / math.tan(math.radians(45.0))
NEAR = 0.3
SKY_LABEL = 255

CLASS_COLORS = np.array(
    [
        [0, 0, 0],
        [90, 90, 96],
        [240, 240, 240],
        [30, 80, 220],
        [230, 40, 40],
        [200, 140, 60],
        [40, 170, 60],
        [170, 170, 150],
    ],
    dtype=np.float64,
)


# -- scene graph ------------------------------------------------------------

@dataclass
class Lane:
    centerline: list[list[float]]
    width: float = LANE_WIDTH
    road: str = "main"


@dataclass
class Marking:
    polyline: list[list[float]]
    dashed: bool = True


@dataclass
class Agent:
    kind: str
    x: float
    y: float
    heading: float
    length: float
    width: float
    speed: float
    height: float = 2.0


@dataclass
class Static:
    kind: str
    x: float
    y: float
    length: float
    width: float
    height: float = 0.0


@dataclass
class EgoPose:
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0
    speed: float = 0.0


@dataclass
class SceneGraph:
    layout: dict
    lanes: list[Lane] = field(default_factory=list)
    markings: list[Marking] = field(default_factory=list)
    agents: list[Agent] = field(default_factory=list)
    statics: list[Static] = field(default_factory=list)
    ego: EgoPose = field(default_factory=EgoPose)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneGraph":
        return cls(
            layout=dict(d["layout"]),
            lanes=[Lane(**x) for x in d["lanes"]],
            markings=[Marking(**x) for x in d["markings"]],
            agents=[Agent(**x) for x in d["agents"]],
            statics=[Static(**x) for x in d["statics"]],
            ego=EgoPose(**d["ego"]),
        )

    def lane_polylines(self) -> list[np.ndarray]:
        return [np.asarray(l.centerline, dtype=np.float64) for l in self.lanes]


def mirror_scene(scene: SceneGraph) -> SceneGraph:
    """Reflect the scene across the ego x-axis (y -> -y)."""
    layout = dict(scene.layout)
    for a, b in (("road_left", "road_right"), ("curb_left", "curb_right")):
        if a in scene.layout:
            layout[a] = -scene.layout[b] if a.startswith("road") else scene.layout[b]
            layout[b] = -scene.layout[a] if a.startswith("road") else scene.layout[a]
    layout["kind"] = {"junction_left": "junction_right", "junction_right": "junction_left"}.get(
        layout["kind"], layout["kind"]
    )
    if "buildings" in layout:
        layout["buildings"] = {"left": "right", "right": "left"}.get(layout["buildings"], layout["buildings"])
    return SceneGraph(
        layout=layout,
        lanes=[Lane([[p[0], -p[1]] for p in l.centerline], l.width, l.road) for l in scene.lanes],
        markings=[Marking([[p[0], -p[1]] for p in m.polyline], m.dashed) for m in scene.markings],
        agents=[Agent(a.kind, a.x, -a.y, -a.heading, a.length, a.width, a.speed, a.height) for a in scene.agents],
        statics=[Static(s.kind, s.x, -s.y, s.length, s.width, s.height) for s in scene.statics],
        ego=EgoPose(scene.ego.x, -scene.ego.y, -scene.ego.heading, scene.ego.speed),
    )


# -- voxelization -----------------------------------------------------------

def _cell_centers() -> tuple[np.ndarray, np.ndarray]:
    h = np.arange(GRID_H, dtype=np.float64) - 15.5
    w = np.arange(GRID_W, dtype=np.float64) - 15.5
    return np.meshgrid(h, w, indexing="ij")


def _segment_distance(px, py, poly: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distance to a polyline and arc-length of the closest point."""
    best = np.full(px.shape, np.inf)
    arc = np.zeros(px.shape)
    run = 0.0
    for (ax, ay), (bx, by) in zip(poly[:-1], poly[1:]):
        ex, ey = bx - ax, by - ay
        seg2 = ex * ex + ey * ey
        dx, dy = px - ax, py - ay
        t = np.clip((dx * ex + dy * ey) / seg2, 0.0, 1.0)
        qx, qy = dx - t * ex, dy - t * ey
        dist = np.sqrt(qx * qx + qy * qy)
        better = dist < best
        best = np.where(better, dist, best)
        arc = np.where(better, run + t * math.sqrt(seg2), arc)
        run += math.sqrt(seg2)
    return best, arc


def _box_mask(px, py, cx, cy, heading, length, width) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    if abs(s) < 1e-9:
        # exact axis alignment keeps mirrored footprints bit-identical
        c, s = math.copysign(1.0, c), 0.0
    dx, dy = px - cx, py - cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= length / 2) & (np.abs(v) <= width / 2)


def _voxel_of(value: float) -> int:
    return int(math.floor(value + HALF_EXTENT))


def agent_footprint(agent: Agent) -> np.ndarray:
    """Boolean BEV mask of the cells whose centres the agent covers (at least one)."""
    px, py = _cell_centers()
    mask = _box_mask(px, py, agent.x, agent.y, agent.heading, agent.length, agent.width)
    if not mask.any():
        h, w = _voxel_of(agent.x), _voxel_of(agent.y)
        if 0 <= h < GRID_H and 0 <= w < GRID_W:
            mask[h, w] = True
    return mask


def voxelize(scene: SceneGraph) -> np.ndarray:
    """Semantic occupancy grid ``uint8[32, 32, 8]`` for a scene.

    Painting order implements the priority agents > lane-marking >
    road/sidewalk > static > empty.
    """
    grid = np.zeros((GRID_H, GRID_W, GRID_D), dtype=np.uint8)
    px, py = _cell_centers()
    for s in scene.statics:
        if s.kind == "sidewalk":
            continue
        mask = _box_mask(px, py, s.x, s.y, 0.0, s.length, s.width)
        top = min(GRID_D, int(round(s.height)))
        cls = BUILDING if s.kind == "building" else VEGETATION
        grid[mask, 1:top] = cls
    ground = np.zeros((GRID_H, GRID_W), dtype=np.uint8)
    for s in scene.statics:
        if s.kind == "sidewalk":
            ground[_box_mask(px, py, s.x, s.y, 0.0, s.length, s.width)] = SIDEWALK
    for lane in scene.lanes:
        dist, _ = _segment_distance(px, py, np.asarray(lane.centerline, dtype=np.float64))
        ground[dist <= lane.width / 2] = ROAD
    for m in scene.markings:
        dist, arc = _segment_distance(px, py, np.asarray(m.polyline, dtype=np.float64))
        on = dist <= 0.5
        if m.dashed:
            on &= np.mod(arc, 4.0) < 2.0
        ground[on] = LANE_MARKING
    grid[:, :, 0] = np.where(ground > 0, ground, grid[:, :, 0])
    for a in scene.agents:
        cls = VEHICLE if a.kind == "vehicle" else PEDESTRIAN
        top = min(GRID_D, int(round(a.height)))
        grid[agent_footprint(a), 0:top] = cls
    return grid


# -- rendering --------------------------------------------------------------

def _surface_points(grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample points on the exposed surfaces of occupied voxels."""
    pts, labels = [], []
    sub = np.array([0.125, 0.375, 0.625, 0.875])
    occ = grid > 0
    h, w, d = np.nonzero(occ)
    cls = grid[h, w, d]
    base = np.stack([h - 16.0, w - 16.0, d.astype(np.float64)], axis=1)
    padded = np.pad(occ, 1)
    faces = [
        (2, 1, np.array([0, 0, 1.0])),
        (0, 1, np.array([1.0, 0, 0])),
        (0, -1, np.array([0, 0, 0.0])),
        (1, 1, np.array([0, 1.0, 0])),
        (1, -1, np.array([0, 0, 0.0])),
    ]
    for axis, sign, offset in faces:
        nb = [h + 1, w + 1, d + 1]
        nb[axis] = nb[axis] + sign
        exposed = ~padded[nb[0], nb[1], nb[2]]
        if not exposed.any():
            continue
        others = [i for i in range(3) if i != axis]
        for a in sub:
            for b in sub:
                p = base[exposed].copy()
                p[:, axis] += offset[axis]
                p[:, others[0]] += a
                p[:, others[1]] += b
                pts.append(p)
                labels.append(cls[exposed])
    if not pts:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.uint8)
    return np.concatenate(pts), np.concatenate(labels)


def camera_basis(yaw: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cp, sp = math.cos(CAMERA_PITCH), math.sin(CAMERA_PITCH)
    fwd = np.array([math.cos(yaw) * cp, math.sin(yaw) * cp, -sp])
    right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
    up = np.cross(right, fwd)
    return fwd, right, up


def project(points: np.ndarray, yaw: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pixel column, row and depth of ``points`` in the camera with ``yaw``."""
    fwd, right, up = camera_basis(yaw)
    rel = points - np.array([0.0, 0.0, CAMERA_HEIGHT])
    depth = rel @ fwd
    safe = np.where(depth > NEAR, depth, 1.0)
    u = IMAGE_SIZE / 2 + FOCAL * (rel @ right) / safe
    v = IMAGE_SIZE / 2 - FOCAL * (rel @ up) / safe
    return u, v, depth


def rasterize_views(scene: SceneGraph, grid: np.ndarray | None = None, return_labels: bool = False):
    """Point-splat render of the four cameras; ``uint8[4, 32, 32, 3]``.

    Nearer splats overwrite farther ones.  Pixels hit by no splat show a sky
    gradient.  With ``return_labels`` the per-pixel class map (255 = sky) is
    returned as well.
    """
    if grid is None:
        grid = voxelize(scene)
    points, labels = _surface_points(grid)
    views = np.zeros((len(VIEW_YAWS), IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    label_maps = np.full((len(VIEW_YAWS), IMAGE_SIZE, IMAGE_SIZE), SKY_LABEL, dtype=np.uint8)
    rows = np.arange(IMAGE_SIZE, dtype=np.float64)[:, None]
    sky = np.stack([120 + 2.0 * rows, 170 + 1.5 * rows, 235 + 0.5 * rows], axis=-1)
    sky = np.broadcast_to(np.clip(sky, 0, 255), (IMAGE_SIZE, IMAGE_SIZE, 3))
    for vi, yaw in enumerate(VIEW_YAWS):
        img = sky.copy()
        u, v, depth = project(points, yaw)
        margin = 3.0
        ok = (depth > NEAR) & (u >= -margin) & (u < IMAGE_SIZE + margin) & (v >= -margin) & (v < IMAGE_SIZE + margin)
        if ok.any():
            dep, lab = depth[ok], labels[ok]
            # each sample covers a quarter-metre patch, so near splats span several pixels
            size = np.maximum(1, np.ceil(FOCAL * 0.25 / dep)).astype(np.int64)
            pix_parts, idx_parts = [], []
            base_idx = np.arange(dep.size)
            for sz in np.unique(size):
                m = size == sz
                u0 = np.floor(u[ok][m] - (sz - 1) / 2).astype(np.int64)
                v0 = np.floor(v[ok][m] - (sz - 1) / 2).astype(np.int64)
                for du in range(sz):
                    for dv in range(sz):
                        uu, vv = u0 + du, v0 + dv
                        inside = (uu >= 0) & (uu < IMAGE_SIZE) & (vv >= 0) & (vv < IMAGE_SIZE)
                        pix_parts.append(vv[inside] * IMAGE_SIZE + uu[inside])
                        idx_parts.append(base_idx[m][inside])
            pix = np.concatenate(pix_parts)
            idx = np.concatenate(idx_parts)
            order = np.lexsort((lab[idx], dep[idx], pix))
            pix_sorted = pix[order]
            first = np.ones(order.size, dtype=bool)
            first[1:] = pix_sorted[1:] != pix_sorted[:-1]
            sel_pix = pix_sorted[first]
            sel = idx[order[first]]
            shade = 1.0 / (1.0 + 0.04 * dep[sel])
            color = CLASS_COLORS[lab[sel]] * (0.45 + 0.55 * shade)[:, None]
            img.reshape(-1, 3)[sel_pix] = color
            label_maps[vi].reshape(-1)[sel_pix] = lab[sel]
        views[vi] = np.clip(np.round(img), 0, 255).astype(np.uint8)
    if return_labels:
        return views, label_maps
    return views


# -- question answering -----------------------------------------------------

@dataclass
class QAItem:
    question: str
    answer: str
    category: str
    hop: str


def _in_region(a: Agent, region: str) -> bool:
    return {
        "to the left": a.y > 0,
        "to the right": a.y < 0,
        "in front": a.x > 0,
        "behind": a.x < 0,
    }[region]


def _closest(agents: list[Agent]) -> Agent | None:
    if not agents:
        return None
    return min(agents, key=lambda a: (math.hypot(a.x, a.y), a.kind, a.x, a.y))


def answer_question(scene: SceneGraph, category: str, hop: str, kind: str = "vehicle", region: str = "in front") -> str:
    agents = scene.agents
    if category == "exist":
        pool = [a for a in agents if a.kind == kind and (hop == "h0" or _in_region(a, region))]
        return "yes" if pool else "no"
    if category == "count":
        pool = [a for a in agents if a.kind == kind and (hop == "h0" or _in_region(a, region))]
        return str(min(len(pool), tpl.MAX_NUMBER))
    if category == "object":
        pool = agents if hop == "h0" else [a for a in agents if _in_region(a, region)]
        c = _closest(pool)
        return "nothing" if c is None else c.kind
    if category == "status":
        pool = [a for a in agents if a.kind == "vehicle" and (hop == "h0" or _in_region(a, region))]
        c = _closest(pool)
        if c is None:
            return "none"
        return "moving" if c.speed > 0 else "parked"
    if category == "comparison":
        if hop == "h0":
            nv = sum(a.kind == "vehicle" for a in agents)
            npd = sum(a.kind == "pedestrian" for a in agents)
            return "yes" if nv > npd else "no"
        left = _closest([a for a in agents if a.kind == "vehicle" and a.y > 0])
        right = _closest([a for a in agents if a.kind == "vehicle" and a.y < 0])
        if left is None and right is None:
            return "none"
        if right is None:
            return "left"
        if left is None:
            return "right"
        dl, dr = math.hypot(left.x, left.y), math.hypot(right.x, right.y)
        return "same" if dl == dr else ("left" if dl < dr else "right")
    raise ValueError(f"unknown QA category {category!r}")


def generate_qa(scene: SceneGraph, seed: int) -> list[QAItem]:
    """One templated question per (category, hop), answered from the scene graph."""
    rng = Rng(seed).child("qa")
    items = []
    for (category, hop), pattern in tpl.QA_QUESTIONS.items():
        kind = tpl.QA_KINDS[int(rng.integers(0, len(tpl.QA_KINDS)))]
        region = tpl.QA_REGIONS[int(rng.integers(0, len(tpl.QA_REGIONS)))]
        question = pattern.format(kind=kind, kinds=tpl.QA_KINDS_PLURAL[kind], region=tpl.QA_REGION_PHRASES[region])
        answer = answer_question(scene, category, hop, kind, region)
        items.append(QAItem(question, answer, category, hop))
    return items


def road_phrase(scene: SceneGraph) -> str:
    layout = scene.layout
    return tpl.ROAD_PHRASES[layout["kind"]].format(lanes=layout["n_lanes"])


def caption(scene: SceneGraph) -> str:
    nv = sum(a.kind == "vehicle" for a in scene.agents)
    npd = sum(a.kind == "pedestrian" for a in scene.agents)
    sides = scene.layout.get("buildings", "none")
    phrase = {"none": 0, "left": 1, "right": 2, "both": 3}[sides]
    return tpl.CAPTION.format(
        road=road_phrase(scene),
        be_v="is" if nv == 1 else "are",
        n_vehicles=min(nv, tpl.MAX_NUMBER),
        vehicle_word="vehicle" if nv == 1 else "vehicles",
        n_peds=min(npd, tpl.MAX_NUMBER),
        ped_word="pedestrian" if npd == 1 else "pedestrians",
        buildings=tpl.BUILDING_PHRASES[phrase],
    )


# -- generation -------------------------------------------------------------

@dataclass
class GenConfig:
    min_vehicles: int = 0
    max_vehicles: int = 5
    min_pedestrians: int = 0
    max_pedestrians: int = 4
    p_intersection: float = 0.4
    p_lead_vehicle: float = 0.4
    p_buildings: float = 0.7
    world_extent: float = 32.0
    max_retries: int = 60

    def validate(self) -> None:
        if self.world_extent != 2 * HALF_EXTENT:
            raise ValueError(f"world_extent must be {2 * HALF_EXTENT} to match the occupancy grid")
        if not (0 <= self.min_vehicles <= self.max_vehicles and 0 <= self.min_pedestrians <= self.max_pedestrians):
            raise ValueError("agent-count ranges must satisfy 0 <= min <= max")
        for p in (self.p_intersection, self.p_lead_vehicle, self.p_buildings):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Episode:
    id: int
    scene: SceneGraph
    views: np.ndarray
    grid: np.ndarray
    past_traj: np.ndarray
    future_traj: np.ndarray
    intent: str
    meta: object = None
    texts: dict = field(default_factory=dict)


def _round(x: float) -> float:
    # quantise continuous draws to 1/64 m so every value is exact in float32 and JSON
    return float(np.round(x * 64.0) / 64.0)


def cross_sides(layout: dict) -> tuple[str, ...]:
    """Sides of the main road on which a crossing road is present."""
    return {
        "straight": (),
        "intersection": ("left", "right"),
        "junction_left": ("left",),
        "junction_right": ("right",),
    }[layout["kind"]]


def _build_layout(rng: Rng, cfg: GenConfig) -> SceneGraph:
    n_fwd = int(rng.integers(1, 3))
    n_back = int(rng.integers(1, 3))
    ego_lane = int(rng.integers(0, n_fwd))
    kind = "straight"
    if rng.uniform() < cfg.p_intersection:
        kind = ("intersection", "junction_left", "junction_right")[int(rng.integers(0, 3))]
    lanes, markings = [], []
    offsets = [(i - ego_lane) * LANE_WIDTH for i in range(n_fwd + n_back)]
    road_right = offsets[0] - LANE_WIDTH / 2
    road_left = offsets[-1] + LANE_WIDTH / 2
    ext = HALF_EXTENT + 4.0
    for i, y in enumerate(offsets):
        line = [[-ext, y], [ext, y]] if i < n_fwd else [[ext, y], [-ext, y]]
        lanes.append(Lane(line, LANE_WIDTH, "main"))
    layout = {
        "kind": kind,
        "n_fwd": n_fwd,
        "n_back": n_back,
        "n_lanes": n_fwd + n_back,
        "ego_lane": ego_lane,
        "road_left": road_left,
        "road_right": road_right,
    }
    cross_lo = cross_hi = None
    if kind != "straight":
        xc = _round(rng.uniform(None, 9.0, 13.0))
        layout["cross_x"] = xc
        cross_lo, cross_hi = xc - LANE_WIDTH, xc + LANE_WIDTH
        sides = cross_sides(layout)
        y_lo = -ext if "right" in sides else road_right
        y_hi = ext if "left" in sides else road_left
        lanes.append(Lane([[xc - LANE_WIDTH / 2, y_lo], [xc - LANE_WIDTH / 2, y_hi]], LANE_WIDTH, "cross"))
        lanes.append(Lane([[xc + LANE_WIDTH / 2, y_hi], [xc + LANE_WIDTH / 2, y_lo]], LANE_WIDTH, "cross"))
        if "right" in sides:
            markings.append(Marking([[xc, -ext], [xc, road_right - 1.0]], dashed=False))
        if "left" in sides:
            markings.append(Marking([[xc, road_left + 1.0], [xc, ext]], dashed=False))
    for i in range(len(offsets) - 1):
        y = (offsets[i] + offsets[i + 1]) / 2
        dashed = i != n_fwd - 1
        spans = [(-ext, ext)] if cross_lo is None else [(-ext, cross_lo - 1.0), (cross_hi + 1.0, ext)]
        for x0, x1 in spans:
            markings.append(Marking([[x0, y], [x1, y]], dashed=dashed))
    return SceneGraph(layout=layout, lanes=lanes, markings=markings)


def _add_statics(rng: Rng, cfg: GenConfig, scene: SceneGraph) -> None:
    lay = scene.layout
    ext = HALF_EXTENT
    # sidewalk ground fills everything off the road
    scene.statics.append(Static("sidewalk", 0.0, (lay["road_left"] + ext) / 2, 2 * ext, ext - lay["road_left"]))
    scene.statics.append(Static("sidewalk", 0.0, (lay["road_right"] - ext) / 2, 2 * ext, lay["road_right"] + ext))
    sides = []
    for side, edge in (("left", lay["road_left"]), ("right", lay["road_right"])):
        has_cross = side in cross_sides(lay)
        curb = _round(rng.uniform(None, 2.0, 4.0))
        lay[f"curb_{side}"] = curb
        inner = edge + curb if side == "left" else edge - curb
        if abs(inner) >= ext - 1.0:
            continue
        if rng.uniform() < cfg.p_buildings:
            sides.append(side)
            x = -ext
            while x < ext - 2.0:
                length = _round(rng.uniform(None, 4.0, 10.0))
                x1 = min(x + length, ext)
                if has_cross:
                    lo, hi = lay["cross_x"] - LANE_WIDTH - 1.0, lay["cross_x"] + LANE_WIDTH + 1.0
                    if x1 > lo and x < hi:
                        x = hi
                        continue
                depth = min(ext - abs(inner), 6.0)
                cy = inner + depth / 2 if side == "left" else inner - depth / 2
                height = float(rng.integers(3, 7))
                scene.statics.append(Static("building", (x + x1) / 2, cy, x1 - x, depth, height))
                x = x1 + _round(rng.uniform(None, 1.0, 4.0))
        n_trees = int(rng.integers(0, 4))
        for _ in range(n_trees):
            tx = _round(rng.uniform(None, -ext + 2, ext - 2))
            offset = _round(rng.uniform(None, 1.0, max(1.0, curb - 1.0)))
            ty = edge + offset if side == "left" else edge - offset
            if has_cross and abs(tx - lay["cross_x"]) < LANE_WIDTH + 2:
                continue
            scene.statics.append(Static("vegetation", tx, ty, 2.0, 2.0, float(rng.integers(3, 6))))
    lay["buildings"] = {0: "none", 1: sides[0] if sides else "none", 2: "both"}[len(sides)]


def _free(candidate: Agent, placed: list[Agent], margin: float = 1.0) -> bool:
    for a in placed:
        if abs(candidate.x - a.x) < (candidate.length + a.length) / 2 + margin and abs(candidate.y - a.y) < (
            candidate.width + a.width
        ) / 2 + margin:
            return False
    return True


def _add_agents(rng: Rng, cfg: GenConfig, scene: SceneGraph, seed: int) -> Agent | None:
    lay = scene.layout
    ego_box = Agent("vehicle", 0.0, 0.0, 0.0, 4.6, 2.0, 0.0)
    placed: list[Agent] = [ego_box]
    lead = None
    main_lanes = [l for l in scene.lanes if l.road == "main"]
    if cfg.max_vehicles > 0 and rng.uniform() < cfg.p_lead_vehicle:
        dist = _round(rng.uniform(None, 7.0, 14.0))
        if "cross_x" in lay:
            dist = min(dist, lay["cross_x"] - LANE_WIDTH - 3.0)
        moving = rng.uniform() < 0.4
        speed = _round(rng.uniform(None, 2.0, 8.0)) if moving else 0.0
        if dist >= 6.0:
            lead = Agent("vehicle", dist, 0.0, 0.0, 4.0, 2.0, speed)
            placed.append(lead)
    # counts above the configured minimum are best effort; only the minimum
    # is a hard requirement
    n_veh = int(rng.integers(cfg.min_vehicles, cfg.max_vehicles + 1)) - (lead is not None)
    for i in range(max(n_veh, 0)):
        for _attempt in range(cfg.max_retries):
            lane = main_lanes[int(rng.integers(0, len(main_lanes)))]
            y = lane.centerline[0][1]
            forward = lane.centerline[0][0] < lane.centerline[1][0]
            x = _round(rng.uniform(None, -14.0, 14.0))
            if "cross_x" in lay and abs(x - lay["cross_x"]) < LANE_WIDTH + 2.5:
                continue
            parked = rng.uniform() < 0.3
            speed = 0.0 if parked else _round(rng.uniform(None, 3.0, 12.0))
            cand = Agent("vehicle", x, y, 0.0 if forward else math.pi, 4.0, 2.0, speed)
            if _free(cand, placed):
                placed.append(cand)
                break
        else:
            if i + (lead is not None) < cfg.min_vehicles:
                raise GenerationError(f"could not place vehicle after {cfg.max_retries} attempts (seed={seed})")
    n_ped = int(rng.integers(cfg.min_pedestrians, cfg.max_pedestrians + 1))
    for i in range(n_ped):
        for _attempt in range(cfg.max_retries):
            x = _round(rng.uniform(None, -14.5, 14.5))
            side = rng.uniform() < 0.5
            curb = lay["curb_left"] if side else lay["curb_right"]
            gap = _round(rng.uniform(None, 0.6, min(2.5, curb - 0.6)))
            y = lay["road_left"] + gap if side else lay["road_right"] - gap
            if "cross_x" in lay and rng.uniform() < 0.3:
                x = lay["cross_x"] + _round(rng.uniform(None, -2.5, 2.5))
                y = _round(rng.uniform(None, lay["road_right"] - 1.5, lay["road_left"] + 1.5))
            if abs(y) > HALF_EXTENT - 1.0:
                continue
            speed = 0.0 if rng.uniform() < 0.5 else _round(rng.uniform(None, 0.8, 1.6))
            cand = Agent("pedestrian", x, y, 0.0, 1.0, 1.0, speed)
            if _free(cand, placed, margin=0.3):
                placed.append(cand)
                break
        else:
            if i < cfg.min_pedestrians:
                raise GenerationError(f"could not place pedestrian after {cfg.max_retries} attempts (seed={seed})")
    scene.agents = placed[1:]
    return lead


def _choose_intent(rng: Rng, scene: SceneGraph, lead: Agent | None) -> str:
    lay = scene.layout
    can_left = lay["ego_lane"] < lay["n_fwd"] - 1
    can_right = lay["ego_lane"] > 0
    lane_changes = (["change_left"] if can_left else []) + (["change_right"] if can_right else [])
    if lead is not None and lead.speed == 0.0:
        options = ["stop", "stop", "decel"] + lane_changes * 2
    elif lead is not None:
        options = ["decel", "cruise"] + lane_changes
    elif lay["kind"] == "intersection":
        options = ["turn_left", "turn_right", "straight", "decel"]
    elif lay["kind"] == "junction_left":
        options = ["turn_left", "turn_left", "straight"]
    elif lay["kind"] == "junction_right":
        options = ["turn_right", "turn_right", "straight"]
    else:
        options = ["cruise", "accel", "decel"] + lane_changes
    return options[int(rng.integers(0, len(options)))]


def _past_profile(rng: Rng, intent: str) -> float:
    """Past longitudinal acceleration, correlated with the future intent."""
    if intent == "stop":
        return _round(rng.uniform(None, 1.5, 3.0)) * -1.0
    trend = {"accel": 1, "decel": -1}.get(intent, 0)
    if rng.uniform() >= 0.6:
        trend = int(rng.integers(-1, 2))
    if trend > 0:
        return _round(rng.uniform(None, 0.8, 1.6))
    if trend < 0:
        return -_round(rng.uniform(None, 0.8, 1.6))
    return _round(rng.uniform(None, -0.15, 0.15))


def _past_distance(v0: float, a: float, t: float) -> float:
    """Distance covered over [t, 0] (t < 0) with speed max(v0 + a*s, 0)."""
    if a > 0 and t < -v0 / a:
        return v0 * v0 / (2 * a)
    return -v0 * t - a * t * t / 2


def _simulate(rng: Rng, intent: str) -> tuple[np.ndarray, np.ndarray, float]:
    if intent == "stop":
        v0 = 0.0 if rng.uniform() < 0.6 else 0.125
    elif intent == "accel":
        v0 = _round(rng.uniform(None, 2.0, 7.0))
    elif intent == "decel":
        v0 = _round(rng.uniform(None, 6.0, 11.0))
    else:
        v0 = _round(rng.uniform(None, 4.0, 10.0))
    a_past = _past_profile(rng, intent)
    if intent == "stop":
        a_future = -0.04
    elif intent == "accel":
        a_future = _round(rng.uniform(None, 0.9, 2.0))
    elif intent == "decel":
        a_future = -_round(rng.uniform(None, 0.9, min(3.0, v0 / 3.0 + 0.9)))
    else:
        a_future = _round(rng.uniform(None, -0.2, 0.2))

    past = [(t, -_past_distance(v0, a_past, t), 0.0, 0.0, max(v0 + a_past * t, 0.0)) for t in PAST_TIMES]

    turn_sign = {"turn_left": 1.0, "turn_right": -1.0}.get(intent, 0.0)
    lane_sign = {"change_left": 1.0, "change_right": -1.0}.get(intent, 0.0)
    radius = _round(rng.uniform(None, 5.0, 9.0))
    t_turn = _round(rng.uniform(None, 0.0, 0.8))
    fine_dt = 0.025
    per_sample = int(round(DT / fine_dt))
    x = y = heading = 0.0
    out = []
    for k in range(1, int(round(FUTURE_TIMES[-1] / fine_dt)) + 1):
        t = k * fine_dt
        v = max(v0 + a_future * t, 0.0)
        if lane_sign:
            # smoothstep lateral shift of one lane width over the horizon
            s = t / FUTURE_TIMES[-1]
            y_new = lane_sign * LANE_WIDTH * (3 * s * s - 2 * s * s * s)
            heading = math.atan2(y_new - y, max(v * fine_dt, 1e-6))
            x += v * fine_dt
            y = y_new
        else:
            if turn_sign and t > t_turn:
                heading += turn_sign * max(v, 2.0) / radius * fine_dt
                heading = max(-math.pi / 2, min(math.pi / 2, heading))
            x += v * math.cos(heading) * fine_dt
            y += v * math.sin(heading) * fine_dt
        if k % per_sample == 0:
            out.append((k // per_sample * DT, x, y, heading, v))
    if lane_sign:
        t, x_, y_, _, v_ = out[-1]
        out[-1] = (t, x_, y_, 0.0, v_)
    return np.asarray(past, dtype=np.float32), np.asarray(out, dtype=np.float32), v0


def generate_episode(seed: int, cfg: GenConfig | None = None, episode_id: int | None = None) -> Episode:
    """Deterministically build one episode from ``seed``.

    ``meta`` and the chain-of-thought text are left empty; they are filled by
    the annotation pipeline.
    """
    cfg = cfg or GenConfig()
    cfg.validate()
    rng = Rng(seed).child("episode")
    scene = _build_layout(rng.child("layout"), cfg)
    _add_statics(rng.child("statics"), cfg, scene)
    lead = _add_agents(rng.child("agents"), cfg, scene, seed)
    intent = _choose_intent(rng.child("intent"), scene, lead)
    past, future, v0 = _simulate(rng.child("ego"), intent)
    scene.ego = EgoPose(0.0, 0.0, 0.0, float(np.float32(v0)))
    if lead is not None:
        scene.layout["lead_distance"] = lead.x
        scene.layout["lead_moving"] = lead.speed > 0
    grid = voxelize(scene)
    views = rasterize_views(scene, grid)
    qa = generate_qa(scene, seed)
    texts = {"caption": caption(scene), "qa": [asdict(q) for q in qa]}
    return Episode(
        id=int(seed if episode_id is None else episode_id),
        scene=scene,
        views=views,
        grid=grid,
        past_traj=past,
        future_traj=future,
        intent=intent,
        texts=texts,
    )


def current_pose() -> np.ndarray:
    return np.zeros((1, 5), dtype=np.float32)


def empty_scene(n_fwd: int = 1, n_back: int = 1) -> SceneGraph:
    """A straight road with sidewalks and nothing else; handy for probes."""
    scene = SceneGraph(layout={})
    offsets = [i * LANE_WIDTH for i in range(n_fwd + n_back)]
    ext = HALF_EXTENT + 4.0
    scene.lanes = [
        Lane([[-ext, y], [ext, y]] if i < n_fwd else [[ext, y], [-ext, y]], LANE_WIDTH, "main")
        for i, y in enumerate(offsets)
    ]
    scene.markings = [
        Marking([[-ext, (a + b) / 2], [ext, (a + b) / 2]], dashed=i != n_fwd - 1)
        for i, (a, b) in enumerate(zip(offsets[:-1], offsets[1:]))
    ]
    scene.layout = {
        "kind": "straight",
        "n_fwd": n_fwd,
        "n_back": n_back,
        "n_lanes": n_fwd + n_back,
        "ego_lane": 0,
        "road_left": offsets[-1] + LANE_WIDTH / 2,
        "road_right": -LANE_WIDTH / 2,
        "curb_left": 3.0,
        "curb_right": 3.0,
        "buildings": "none",
    }
    lay = scene.layout
    scene.statics = [
        Static("sidewalk", 0.0, (lay["road_left"] + HALF_EXTENT) / 2, 2 * HALF_EXTENT, HALF_EXTENT - lay["road_left"]),
        Static("sidewalk", 0.0, (lay["road_right"] - HALF_EXTENT) / 2, 2 * HALF_EXTENT, lay["road_right"] + HALF_EXTENT),
    ]
    return scene
