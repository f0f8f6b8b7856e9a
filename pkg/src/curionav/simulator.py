"""Deterministic 2.5D indoor world.

Scenes are axis-aligned wall segments (vertical, floor to ``height``),
cylindrical objects, and labeled room rectangles on a flat floor at z=0
inside rectangular bounds. Rendering is a closed-form per-pixel raycast,
so identical (scene, pose, camera) inputs give bit-identical output.

Scene bounds behave as full-height walls for both rendering and motion:
nothing escapes [0, bx] x [0, by].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .geometry import (CameraModel, GridSpec, Pose, angle_diff, camera_rays,
                       wrap_pi)

DEFAULT_WALL_HEIGHT = 3.0
DEFAULT_MAX_RANGE = 10.0
GEODESIC_RESOLUTION = 0.1
_EPS = 1e-9


class SceneError(ValueError):
    """Scene or episode file violates the schema; message names file and field."""


@dataclass(frozen=True)
class WallSegment:
    """Vertical axis-aligned wall from floor to ``height``."""

    x0: float
    y0: float
    x1: float
    y1: float
    height: float = DEFAULT_WALL_HEIGHT

    @property
    def a(self) -> np.ndarray:
        return np.array([self.x0, self.y0])

    @property
    def b(self) -> np.ndarray:
        return np.array([self.x1, self.y1])


@dataclass(frozen=True)
class SceneObject:
    """Solid cylinder standing on the floor."""

    category: str
    x: float
    y: float
    radius: float
    height: float

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Room:
    label: str
    x0: float
    y0: float
    x1: float
    y1: float

    def contains(self, x: float, y: float) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1


@dataclass(frozen=True)
class AgentBody:
    """Cylindrical embodiment; the camera sits at ``camera_height``."""

    radius: float = 0.18
    height: float = 0.88
    camera_height: float = 0.88

    def __post_init__(self):
        if self.radius <= 0.0:
            raise ValueError("body radius must be positive")


@dataclass
class Observation:
    """Range image plus per-pixel semantic category id (0 = free space/wall)."""

    depth: np.ndarray
    semantic: np.ndarray


@dataclass
class Scene:
    bounds: tuple[float, float]
    walls: list[WallSegment] = field(default_factory=list)
    objects: list[SceneObject] = field(default_factory=list)
    rooms: list[Room] = field(default_factory=list)
    name: str = "scene"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def category_ids(self) -> dict[str, int]:
        """Stable category -> semantic id (>= 1) mapping; 0 is free space/wall."""
        cats = sorted({o.category for o in self.objects})
        return {c: i + 1 for i, c in enumerate(cats)}

    @property
    def diameter(self) -> float:
        return math.hypot(*self.bounds)

    def boundary_walls(self) -> list[WallSegment]:
        bx, by = self.bounds
        return [WallSegment(0, 0, bx, 0), WallSegment(bx, 0, bx, by),
                WallSegment(bx, by, 0, by), WallSegment(0, by, 0, 0)]

    def collision_segments(self) -> list[WallSegment]:
        return list(self.walls) + self.boundary_walls()

    def in_bounds(self, x: float, y: float) -> bool:
        return 0.0 <= x <= self.bounds[0] and 0.0 <= y <= self.bounds[1]

    def room_label_at(self, x: float, y: float) -> str | None:
        for room in self.rooms:
            if room.contains(x, y):
                return room.label
        return None

    def instances_of(self, category: str) -> list[SceneObject]:
        return [o for o in self.objects if o.category == category]


@dataclass
class Episode:
    scene: Scene
    start: Pose
    goal_category: str
    seed: int = 0
    max_steps: int = 40
    name: str = "episode"
    scene_path: str | None = None

    @property
    def goal_instances(self) -> list[SceneObject]:
        return self.scene.instances_of(self.goal_category)


# ---------------------------------------------------------------------------
# Scene / episode files (schema 1)

def scene_to_dict(scene: Scene) -> dict:
    return {
        "schema": 1,
        "bounds": list(scene.bounds),
        "walls": [{"from": [w.x0, w.y0], "to": [w.x1, w.y1], "height": w.height}
                  for w in scene.walls],
        "objects": [{"category": o.category, "position": [o.x, o.y],
                     "radius": o.radius, "height": o.height}
                    for o in scene.objects],
        "rooms": [{"label": r.label, "rect": [r.x0, r.y0, r.x1, r.y1]}
                  for r in scene.rooms],
    }


def save_scene(scene: Scene, path) -> None:
    with open(path, "w") as fh:
        json.dump(scene_to_dict(scene), fh, indent=1)


def load_scene(path) -> Scene:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise SceneError(f"{path}: unreadable scene file ({exc})") from exc
    return scene_from_dict(doc, str(path))


def scene_from_dict(doc: dict, src: str = "<scene>") -> Scene:
    if doc.get("schema") != 1:
        raise SceneError(f"{src}: field 'schema' must be 1")
    try:
        bx, by = (float(v) for v in doc["bounds"])
    except (KeyError, TypeError, ValueError):
        raise SceneError(f"{src}: field 'bounds' must be [x, y] meters") from None
    if bx <= 0 or by <= 0:
        raise SceneError(f"{src}: field 'bounds' must be positive")
    walls = []
    for i, w in enumerate(doc.get("walls", [])):
        try:
            (x0, y0), (x1, y1) = w["from"], w["to"]
            seg = WallSegment(float(x0), float(y0), float(x1), float(y1),
                              float(w.get("height", DEFAULT_WALL_HEIGHT)))
        except (KeyError, TypeError, ValueError):
            raise SceneError(f"{src}: field 'walls[{i}]' malformed") from None
        if not (seg.x0 == seg.x1 or seg.y0 == seg.y1):
            raise SceneError(f"{src}: field 'walls[{i}]' must be axis-aligned")
        if seg.height <= 0:
            raise SceneError(f"{src}: field 'walls[{i}].height' must be > 0")
        walls.append(seg)
    objects = []
    for i, o in enumerate(doc.get("objects", [])):
        try:
            obj = SceneObject(str(o["category"]), float(o["position"][0]),
                              float(o["position"][1]), float(o["radius"]),
                              float(o["height"]))
        except (KeyError, TypeError, ValueError, IndexError):
            raise SceneError(f"{src}: field 'objects[{i}]' malformed") from None
        if obj.radius <= 0 or obj.height <= 0:
            raise SceneError(f"{src}: field 'objects[{i}]' needs positive radius/height")
        objects.append(obj)
    rooms = []
    for i, r in enumerate(doc.get("rooms", [])):
        try:
            rooms.append(Room(str(r["label"]), *(float(v) for v in r["rect"])))
        except (KeyError, TypeError, ValueError):
            raise SceneError(f"{src}: field 'rooms[{i}]' malformed") from None
    scene = Scene((bx, by), walls, objects, rooms, name=src)
    _validate_scene_geometry(scene, src)
    return scene


def _validate_scene_geometry(scene: Scene, src: str) -> None:
    bx, by = scene.bounds
    for i, w in enumerate(scene.walls):
        for x, y in ((w.x0, w.y0), (w.x1, w.y1)):
            if not (-_EPS <= x <= bx + _EPS and -_EPS <= y <= by + _EPS):
                raise SceneError(f"{src}: field 'walls[{i}]' outside bounds")
    for i, o in enumerate(scene.objects):
        if not (o.radius <= o.x <= bx - o.radius and o.radius <= o.y <= by - o.radius):
            raise SceneError(f"{src}: field 'objects[{i}]' outside bounds")
        for j, w in enumerate(scene.walls):
            if _point_segment_distance(o.center, w.a, w.b) < o.radius - _EPS:
                raise SceneError(
                    f"{src}: field 'objects[{i}]' footprint intersects walls[{j}]")


def load_episode(path, scene: Scene | None = None) -> Episode:
    import os
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise SceneError(f"{path}: unreadable episode file ({exc})") from exc
    for key in ("scene", "start", "goal_category"):
        if key not in doc:
            raise SceneError(f"{path}: field '{key}' missing")
    scene_path = os.path.normpath(
        os.path.join(os.path.dirname(str(path)), doc["scene"]))
    if scene is None:
        scene = load_scene(scene_path)
    try:
        s = doc["start"]
        start = Pose(float(s["x"]), float(s["y"]),
                     float(s.get("z", AgentBody().camera_height)),
                     float(s["yaw"]))
    except (KeyError, TypeError, ValueError):
        raise SceneError(f"{path}: field 'start' must have x, y, yaw") from None
    episode = Episode(scene, start, str(doc["goal_category"]),
                      int(doc.get("seed", 0)), int(doc.get("max_steps", 40)),
                      name=str(path), scene_path=scene_path)
    if not episode.goal_instances:
        raise SceneError(
            f"{path}: field 'goal_category' ({episode.goal_category}) "
            f"has no instance in scene")
    return episode


# ---------------------------------------------------------------------------
# Rendering

def render(scene: Scene, pose: Pose, cam: CameraModel,
           max_range: float = DEFAULT_MAX_RANGE) -> Observation:
    """Raycast an observation. Depth is range along each pixel ray; pixels
    with no hit within ``max_range`` are +inf with semantic id 0."""
    if not scene.in_bounds(pose.x, pose.y):
        raise ValueError(f"pose ({pose.x:.2f}, {pose.y:.2f}) outside scene bounds")
    rays = camera_rays(cam)
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    dx = c * rays[..., 0] - s * rays[..., 1]
    dy = s * rays[..., 0] + c * rays[..., 1]
    dz = rays[..., 2]
    ox, oy, oz = pose.x, pose.y, pose.z

    t = np.full(dx.shape, np.inf)
    sem = np.zeros(dx.shape, dtype=np.uint8)

    with np.errstate(divide="ignore", invalid="ignore"):
        # Floor plane z=0 (id 0); only within bounds.
        down = dz < -_EPS
        tf = np.where(down, -oz / dz, np.inf)
        fx = ox + tf * dx
        fy = oy + tf * dy
        hit = down & (fx >= 0) & (fx <= scene.bounds[0]) \
            & (fy >= 0) & (fy <= scene.bounds[1])
        np.copyto(t, tf, where=hit & (tf < t))

        half = cam.max_bearing() + math.radians(5.0)
        cat_ids = scene.category_ids
        for seg in _cull_segments(scene.collision_segments(),
                                  pose, half, max_range):
            _raycast_wall(seg, ox, oy, oz, dx, dy, dz, t)
        for obj in _cull_objects(scene.objects, pose, half, max_range):
            _raycast_cylinder(obj, cat_ids[obj.category],
                              ox, oy, oz, dx, dy, dz, t, sem)

    far = t > max_range
    t[far] = np.inf
    sem[far] = 0
    return Observation(depth=t, semantic=sem)


def _raycast_wall(seg: WallSegment, ox, oy, oz, dx, dy, dz, t) -> None:
    if seg.x0 == seg.x1:  # vertical in plan: constant x
        denom, offset = dx, seg.x0 - ox
        lo, hi = sorted((seg.y0, seg.y1))
        other_o, other_d = oy, dy
    else:
        denom, offset = dy, seg.y0 - oy
        lo, hi = sorted((seg.x0, seg.x1))
        other_o, other_d = ox, dx
    tw = np.where(np.abs(denom) > _EPS, offset / np.where(denom == 0, 1.0, denom),
                  np.inf)
    span = other_o + tw * other_d
    zhit = oz + tw * dz
    hit = (np.abs(denom) > _EPS) & (tw > _EPS) & (span >= lo) & (span <= hi) \
        & (zhit >= 0.0) & (zhit <= seg.height) & (tw < t)
    np.copyto(t, tw, where=hit)  # walls keep semantic id 0


def _raycast_cylinder(obj: SceneObject, sem_id, ox, oy, oz, dx, dy, dz, t, sem) -> None:
    rx, ry = ox - obj.x, oy - obj.y
    a = dx * dx + dy * dy
    b = 2.0 * (rx * dx + ry * dy)
    c0 = rx * rx + ry * ry - obj.radius * obj.radius
    disc = b * b - 4.0 * a * c0
    valid = (disc > 0.0) & (a > _EPS)
    sq = np.sqrt(np.where(valid, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-b - sq) / (2.0 * a)
        t2 = (-b + sq) / (2.0 * a)
    z1 = oz + t1 * dz
    lateral = valid & (t1 > _EPS) & (z1 >= 0.0) & (z1 <= obj.height)
    hit_t = np.where(lateral, t1, np.inf)
    if oz > obj.height:  # top cap visible only from above
        down = dz < -_EPS
        with np.errstate(divide="ignore", invalid="ignore"):
            tc = np.where(down, (obj.height - oz) / dz, np.inf)
        cap = valid & down & (tc > _EPS) & (tc >= t1) & (tc <= t2)
        hit_t = np.where(cap & (tc < hit_t), tc, hit_t)
    better = hit_t < t
    np.copyto(t, hit_t, where=better)
    sem[better] = sem_id


def _bearing_interval_overlaps(center_bearing, half_width, yaw, view_half) -> bool:
    return angle_diff(center_bearing, yaw) <= half_width + view_half


def _cull_segments(segs, pose: Pose, view_half: float, max_range: float):
    o = pose.xy
    kept = []
    for seg in segs:
        d = _point_segment_distance(o, seg.a, seg.b)
        if d > max_range:
            continue
        if d < 0.75:
            kept.append(seg)
            continue
        ba = math.atan2(seg.y0 - o[1], seg.x0 - o[0])
        bb = math.atan2(seg.y1 - o[1], seg.x1 - o[0])
        mid = ba + wrap_pi(bb - ba) / 2.0
        half = angle_diff(ba, bb) / 2.0
        if _bearing_interval_overlaps(mid, half, pose.yaw, view_half):
            kept.append(seg)
    return kept


def _cull_objects(objs, pose: Pose, view_half: float, max_range: float):
    o = pose.xy
    kept = []
    for obj in objs:
        dist = float(np.hypot(*(obj.center - o)))
        if dist - obj.radius > max_range:
            continue
        if dist <= obj.radius + 0.75:
            kept.append(obj)
            continue
        half = math.asin(min(1.0, obj.radius / dist))
        bearing = math.atan2(obj.y - o[1], obj.x - o[0])
        if _bearing_interval_overlaps(bearing, half, pose.yaw, view_half):
            kept.append(obj)
    return kept


# ---------------------------------------------------------------------------
# Motion

@dataclass(frozen=True)
class PolarAction:
    """Movement command in the agent frame: turn by theta, advance r meters."""

    r: float
    theta: float

    def __post_init__(self):
        if self.r < 0.0:
            raise ValueError("action range must be >= 0")
        object.__setattr__(self, "theta", wrap_pi(self.theta))


def execute_action(scene: Scene, pose: Pose, action: PolarAction,
                   body: AgentBody) -> Pose:
    """Turn to ``yaw + theta`` and advance up to r, stopping so the body
    disk never intersects walls, objects, or scene bounds."""
    heading = pose.yaw + action.theta
    d = np.array([math.cos(heading), math.sin(heading)])
    o = pose.xy
    free = action.r
    for seg in scene.collision_segments():
        free = min(free, _toi_disk_segment(o, d, seg.a, seg.b, body.radius))
        if free <= 0.0:
            break
    if free > 0.0:
        for obj in scene.objects:
            free = min(free, _toi_disk_circle(o, d, obj.center, obj.radius + body.radius))
            if free <= 0.0:
                break
    move = max(0.0, free)
    return Pose(pose.x + move * d[0], pose.y + move * d[1], pose.z, heading)


def _toi_disk_circle(o, d, c, rho) -> float:
    """Travel distance along unit d until |o + t*d - c| = rho (inf if never).

    Already-touching contacts block only while approaching, so an agent
    resting against an obstacle can still move away from it.
    """
    rel = o - c
    c0 = float(rel @ rel) - rho * rho
    b = 2.0 * float(rel @ d)
    if c0 <= 1e-12:
        # tangential motion (|b| ~ fp noise) must not freeze the agent
        return 0.0 if b < -1e-9 else math.inf
    disc = b * b - 4.0 * c0
    if disc <= 0.0:
        return math.inf
    tt = (-b - math.sqrt(disc)) / 2.0
    return tt if tt >= 0.0 else math.inf


def _toi_disk_segment(o, d, a, b, radius) -> float:
    dist = _point_segment_distance(o, a, b)
    if dist <= radius + 1e-12:
        if dist <= _EPS:
            return 0.0
        ab = b - a
        denom = float(ab @ ab)
        u = min(1.0, max(0.0, float((o - a) @ ab) / denom)) if denom > _EPS else 0.0
        q = a + u * ab
        away = float((o - q) @ d)
        return math.inf if away >= -1e-9 else 0.0
    best = min(_toi_disk_circle(o, d, a, radius),
               _toi_disk_circle(o, d, b, radius))
    ab = b - a
    length = float(np.hypot(*ab))
    if length > _EPS:
        n = np.array([-ab[1], ab[0]]) / length
        s0 = float((o - a) @ n)
        sd = float(d @ n)
        if abs(sd) > _EPS:
            tt = (math.copysign(radius, s0) - s0) / sd
            if tt >= 0.0:
                proj = float((o + tt * d - a) @ ab) / (length * length)
                if 0.0 <= proj <= 1.0:
                    best = min(best, tt)
    return best


def _point_segment_distance(p, a, b) -> float:
    ab = b - a
    denom = float(ab @ ab)
    if denom < _EPS:
        return float(np.hypot(*(p - a)))
    u = float((p - a) @ ab) / denom
    u = min(1.0, max(0.0, u))
    closest = a + u * ab
    return float(np.hypot(*(p - closest)))


def clearance(scene: Scene, x: float, y: float) -> float:
    """Distance from (x, y) to the nearest wall, object surface, or bound."""
    p = np.array([x, y])
    best = min(x, scene.bounds[0] - x, y, scene.bounds[1] - y)
    for seg in scene.walls:
        best = min(best, _point_segment_distance(p, seg.a, seg.b))
    for obj in scene.objects:
        best = min(best, float(np.hypot(*(p - obj.center))) - obj.radius)
    return best


# ---------------------------------------------------------------------------
# Visibility

def is_goal_visible(scene: Scene, pose: Pose, cam: CameraModel,
                    goal_category: str,
                    max_range: float = DEFAULT_MAX_RANGE) -> bool:
    """True iff some goal instance center is inside the horizontal frustum
    with an unobstructed sight line (walls always occlude; other objects
    occlude when the sight line crosses their footprint and they are at
    least goal-center tall)."""
    for obj in scene.instances_of(goal_category):
        dist = math.hypot(obj.x - pose.x, obj.y - pose.y)
        if dist <= _EPS or dist > max_range:
            continue
        bearing = math.atan2(obj.y - pose.y, obj.x - pose.x)
        if angle_diff(bearing, pose.yaw) > cam.hfov / 2.0:
            continue
        if _sight_line_clear(scene, pose.xy, obj):
            return True
    return False


def _sight_line_clear(scene: Scene, origin: np.ndarray, goal: SceneObject) -> bool:
    target = goal.center
    for seg in scene.walls:
        if _segments_intersect(origin, target, seg.a, seg.b):
            return False
    center_height = goal.height / 2.0
    for other in scene.objects:
        if other is goal or other.height < center_height:
            continue
        if _segment_circle_distance(origin, target, other.center) < other.radius:
            return False
    return True


def _segments_intersect(p1, p2, p3, p4) -> bool:
    d1 = _cross(p3, p4, p1)
    d2 = _cross(p3, p4, p2)
    d3 = _cross(p1, p2, p3)
    d4 = _cross(p1, p2, p4)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)):
        return True
    return False


def _cross(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _segment_circle_distance(a, b, c) -> float:
    return _point_segment_distance(c, a, b)


# ---------------------------------------------------------------------------
# Geodesics on the inflated free-space grid

def free_space_grid(scene: Scene, body: AgentBody,
                    resolution: float = GEODESIC_RESOLUTION):
    """(free mask, (nx, ny)): cells free when the center keeps
    ``body.radius`` clearance from every wall, object, and the bounds."""
    key = ("free", body.radius, resolution)
    if key in scene._cache:
        return scene._cache[key]
    nx = max(1, int(round(scene.bounds[0] / resolution)))
    ny = max(1, int(round(scene.bounds[1] / resolution)))
    xs = (np.arange(nx) + 0.5) * resolution
    ys = (np.arange(ny) + 0.5) * resolution
    px, py = np.meshgrid(xs, ys, indexing="ij")
    clear = np.minimum.reduce([px, scene.bounds[0] - px, py, scene.bounds[1] - py])
    for seg in scene.walls:
        clear = np.minimum(clear, _grid_segment_distance(px, py, seg))
    for obj in scene.objects:
        clear = np.minimum(clear, np.hypot(px - obj.x, py - obj.y) - obj.radius)
    free = clear >= body.radius
    scene._cache[key] = (free, (nx, ny))
    return scene._cache[key]


def _grid_segment_distance(px, py, seg: WallSegment):
    ax, ay, bx, by = seg.x0, seg.y0, seg.x1, seg.y1
    abx, aby = bx - ax, by - ay
    denom = abx * abx + aby * aby
    if denom < _EPS:
        return np.hypot(px - ax, py - ay)
    u = np.clip(((px - ax) * abx + (py - ay) * aby) / denom, 0.0, 1.0)
    return np.hypot(px - (ax + u * abx), py - (ay + u * aby))


def _axis_slices(n: int, step: int) -> tuple[slice, slice]:
    if step == 1:
        return slice(0, n - 1), slice(1, n)
    if step == -1:
        return slice(1, n), slice(0, n - 1)
    return slice(0, n), slice(0, n)


def _geodesic_graph(scene: Scene, body: AgentBody, resolution: float):
    key = ("graph", body.radius, resolution)
    if key in scene._cache:
        return scene._cache[key]
    free, (nx, ny) = free_space_grid(scene, body, resolution)
    idx = np.arange(nx * ny).reshape(nx, ny)
    rows, cols, data = [], [], []
    for ddx, ddy in ((1, 0), (0, 1), (1, 1), (1, -1)):
        cost = resolution * (math.sqrt(2.0) if ddx and ddy else 1.0)
        sx, dx_ = _axis_slices(nx, ddx)
        sy, dy_ = _axis_slices(ny, ddy)
        ok = free[sx, sy] & free[dx_, dy_]
        rows.append(idx[sx, sy][ok])
        cols.append(idx[dx_, dy_][ok])
        data.append(np.full(int(ok.sum()), cost))
    graph = coo_matrix((np.concatenate(data),
                        (np.concatenate(rows), np.concatenate(cols))),
                       shape=(nx * ny, nx * ny)).tocsr()
    scene._cache[key] = (free, (nx, ny), graph)
    return scene._cache[key]


def _snap_to_free_cell(free, nx, ny, cx, cy, max_steps: int = 2):
    """Nearest free cell within a small Chebyshev radius, else None."""
    for ring in range(max_steps + 1):
        best = None
        for ix in range(max(0, cx - ring), min(nx, cx + ring + 1)):
            for iy in range(max(0, cy - ring), min(ny, cy + ring + 1)):
                if max(abs(ix - cx), abs(iy - cy)) != ring or not free[ix, iy]:
                    continue
                d = (ix - cx) ** 2 + (iy - cy) ** 2
                if best is None or d < best[0]:
                    best = (d, ix, iy)
        if best is not None:
            return best[1], best[2]
    return None


def geodesic_distance(scene: Scene, a, b, body: AgentBody,
                      resolution: float = GEODESIC_RESOLUTION) -> float | None:
    """Shortest 8-connected path length between two points, or None when
    unreachable (including endpoints with no nearby free cell)."""
    for p in (a, b):
        if not scene.in_bounds(p[0], p[1]):
            raise ValueError(f"point {tuple(p)} outside scene bounds")
    free, (nx, ny), graph = _geodesic_graph(scene, body, resolution)
    cells = []
    for p in (a, b):
        cx = min(nx - 1, max(0, int(p[0] / resolution)))
        cy = min(ny - 1, max(0, int(p[1] / resolution)))
        snapped = _snap_to_free_cell(free, nx, ny, cx, cy)
        if snapped is None:
            return None
        cells.append(snapped)
    src = cells[0][0] * ny + cells[0][1]
    dst = cells[1][0] * ny + cells[1][1]
    dist = dijkstra(graph, directed=False, indices=src, min_only=False)
    val = dist[dst]
    return None if np.isinf(val) else float(val)


def distance_field(scene: Scene, sources_xy, body: AgentBody,
                   resolution: float = GEODESIC_RESOLUTION):
    """Multi-source geodesic field (nx, ny), +inf where unreachable.

    Sources are snapped to nearby free cells; sources with none are ignored.
    """
    free, (nx, ny), graph = _geodesic_graph(scene, body, resolution)
    indices = []
    for p in sources_xy:
        cx = min(nx - 1, max(0, int(p[0] / resolution)))
        cy = min(ny - 1, max(0, int(p[1] / resolution)))
        snapped = _snap_to_free_cell(free, nx, ny, cx, cy)
        if snapped is not None:
            indices.append(snapped[0] * ny + snapped[1])
    if not indices:
        return np.full((nx, ny), np.inf)
    dist = dijkstra(graph, directed=False, indices=sorted(set(indices)),
                    min_only=True)
    return dist.reshape(nx, ny)


def goal_region_cells(scene: Scene, instances, body: AgentBody,
                      d_thres: float = 1.0,
                      resolution: float = GEODESIC_RESOLUTION) -> np.ndarray:
    """Free cells whose center lies within d_thres of any goal instance."""
    free, (nx, ny), _ = _geodesic_graph(scene, body, resolution)
    xs = (np.arange(nx) + 0.5) * resolution
    ys = (np.arange(ny) + 0.5) * resolution
    px, py = np.meshgrid(xs, ys, indexing="ij")
    near = np.zeros((nx, ny), dtype=bool)
    for obj in instances:
        near |= np.hypot(px - obj.x, py - obj.y) < d_thres
    cx, cy = np.nonzero(near & free)
    return np.stack([cx, cy], axis=1)


def goal_distance_field(scene: Scene, goal_category: str, body: AgentBody,
                        d_thres: float = 1.0,
                        resolution: float = GEODESIC_RESOLUTION) -> np.ndarray:
    """Geodesic distance to the goal's success region, cached per scene."""
    key = ("goalfield", goal_category, body.radius, d_thres, resolution)
    if key not in scene._cache:
        cells = goal_region_cells(scene, scene.instances_of(goal_category),
                                  body, d_thres, resolution)
        centers = (cells + 0.5) * resolution
        scene._cache[key] = distance_field(scene, centers, body, resolution)
    return scene._cache[key]


def optimal_path_length(scene: Scene, start_xy, goal_category: str,
                        body: AgentBody, d_thres: float = 1.0,
                        resolution: float = GEODESIC_RESOLUTION) -> float | None:
    """Geodesic from start to the nearest reachable point of the success
    region (None when unreachable)."""
    field = goal_distance_field(scene, goal_category, body, d_thres, resolution)
    nx, ny = field.shape
    free, _, _ = _geodesic_graph(scene, body, resolution)
    cx = min(nx - 1, max(0, int(start_xy[0] / resolution)))
    cy = min(ny - 1, max(0, int(start_xy[1] / resolution)))
    snapped = _snap_to_free_cell(free, nx, ny, cx, cy)
    if snapped is None:
        return None
    val = field[snapped]
    return None if np.isinf(val) else float(val)


def judge_success(episode: Episode, stop_pose: Pose,
                  d_thres: float = 1.0) -> bool:
    """True iff the stop position is strictly within d_thres of a goal instance."""
    return any(math.hypot(obj.x - stop_pose.x, obj.y - stop_pose.y) < d_thres
               for obj in episode.goal_instances)
