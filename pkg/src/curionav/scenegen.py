"""Procedural indoor scenes and the bundled benchmark suite.

Scenes are axis-aligned floor plans: a bounding rectangle recursively
split by interior walls with doorway gaps, furnished with cylindrical
objects drawn from a small household category set. Episode generation
rejection-samples start poses until the goal's success region is
geodesically reachable within a target distance band, so every bundled
episode is solvable by construction.
"""

from __future__ import annotations

import argparse
import json
import math
import os

import numpy as np
from scipy.ndimage import binary_erosion

from .simulator import (AgentBody, Episode, Room, Scene, SceneObject,
                        WallSegment, free_space_grid, goal_distance_field,
                        save_scene)
from .geometry import Pose

# category -> ((radius lo, hi), (height lo, hi)) in meters
CATEGORY_SHAPES = {
    "bed": ((0.38, 0.45), (0.50, 0.60)),
    "sofa": ((0.34, 0.44), (0.60, 0.75)),
    "toilet": ((0.22, 0.28), (0.40, 0.50)),
    "tv": ((0.24, 0.32), (0.90, 1.10)),
    "plant": ((0.20, 0.30), (1.00, 1.30)),
    "chair": ((0.22, 0.30), (0.45, 0.85)),
}
CATEGORIES = tuple(sorted(CATEGORY_SHAPES))

ROOM_LABELS = ("living room", "bedroom", "kitchen",
               "bathroom", "office", "hallway")

DOOR_MARGIN = 0.5        # door offset from wall ends
OBJECT_WALL_GAP = 0.7    # walkway kept between an object and any room edge
OBJECT_GAP = 0.6         # extra spacing between object surfaces
DOOR_KEEPOUT = 0.9       # objects stay this far from doorway midpoints


def _round1(v: float) -> float:
    return round(float(v), 1)


CUT_DOOR_CLEARANCE = 0.6  # new walls end this far from any doorway


def _cut_blocked(cut: float, vertical: bool, leaf, doors) -> bool:
    """True when a wall at ``cut`` would end inside (or hug) an existing
    doorway on either edge it meets, creating an impassable dog-leg."""
    x0, y0, x1, y1 = leaf
    for d in doors:
        if d["vertical"] == vertical:
            continue
        edges = (x0, x1) if not vertical else (y0, y1)
        if not any(abs(d["line"] - e) < 1e-9 for e in edges):
            continue
        if d["lo"] - CUT_DOOR_CLEARANCE <= cut <= d["hi"] + CUT_DOOR_CLEARANCE:
            return True
    return False


def _split_leaf(leaf, rng, doors, walls):
    """Split a rectangular leaf with a doored wall; None when too small."""
    x0, y0, x1, y1 = leaf
    w, h = x1 - x0, y1 - y0
    vertical = w >= h  # wall perpendicular to the longer side
    span, wall_len = (w, h) if vertical else (h, w)
    door_w = _round1(rng.uniform(1.0, 1.4))
    if span < 4.6 or wall_len < 2 * DOOR_MARGIN + door_w:
        return None
    cut = None
    for _ in range(12):
        c = _round1((x0 if vertical else y0) + span * rng.uniform(0.42, 0.58))
        if not _cut_blocked(c, vertical, leaf, doors):
            cut = c
            break
    if cut is None:
        return None
    lo = (y0 if vertical else x0) + DOOR_MARGIN
    hi = (y1 if vertical else x1) - DOOR_MARGIN - door_w
    g0 = _round1(rng.uniform(lo, hi))
    g1 = _round1(g0 + door_w)
    if vertical:
        walls += [WallSegment(cut, y0, cut, g0), WallSegment(cut, g1, cut, y1)]
        doors.append({"vertical": True, "line": cut, "lo": g0, "hi": g1,
                      "mid": (cut, (g0 + g1) / 2.0)})
        return (x0, y0, cut, y1), (cut, y0, x1, y1)
    walls += [WallSegment(x0, cut, g0, cut), WallSegment(g1, cut, x1, cut)]
    doors.append({"vertical": False, "line": cut, "lo": g0, "hi": g1,
                  "mid": ((g0 + g1) / 2.0, cut)})
    return (x0, y0, x1, cut), (x0, cut, x1, y1)


def _place_objects(rng, leaves, doors, max_per_room=2):
    objects = []
    for leaf in leaves:
        x0, y0, x1, y1 = leaf
        placed = 0
        want = int(rng.integers(1, max_per_room + 1))
        for _ in range(40):
            if placed >= want:
                break
            cat = str(rng.choice(CATEGORIES))
            (rlo, rhi), (hlo, hhi) = CATEGORY_SHAPES[cat]
            radius = round(float(rng.uniform(rlo, rhi)), 2)
            height = round(float(rng.uniform(hlo, hhi)), 2)
            margin = radius + OBJECT_WALL_GAP
            if x1 - x0 < 2 * margin or y1 - y0 < 2 * margin:
                continue
            ox = _round1(rng.uniform(x0 + margin, x1 - margin))
            oy = _round1(rng.uniform(y0 + margin, y1 - margin))
            if any(math.hypot(ox - d["mid"][0], oy - d["mid"][1])
                   < radius + DOOR_KEEPOUT for d in doors):
                continue
            if any(math.hypot(ox - o.x, oy - o.y) < radius + o.radius + OBJECT_GAP
                   for o in objects):
                continue
            objects.append(SceneObject(cat, ox, oy, radius, height))
            placed += 1
    return objects


def generate_scene(seed: int, *, max_rooms: int = 4,
                   bounds_range=((7.0, 10.0), (6.0, 9.0)),
                   max_objects_per_room: int = 2) -> Scene:
    """Deterministic procedural floor plan for ``seed``."""
    rng = np.random.default_rng(seed)
    bx = _round1(rng.uniform(*bounds_range[0]))
    by = _round1(rng.uniform(*bounds_range[1]))
    leaves = [(0.0, 0.0, bx, by)]
    walls: list[WallSegment] = []
    doors: list[tuple[float, float]] = []
    n_rooms = int(rng.integers(2, max_rooms + 1))
    while len(leaves) < n_rooms:
        leaves.sort(key=lambda r: (r[2] - r[0]) * (r[3] - r[1]), reverse=True)
        split = _split_leaf(leaves[0], rng, doors, walls)
        if split is None:
            break
        leaves[0:1] = list(split)
    objects = _place_objects(rng, leaves, doors, max_objects_per_room)
    if not objects:  # degenerate draw; keep the scene usable
        cx, cy = (leaves[0][0] + leaves[0][2]) / 2, (leaves[0][1] + leaves[0][3]) / 2
        objects = [SceneObject("chair", _round1(cx), _round1(cy), 0.25, 0.6)]
    labels = list(ROOM_LABELS)
    rng.shuffle(labels)
    rooms = [Room(labels[i % len(labels)], *leaf)
             for i, leaf in enumerate(leaves)]
    return Scene((bx, by), walls, objects, rooms, name=f"gen-{seed}")


def generate_episode(scene: Scene, seed: int, *, body: AgentBody | None = None,
                     min_geodesic: float = 2.5, max_geodesic: float = 14.0,
                     d_thres: float = 1.0, max_steps: int = 40,
                     resolution: float = 0.1) -> Episode | None:
    """Episode with a reachable goal whose geodesic falls in the given band.

    Returns None when the scene admits no such start (caller should try
    another scene seed).
    """
    body = body or AgentBody()
    rng = np.random.default_rng(seed)
    cats = sorted({o.category for o in scene.objects})
    order = list(rng.permutation(len(cats)))
    free, (nx, ny) = free_space_grid(scene, body, resolution)
    interior = binary_erosion(free, np.ones((3, 3), dtype=bool))
    for ci in order:
        goal = cats[ci]
        field = goal_distance_field(scene, goal, body, d_thres, resolution)
        ok = interior & np.isfinite(field) & (field >= min_geodesic) \
            & (field <= max_geodesic)
        cx, cy = np.nonzero(ok)
        if cx.size == 0:
            continue
        pick = int(rng.integers(cx.size))
        x = (cx[pick] + 0.5) * resolution
        y = (cy[pick] + 0.5) * resolution
        yaw = round(float(rng.uniform(-math.pi, math.pi)), 3)
        return Episode(scene, Pose(x, y, body.camera_height, yaw), goal,
                       seed=seed, max_steps=max_steps)
    return None


def write_suite(out_dir, n_episodes: int = 20, seed: int = 7, *,
                config: dict | None = None, min_geodesic: float = 2.5,
                max_geodesic: float = 14.0) -> str:
    """Generate scenes + episodes + suite.json under out_dir; returns the
    suite path. Scene seeds advance past scenes with no admissible start."""
    scenes_dir = os.path.join(out_dir, "scenes")
    eps_dir = os.path.join(out_dir, "episodes")
    os.makedirs(scenes_dir, exist_ok=True)
    os.makedirs(eps_dir, exist_ok=True)
    episodes = []
    scene_seed = seed * 1000
    while len(episodes) < n_episodes:
        scene = generate_scene(scene_seed)
        episode = generate_episode(scene, seed=scene_seed + 1,
                                   min_geodesic=min_geodesic,
                                   max_geodesic=max_geodesic)
        scene_seed += 1
        if episode is None:
            continue
        i = len(episodes)
        scene_name = f"scene_{i:02d}.json"
        ep_name = f"ep_{i:02d}.json"
        save_scene(scene, os.path.join(scenes_dir, scene_name))
        doc = {
            "schema": 1,
            "scene": f"../scenes/{scene_name}",
            "start": {"x": episode.start.x, "y": episode.start.y,
                      "yaw": episode.start.yaw},
            "goal_category": episode.goal_category,
            "seed": episode.seed,
            "max_steps": episode.max_steps,
        }
        with open(os.path.join(eps_dir, ep_name), "w") as fh:
            json.dump(doc, fh, indent=1)
        episodes.append(f"episodes/{ep_name}")
    suite = {
        "name": os.path.basename(os.path.normpath(out_dir)) or "suite",
        "episodes": episodes,
    }
    if config is not None:
        suite["config"] = config
    suite_path = os.path.join(out_dir, "suite.json")
    with open(suite_path, "w") as fh:
        json.dump(suite, fh, indent=1)
    return suite_path


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description="regenerate a benchmark suite")
    p.add_argument("--out", required=True)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--camera", default="320x240",
                   help="WxH embedded in the suite config")
    args = p.parse_args(argv)
    try:
        w, h = (int(v) for v in args.camera.lower().split("x"))
    except ValueError:
        raise SystemExit(f"--camera must look like 320x240, got {args.camera}")
    path = write_suite(args.out, args.episodes, args.seed,
                       config={"camera_width": w, "camera_height": h})
    print(path)
    return 0


if __name__ == "__main__":
    import sys
    sys.exit(main())
