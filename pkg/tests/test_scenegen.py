"""Procedural scene/episode generation: determinism, placement rules,
reachability guarantees, and suite writing."""

import filecmp
import json
import math
import os

import pytest

from oracles import point_seg_dist

from curionav.harness import load_suite
from curionav.scenegen import (CATEGORIES, CATEGORY_SHAPES, OBJECT_GAP,
                               OBJECT_WALL_GAP, ROOM_LABELS, _cut_blocked,
                               generate_episode, generate_scene, main,
                               write_suite)
from curionav.simulator import (AgentBody, free_space_grid,
                                goal_distance_field, scene_to_dict)


def test_generate_scene_deterministic():
    assert scene_to_dict(generate_scene(9)) == scene_to_dict(generate_scene(9))
    assert scene_to_dict(generate_scene(9)) != scene_to_dict(generate_scene(10))


@pytest.mark.parametrize("seed", [0, 3, 17, 42])
def test_generated_scene_respects_placement_rules(seed):
    scene = generate_scene(seed)
    bx, by = scene.bounds
    assert 7.0 <= bx <= 10.0 and 6.0 <= by <= 9.0

    for seg in scene.collision_segments():
        assert seg.x0 == seg.x1 or seg.y0 == seg.y1  # axis aligned
        for x, y in ((seg.x0, seg.y0), (seg.x1, seg.y1)):
            assert -1e-9 <= x <= bx + 1e-9 and -1e-9 <= y <= by + 1e-9

    segs = scene.collision_segments()
    for i, a in enumerate(scene.objects):
        assert a.category in CATEGORIES
        (rlo, rhi), (hlo, hhi) = CATEGORY_SHAPES[a.category]
        assert rlo - 1e-9 <= a.radius <= rhi + 1e-9
        assert hlo - 1e-9 <= a.height <= hhi + 1e-9
        # walkway clearance to every wall, and surface gaps between objects
        for seg in segs:
            d = point_seg_dist(a.x, a.y, seg.x0, seg.y0, seg.x1, seg.y1)
            assert d >= a.radius + OBJECT_WALL_GAP - 1e-9
        for b in scene.objects[i + 1:]:
            assert math.hypot(a.x - b.x, a.y - b.y) \
                >= a.radius + b.radius + OBJECT_GAP - 1e-9

    assert scene.rooms
    for room in scene.rooms:
        assert room.label in ROOM_LABELS
    area = sum((r.x1 - r.x0) * (r.y1 - r.y0) for r in scene.rooms)
    assert area == pytest.approx(bx * by)  # rooms partition the floor


def test_cut_blocked_rules():
    leaf = (0.0, 0.0, 8.0, 6.0)
    door = {"vertical": False, "line": 0.0, "lo": 2.0, "hi": 3.0,
            "mid": (2.5, 0.0)}
    # a vertical cut meeting the doored bottom edge must clear the doorway
    assert _cut_blocked(2.5, True, leaf, [door])
    assert _cut_blocked(3.5, True, leaf, [door])  # within the 0.6 margin
    assert not _cut_blocked(4.0, True, leaf, [door])
    # doors on lines this leaf never touches do not constrain it
    far = dict(door, line=7.0)
    assert not _cut_blocked(2.5, True, leaf, [far])
    # parallel doors are not dog-leg hazards for this cut orientation
    parallel = {"vertical": True, "line": 0.0, "lo": 2.0, "hi": 3.0,
                "mid": (0.0, 2.5)}
    assert not _cut_blocked(2.5, True, leaf, [parallel])


def test_generate_episode_band_and_validity():
    scene = generate_scene(5)
    body = AgentBody()
    ep = generate_episode(scene, seed=6)
    assert ep is not None
    assert ep.goal_category in {o.category for o in scene.objects}
    assert ep.start.z == body.camera_height
    free, _ = free_space_grid(scene, body, 0.1)
    cell = (int(ep.start.x / 0.1), int(ep.start.y / 0.1))
    assert free[cell]
    field = goal_distance_field(scene, ep.goal_category, body, 1.0, 0.1)
    assert 2.5 <= field[cell] <= 14.0


def test_generate_episode_none_when_band_impossible():
    scene = generate_scene(5)
    assert generate_episode(scene, seed=6, min_geodesic=1000.0) is None


def test_write_suite_deterministic(tmp_path):
    a = write_suite(tmp_path / "a", n_episodes=2, seed=3)
    b = write_suite(tmp_path / "b", n_episodes=2, seed=3)
    for rel in ("episodes/ep_00.json", "episodes/ep_01.json",
                "scenes/scene_00.json", "scenes/scene_01.json"):
        assert filecmp.cmp(os.path.join(os.path.dirname(a), rel),
                           os.path.join(os.path.dirname(b), rel),
                           shallow=False)
    da = json.loads(open(a).read())
    db = json.loads(open(b).read())
    assert da["episodes"] == db["episodes"]
    _, paths, _ = load_suite(a)
    assert len(paths) == 2


def test_scenegen_cli(tmp_path, capsys):
    rc = main(["--out", str(tmp_path / "s"), "--episodes", "1",
               "--camera", "100x80"])
    assert rc == 0
    suite_path = capsys.readouterr().out.strip()
    _, paths, cfg = load_suite(suite_path)
    assert len(paths) == 1
    assert (cfg.camera_width, cfg.camera_height) == (100, 80)

    with pytest.raises(SystemExit):
        main(["--out", str(tmp_path / "t"), "--camera", "wide"])
