"""Configuration dataclass: defaults, merging, validation, derived models."""

import json
import math

import pytest

from curionav.config import NavConfig


def test_defaults():
    cfg = NavConfig()
    assert cfg.max_steps == 40
    assert cfg.d_thres == 1.0
    assert (cfg.camera_width, cfg.camera_height) == (640, 480)
    assert cfg.hfov_deg == 79.0 and cfg.pitch_down_deg == 14.0
    assert cfg.map_size == 400 and cfg.resolution == 0.1
    assert cfg.num_bearings == 12
    assert (cfg.r_min, cfg.r_max) == (0.3, 3.0)
    assert cfg.delta_theta_min_deg == 10.0
    assert cfg.delta_theta_dense_deg == 3.0


def test_dict_roundtrip_and_partial_merge():
    cfg = NavConfig(camera_width=320, max_steps=10)
    assert NavConfig.from_dict(cfg.to_dict()) == cfg
    partial = NavConfig.from_dict({"map_size": 200})
    assert partial.map_size == 200
    assert partial.max_steps == 40  # untouched keys keep defaults


def test_from_dict_rejects_unknown_keys():
    with pytest.raises(ValueError, match="warp_speed"):
        NavConfig.from_dict({"warp_speed": 9})


@pytest.mark.parametrize("bad", [
    {"max_steps": 0},
    {"num_bearings": 0},
    {"hfov_deg": 180.0},
    {"hfov_deg": 0.0},
    {"snapshots": "sometimes"},
    {"r_max": 0.0},
    {"r_min": -0.1},
])
def test_validation_rejects(bad):
    with pytest.raises(ValueError):
        NavConfig.from_dict(bad)


def test_derived_camera_and_grid():
    cfg = NavConfig(camera_width=80, camera_height=60)
    cam = cfg.camera()
    assert (cam.width, cam.height) == (80, 60)
    assert cam.hfov == pytest.approx(math.radians(79.0))
    assert cam.pitch_down == pytest.approx(math.radians(14.0))
    grid = cfg.grid()
    assert grid.map_size == 400 and grid.resolution == 0.1
    assert grid.world_to_cell(0.05, 0.05) == (0, 0)  # origin anchored at 0


def test_effective_workers():
    assert NavConfig(workers=3).effective_workers() == 3
    assert NavConfig(workers=0).effective_workers() >= 1


def test_from_json(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"camera_width": 128, "camera_height": 96}))
    cfg = NavConfig.from_json(path)
    assert cfg.camera_width == 128

    path.write_text("{broken")
    with pytest.raises(ValueError, match="not valid JSON"):
        NavConfig.from_json(path)

    path.write_text("[1, 2]")
    with pytest.raises(ValueError, match="object"):
        NavConfig.from_json(path)
