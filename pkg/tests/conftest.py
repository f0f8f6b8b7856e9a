"""Shared fixtures and scene builders for the test suite."""

import math

import numpy as np
import pytest

from curionav.config import NavConfig
from curionav.geometry import GridSpec, Pose
from curionav.policy import ViewData
from curionav.simulator import (AgentBody, Episode, Scene, SceneObject,
                                WallSegment, render)
from curionav.geometry import depth_to_world_points, navigable_cells, \
    occupied_cells


# criterion pass/fail lines collected by the acceptance module
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def small_cfg(**overrides) -> NavConfig:
    """Config with a small camera so rendering stays fast in tests."""
    base = {"camera_width": 160, "camera_height": 120}
    base.update(overrides)
    return NavConfig(**base)


def box_scene(bx: float = 6.0, by: float = 5.0, objects=(), walls=()) -> Scene:
    return Scene((bx, by), list(walls), list(objects), [])


def goal_box_scene() -> Scene:
    """6x5 room with one chair goal at (4.5, 2.5)."""
    return box_scene(objects=[SceneObject("chair", 4.5, 2.5, 0.25, 0.7)])


def make_episode(scene: Scene, start: Pose, goal: str,
                 max_steps: int = 40) -> Episode:
    return Episode(scene, start, goal, max_steps=max_steps)


def single_view(scene: Scene, pose: Pose, cfg: NavConfig,
                body: AgentBody | None = None) -> ViewData:
    """Render one view and project its cells, mirroring panorama capture."""
    body = body or AgentBody()
    cam = cfg.camera()
    grid = cfg.grid()
    obs = render(scene, pose, cam)
    points = depth_to_world_points(obs.depth, cam, pose)
    nav = navigable_cells(points, grid, clearance_height=body.height)
    occ = occupied_cells(points, grid, clearance_height=body.height)
    rgb = np.zeros((cam.height, cam.width, 3), dtype=np.uint8)
    return ViewData(pose, obs.depth, obs.semantic, rgb, nav, occ)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
