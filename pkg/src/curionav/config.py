"""Run configuration: camera, mapping grid, sampling, and loop parameters.

Defaults match the navigation setup this package implements end to end:
640x480 camera with 79 degree HFoV pitched down 14 degrees, 0.1 m map
cells, a 40-step budget, and the two-stage polar action sampler (12
capped exploration bearings, 3 degree dense goal-stage spacing).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, asdict, fields

from .geometry import CameraModel, GridSpec


@dataclass(frozen=True)
class NavConfig:
    # episode loop
    max_steps: int = 40
    d_thres: float = 1.0
    r_visit: float = 1.0
    parse_retries: int = 3

    # camera
    camera_width: int = 640
    camera_height: int = 480
    hfov_deg: float = 79.0
    pitch_down_deg: float = 14.0
    depth_stride: int = 1  # back-projection subsampling (1 = every pixel)

    # top-down grid (shared by the curiosity map and explored map)
    map_size: int = 400
    resolution: float = 0.1

    # exploration-stage action sampling
    num_bearings: int = 12  # K; spacing = HFoV / K
    r_max: float = 3.0
    r_min: float = 0.3
    delta_theta_min_deg: float = 10.0

    # goal-stage action sampling
    delta_theta_dense_deg: float = 3.0
    goal_gap_bridge: float = 0.6  # max unobserved run the range walk may cross

    # range walk seeding: the pitched camera cannot see the floor closer
    # than ~0.86 m, so cells this close to the agent count as walkable
    # unless observed blocked
    seed_radius: float = 1.0

    # benchmark execution
    workers: int = 0  # 0 = one per available core
    snapshots: str = "final"  # off | final | all

    def __post_init__(self):
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")
        if self.num_bearings <= 0:
            raise ValueError("num_bearings must be positive")
        if not 0.0 < self.hfov_deg < 180.0:
            raise ValueError("hfov_deg must be in (0, 180)")
        if self.snapshots not in ("off", "final", "all"):
            raise ValueError(f"snapshots must be off/final/all, "
                             f"got {self.snapshots!r}")
        if self.r_min < 0 or self.r_max <= 0:
            raise ValueError("action ranges must be positive")

    def camera(self) -> CameraModel:
        return CameraModel(self.camera_width, self.camera_height,
                           math.radians(self.hfov_deg),
                           math.radians(self.pitch_down_deg))

    def grid(self) -> GridSpec:
        # origin at the world origin so map cells coincide with the
        # geodesic grid used for evaluation
        return GridSpec(self.map_size, self.resolution, (0.0, 0.0))

    def effective_workers(self) -> int:
        return self.workers if self.workers > 0 else (os.cpu_count() or 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NavConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "NavConfig":
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        try:
            return cls.from_dict(doc)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"{path}: {exc}") from exc
