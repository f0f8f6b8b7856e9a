"""Camera model, pose math, depth back-projection and grid transforms.

Conventions used throughout the package:

  world frame   x, y planar (meters), z up; yaw CCW from +x, in radians.
  agent frame   x forward, y left, z up; the camera is pitched *down*
                about the +y (left) axis by ``pitch_down``.
  pixels        (u, v), u rightward, v downward, half-pixel centers:
                pixel (0, 0) samples the ray through (0.5, 0.5).
  depth         range along the pixel ray in meters (not planar z-depth);
                non-finite values mean "no hit".
  cells         (cx, cy) integer pairs; grid arrays are indexed [cx, cy].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

# Relative yaw offsets (degrees) of the six panorama views, CCW from the
# agent's heading.
PANORAMA_VIEW_OFFSETS_DEG = (30.0, 90.0, 150.0, 210.0, 270.0, 330.0)
PANORAMA_VIEW_OFFSETS = tuple(math.radians(d) for d in PANORAMA_VIEW_OFFSETS_DEG)

# Rays longer than this produce no world point.
DEPTH_MAX_RANGE = 10.0

TWO_PI = 2.0 * math.pi


def normalize_angle(a: float) -> float:
    """Wrap an angle to [0, 2*pi)."""
    a = math.fmod(a, TWO_PI)
    if a < 0.0:
        a += TWO_PI
    # adding 2*pi to a tiny negative rounds up to exactly 2*pi
    return 0.0 if a >= TWO_PI else a


def wrap_pi(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a + math.pi, TWO_PI)
    if a <= 0.0:
        a += TWO_PI
    return a - math.pi


def angle_diff(a: float, b: float) -> float:
    """Smallest absolute difference between two angles, in [0, pi]."""
    return abs(wrap_pi(a - b))


@dataclass(frozen=True)
class Pose:
    """Agent pose: planar position, camera height above floor, heading."""

    x: float
    y: float
    z: float
    yaw: float

    def __post_init__(self):
        if self.z < 0.0:
            raise ValueError(f"camera height must be >= 0, got {self.z}")
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def xyz(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with square pixels, pitched down by ``pitch_down``."""

    width: int
    height: int
    hfov: float
    pitch_down: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.hfov < math.pi):
            raise ValueError(f"hfov must be in (0, pi), got {self.hfov}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("camera dimensions must be positive")

    @property
    def vfov(self) -> float:
        return 2.0 * math.atan(math.tan(self.hfov / 2.0) * self.height / self.width)

    @property
    def focal(self) -> float:
        """Focal length in pixels (shared by both axes)."""
        return (self.width / 2.0) / math.tan(self.hfov / 2.0)

    def max_bearing(self) -> float:
        """Largest |horizontal bearing| of any pixel ray in the agent frame.

        Exceeds hfov/2 when pitched: corner rays fan outward.
        """
        d = camera_rays(self)
        return float(np.max(np.abs(np.arctan2(d[..., 1], d[..., 0]))))


@lru_cache(maxsize=8)
def camera_rays(cam: CameraModel) -> np.ndarray:
    """Unit pixel-ray directions in the agent frame, shape (H, W, 3).

    Cached per camera; treat the returned array as read-only.
    """
    f = cam.focal
    u = (np.arange(cam.width) + 0.5 - cam.width / 2.0) / f
    v = (np.arange(cam.height) + 0.5 - cam.height / 2.0) / f
    uu, vv = np.meshgrid(u, v)
    cp, sp = math.cos(cam.pitch_down), math.sin(cam.pitch_down)
    # Agent frame before pitch: x fwd, y left, z up -> (1, -u', -v'),
    # then rotate down about +y.
    dx = cp - vv * sp
    dy = -uu
    dz = -(sp + vv * cp)
    d = np.stack([dx, dy, dz], axis=-1)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    d.setflags(write=False)
    return d


@dataclass(frozen=True)
class GridSpec:
    """Square top-down grid: ``map_size`` cells per side, ``resolution`` m/cell.

    ``origin`` is the world position of the low corner of cell (0, 0);
    cell (cx, cy) covers [origin + c*res, origin + (c+1)*res) on each axis.
    """

    map_size: int
    resolution: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.map_size <= 0:
            raise ValueError("map_size must be positive")
        if self.resolution <= 0.0:
            raise ValueError("resolution must be positive")

    @classmethod
    def centered_on(cls, x: float, y: float, map_size: int = 400,
                    resolution: float = 0.1) -> "GridSpec":
        half = map_size * resolution / 2.0
        return cls(map_size, resolution, (x - half, y - half))

    def world_to_cell(self, x: float, y: float) -> tuple[int, int]:
        return (int(math.floor((x - self.origin[0]) / self.resolution)),
                int(math.floor((y - self.origin[1]) / self.resolution)))

    def cell_center(self, cell: tuple[int, int]) -> tuple[float, float]:
        return (self.origin[0] + (cell[0] + 0.5) * self.resolution,
                self.origin[1] + (cell[1] + 0.5) * self.resolution)

    def in_bounds(self, cell: tuple[int, int]) -> bool:
        return 0 <= cell[0] < self.map_size and 0 <= cell[1] < self.map_size

    def world_to_cells(self, xy: np.ndarray) -> np.ndarray:
        """Vectorized world -> cell for an (N, 2) array. May be out of bounds."""
        return np.floor((xy - np.asarray(self.origin)) / self.resolution).astype(np.int64)

    def cell_centers(self, cells: np.ndarray) -> np.ndarray:
        return np.asarray(self.origin) + (np.asarray(cells, dtype=np.float64) + 0.5) * self.resolution

    def clip_mask(self, cells: np.ndarray) -> np.ndarray:
        return ((cells[:, 0] >= 0) & (cells[:, 0] < self.map_size)
                & (cells[:, 1] >= 0) & (cells[:, 1] < self.map_size))


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


def depth_to_world_points(depth: np.ndarray, cam: CameraModel, pose: Pose,
                          stride: int = 1,
                          max_range: float = DEPTH_MAX_RANGE) -> np.ndarray:
    """Back-project a range image into world points, shape (N, 3).

    One point per valid pixel (finite, > 0, <= max_range); ``stride``
    subsamples rows and columns for speed.
    """
    depth = np.asarray(depth)
    if depth.shape != (cam.height, cam.width):
        raise ValueError(
            f"depth shape {depth.shape} does not match camera "
            f"({cam.height}, {cam.width})")
    d = camera_rays(cam)
    if stride > 1:
        d = d[::stride, ::stride]
        depth = depth[::stride, ::stride]
    valid = np.isfinite(depth) & (depth > 0.0) & (depth <= max_range)
    r = depth[valid][:, None]
    dirs = d[valid]
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    wx = c * dirs[:, 0] - s * dirs[:, 1]
    wy = s * dirs[:, 0] + c * dirs[:, 1]
    pts = np.empty((dirs.shape[0], 3))
    pts[:, 0] = pose.x + r[:, 0] * wx
    pts[:, 1] = pose.y + r[:, 0] * wy
    pts[:, 2] = pose.z + r[:, 0] * dirs[:, 2]
    return pts


def world_to_pixel(point, cam: CameraModel, pose: Pose,
                   clamp: bool = False) -> tuple[float, float] | None:
    """Project a world point into pixel coordinates.

    Returns None when the point is behind the camera, or (without
    ``clamp``) outside the image. With ``clamp`` the coordinates are
    clipped into the image instead, which keeps markers for very close
    floor points drawable at the frame edge.
    """
    px, py = point[0] - pose.x, point[1] - pose.y
    pz = (point[2] if len(point) > 2 else 0.0) - pose.z
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    ax = c * px + s * py      # agent frame, unpitched
    ay = -s * px + c * py
    az = pz
    cp, sp = math.cos(cam.pitch_down), math.sin(cam.pitch_down)
    fx = cp * ax - sp * az    # un-pitch: rotate about +y by -pitch
    fz = sp * ax + cp * az
    if fx <= 1e-9:
        return None
    f = cam.focal
    u = (-ay / fx) * f + cam.width / 2.0 - 0.5
    v = (-fz / fx) * f + cam.height / 2.0 - 0.5
    if clamp:
        return (min(cam.width - 1.0, max(0.0, u)),
                min(cam.height - 1.0, max(0.0, v)))
    if not (-0.5 <= u <= cam.width - 0.5 and -0.5 <= v <= cam.height - 0.5):
        return None
    return (u, v)


def navigable_cells(points: np.ndarray, grid: GridSpec,
                    floor_eps: float = 0.08,
                    clearance_height: float = 0.88) -> np.ndarray:
    """Cells observed navigable: floor-height point present, no blocker.

    A cell qualifies iff it contains at least one point with
    |z| <= floor_eps and no point with floor_eps < z < clearance_height.
    Returns unique (N, 2) int cells; empty input gives an empty array.
    """
    floor_keys, block_keys = _height_partition(points, grid, floor_eps, clearance_height)
    keys = np.setdiff1d(floor_keys, block_keys, assume_unique=True)
    return _keys_to_cells(keys, grid)


def occupied_cells(points: np.ndarray, grid: GridSpec,
                   floor_eps: float = 0.08,
                   clearance_height: float = 0.88) -> np.ndarray:
    """Cells containing at least one blocking point (obstacle below clearance)."""
    _, block_keys = _height_partition(points, grid, floor_eps, clearance_height)
    return _keys_to_cells(block_keys, grid)


def _height_partition(points, grid, floor_eps, clearance_height):
    points = np.asarray(points)
    if points.size == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty
    cells = grid.world_to_cells(points[:, :2])
    inb = grid.clip_mask(cells)
    z = points[:, 2]
    keys = cells[:, 0] * grid.map_size + cells[:, 1]
    floor = inb & (np.abs(z) <= floor_eps)
    block = inb & (z > floor_eps) & (z < clearance_height)
    return np.unique(keys[floor]), np.unique(keys[block])


def _keys_to_cells(keys: np.ndarray, grid: GridSpec) -> np.ndarray:
    out = np.empty((keys.shape[0], 2), dtype=np.int64)
    out[:, 0] = keys // grid.map_size
    out[:, 1] = keys % grid.map_size
    return out


def bearing_to_view(bearing: float, views=PANORAMA_VIEW_OFFSETS) -> int:
    """Index of the view center closest in angle to ``bearing``; ties -> lower index."""
    if not views:
        raise ValueError("views must be nonempty")
    best, best_d = 0, float("inf")
    for i, center in enumerate(views):
        d = angle_diff(bearing, center)
        if d < best_d - 1e-12:
            best, best_d = i, d
    return best
