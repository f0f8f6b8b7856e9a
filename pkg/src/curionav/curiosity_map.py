"""Curiosity value map: top-down memory of where the goal might still be.

The map stores one score in [0, 10] per grid cell, initialized to 10
("anything could be here") and only ever lowered: each step the six
panorama direction scores are projected onto the cells observed navigable
in the corresponding views, and the stored map takes the cell-wise
minimum with that projection.  Cells inside the visited footprint are
zeroed outright, except while the goal flag is raised (the region that
contains a discovered goal must keep its appeal).

All update operations are functional: they return a new map and leave
the input untouched.  ExploredMap is the one mutable accumulator here;
its bits only ever flip False -> True.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import GridSpec

SCORE_MAX = 10.0
PGM_SCALE = 25.5  # score 10 -> gray 255


@dataclass(frozen=True)
class CuriosityValueMap:
    """Dense score grid; ``grid[cx, cy]`` in [0, 10]."""

    spec: GridSpec
    grid: np.ndarray = field(repr=False)

    def __post_init__(self):
        g = self.grid
        if g.shape != (self.spec.map_size, self.spec.map_size):
            raise ValueError(f"grid shape {g.shape} does not match spec "
                             f"{self.spec.map_size}x{self.spec.map_size}")
        g.flags.writeable = False

    def value_at(self, cell: tuple[int, int]) -> float:
        return float(self.grid[cell[0], cell[1]])


@dataclass(frozen=True)
class NavScoreMap:
    """Sparse per-step projection: observed-navigable cells -> score."""

    cells: np.ndarray  # (N, 2) int, unique, in bounds
    values: np.ndarray  # (N,) float in [0, 10]

    def __len__(self) -> int:
        return self.cells.shape[0]


def init_map(spec: GridSpec) -> CuriosityValueMap:
    """Fresh map with every cell at the maximum score."""
    grid = np.full((spec.map_size, spec.map_size), SCORE_MAX)
    return CuriosityValueMap(spec, grid)


def project_scores(scores, per_view_navigable) -> NavScoreMap:
    """Assign each view's score to its navigable cells.

    Cells that fall inside more than one view (the frustums overlap:
    79 degree HFoV on 60 degree spacing) take the minimum candidate
    score.  ``scores`` holds six values in [0, 10]; ``per_view_navigable``
    the matching six (N, 2) cell arrays.
    """
    if len(scores) != len(per_view_navigable):
        raise ValueError("need one score per view")
    for s in scores:
        if not 0.0 <= float(s) <= SCORE_MAX:
            raise ValueError(f"score {s} outside [0, {SCORE_MAX}]")
    chunks = [(np.asarray(cells, dtype=np.int64).reshape(-1, 2), float(s))
              for s, cells in zip(scores, per_view_navigable)]
    chunks = [(c, s) for c, s in chunks if c.shape[0] > 0]
    if not chunks:
        return NavScoreMap(np.empty((0, 2), dtype=np.int64), np.empty(0))
    all_cells = np.concatenate([c for c, _ in chunks])
    all_vals = np.concatenate([np.full(c.shape[0], s) for c, s in chunks])
    # min-reduce duplicates: sort by (cell, value) so the first row per cell wins
    order = np.lexsort((all_vals, all_cells[:, 1], all_cells[:, 0]))
    all_cells, all_vals = all_cells[order], all_vals[order]
    first = np.ones(all_cells.shape[0], dtype=bool)
    first[1:] = np.any(all_cells[1:] != all_cells[:-1], axis=1)
    return NavScoreMap(all_cells[first], all_vals[first])


def merge(prev: CuriosityValueMap, nav: NavScoreMap) -> CuriosityValueMap:
    """Cell-wise minimum of the stored map and this step's projection."""
    grid = prev.grid.copy()
    if len(nav):
        cx, cy = nav.cells[:, 0], nav.cells[:, 1]
        if (cx.min() < 0 or cy.min() < 0 or cx.max() >= prev.spec.map_size
                or cy.max() >= prev.spec.map_size):
            raise ValueError("NavScoreMap cell outside map grid")
        grid[cx, cy] = np.minimum(grid[cx, cy], nav.values)
    return CuriosityValueMap(prev.spec, grid)


def _disk_cells(spec: GridSpec, x: float, y: float, radius: float) -> np.ndarray:
    """Boolean (map_size, map_size) mask: cell center within radius of (x, y).

    The cell containing the point is always included, so radius 0 still
    marks where the agent stands.
    """
    mask = np.zeros((spec.map_size, spec.map_size), dtype=bool)
    r_cells = int(math.ceil(radius / spec.resolution)) + 1
    ccx, ccy = spec.world_to_cell(x, y)
    x0, x1 = max(0, ccx - r_cells), min(spec.map_size, ccx + r_cells + 1)
    y0, y1 = max(0, ccy - r_cells), min(spec.map_size, ccy + r_cells + 1)
    if x0 >= x1 or y0 >= y1:
        return mask
    cxs = spec.origin[0] + (np.arange(x0, x1) + 0.5) * spec.resolution
    cys = spec.origin[1] + (np.arange(y0, y1) + 0.5) * spec.resolution
    dx, dy = np.meshgrid(cxs - x, cys - y, indexing="ij")
    mask[x0:x1, y0:y1] = dx * dx + dy * dy <= radius * radius
    if spec.in_bounds((ccx, ccy)):
        mask[ccx, ccy] = True
    return mask


def mark_visited(cvm: CuriosityValueMap, agent_pos, r_visit: float,
                 goal_flag: bool = False) -> CuriosityValueMap:
    """Zero the disk of cells around a visited position.

    Skipped entirely while the goal flag is raised: a region known to
    contain the goal keeps its score.
    """
    if goal_flag:
        return cvm
    mask = _disk_cells(cvm.spec, float(agent_pos[0]), float(agent_pos[1]), r_visit)
    grid = cvm.grid.copy()
    grid[mask] = 0.0
    return CuriosityValueMap(cvm.spec, grid)


def direction_scores_from_map(cvm: CuriosityValueMap,
                              per_view_navigable) -> tuple[float, ...]:
    """Mean stored score over each view's navigable cells (0 for empty views)."""
    out = []
    for cells in per_view_navigable:
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
        if cells.shape[0] == 0:
            out.append(0.0)
            continue
        out.append(float(cvm.grid[cells[:, 0], cells[:, 1]].mean()))
    return tuple(out)


def argmax_direction(avg_scores, prev_view: int | None = None) -> int:
    """Index of the best direction.

    Ties go to the view closest (in 60 degree steps, circularly) to the
    previously chosen view, then to the lowest index.
    """
    n = len(avg_scores)
    if n == 0:
        raise ValueError("no direction scores")
    best = max(avg_scores)
    candidates = [i for i, v in enumerate(avg_scores) if v == best]
    if prev_view is None or len(candidates) == 1:
        return candidates[0]
    def ring_dist(i: int) -> int:
        d = abs(i - prev_view) % n
        return min(d, n - d)
    return min(candidates, key=lambda i: (ring_dist(i), i))


@dataclass
class ExploredMap:
    """Monotone record of where the agent has already been or looked.

    ``observed`` marks cells seen navigable at any past step; ``visited``
    marks cells within r_visit of any past agent position.  Action
    filtering treats their union as explored.  ``obstacles`` accumulates
    cells ever observed blocked (plus collision imprints), so obstacles
    inside the pitched camera's blind radius still constrain range walks.
    """

    spec: GridSpec
    observed: np.ndarray = None
    visited: np.ndarray = None
    obstacles: np.ndarray = None

    def __post_init__(self):
        shape = (self.spec.map_size, self.spec.map_size)
        if self.observed is None:
            self.observed = np.zeros(shape, dtype=bool)
        if self.visited is None:
            self.visited = np.zeros(shape, dtype=bool)
        if self.obstacles is None:
            self.obstacles = np.zeros(shape, dtype=bool)

    def _set_cells(self, target: np.ndarray, cells: np.ndarray) -> None:
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
        if cells.shape[0]:
            keep = ((cells[:, 0] >= 0) & (cells[:, 0] < self.spec.map_size)
                    & (cells[:, 1] >= 0) & (cells[:, 1] < self.spec.map_size))
            cells = cells[keep]
            target[cells[:, 0], cells[:, 1]] = True

    def add_observed(self, cells: np.ndarray) -> None:
        self._set_cells(self.observed, cells)

    def add_obstacles(self, cells: np.ndarray) -> None:
        self._set_cells(self.obstacles, cells)

    def add_visited(self, pos, r_visit: float) -> None:
        self.visited |= _disk_cells(self.spec, float(pos[0]), float(pos[1]), r_visit)

    def mask(self) -> np.ndarray:
        return self.observed | self.visited

    def is_explored(self, x: float, y: float) -> bool:
        cell = self.spec.world_to_cell(x, y)
        if not self.spec.in_bounds(cell):
            return False
        return bool(self.observed[cell] or self.visited[cell])


def pgm_gray(score: float) -> int:
    """Quantize a [0, 10] score to 8-bit gray (half rounds up)."""
    return int(math.floor(score * PGM_SCALE + 0.5))


def save_pgm(cvm: CuriosityValueMap, path) -> None:
    """Write the map as a plain-text P2 graymap, one pixel per cell.

    Rows run north to south (max y first) so the image reads like a map;
    columns run west to east.
    """
    n = cvm.spec.map_size
    gray = np.floor(cvm.grid * PGM_SCALE + 0.5).astype(int)
    lines = ["P2", f"{n} {n}", "255"]
    for row in range(n):
        cy = n - 1 - row
        lines.append(" ".join(str(int(v)) for v in gray[:, cy]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
