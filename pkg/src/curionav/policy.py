"""Navigation control loop: look around, score directions, plan, act.

One step: capture a six-view panorama, have the predictor score the six
directions, fold the scores into the curiosity value map (min-merge +
visited-disk zeroing), pick the best direction from map averages, ask
the planner for a subtask and goal flag, sample candidate polar motions
in the chosen view (capped sparse sampling while exploring, dense
uncapped sampling once the goal flag is up), let the reasoner pick one
marker, execute it, and stop when the agent believes it is within
``d_thres`` of its estimated goal point.

The loop never deadlocks on a misbehaving backend: parse failures fall
back (uniform scores / previous subtask / middle marker) and empty views
fall back to the next-best direction, so a garbage backend still walks
the episode to its step budget.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_dilation

from .config import NavConfig
from .curiosity_map import (CuriosityValueMap, ExploredMap, argmax_direction,
                            direction_scores_from_map, init_map, mark_visited,
                            merge, project_scores, save_pgm)
from .geometry import (PANORAMA_VIEW_OFFSETS, GridSpec, Pose, CameraModel,
                       depth_to_world_points, navigable_cells, occupied_cells,
                       world_to_pixel, wrap_pi)
from .simulator import (AgentBody, Episode, PolarAction, Scene, execute_action,
                        judge_success, optimal_path_length, render)
from .vlm import (BackendError, Cost, ParseFailure, PromptBundle, VlmBackend,
                  STAGE_EXPLORATION, STAGE_GOAL, annotate_markers,
                  build_plan_prompt, build_predict_prompt, build_reason_prompt,
                  color_legend, compose_panorama, initial_cost, parse_action,
                  parse_plan, parse_prediction, semantic_to_rgb, VIEW_LABELS)


class EmptyNavigable(Exception):
    """The chosen view exposes no walkable floor to sample actions from."""


@dataclass
class ViewData:
    """One panorama strip: rendering, its pose, and its projected cells."""

    pose: Pose
    depth: np.ndarray
    semantic: np.ndarray
    rgb: np.ndarray
    nav_cells: np.ndarray  # (N, 2) map cells observed navigable
    occ_cells: np.ndarray  # (N, 2) map cells observed blocked


@dataclass
class Panorama:
    views: list
    composite: np.ndarray

    @property
    def per_view_cells(self):
        return [v.nav_cells for v in self.views]


@dataclass(frozen=True)
class CandidateSet:
    """Ordered candidate motions; marker i labels actions[i] in the image."""

    stage: str
    actions: tuple  # PolarAction, agent-relative theta
    endpoints: np.ndarray  # (K', 2) world coordinates
    bearings: tuple  # absolute world bearings, one per action

    def __len__(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class StopDecision:
    stop: bool
    distance_to_goal: float


@dataclass
class EpisodeResult:
    success: bool
    path_length: float
    optimal_length: float | None
    steps: int
    failure_reason: str | None  # budget | error | unreachable | missed | None
    name: str = "episode"
    goal_category: str = ""
    stopped: bool = False
    final_pose: tuple = ()
    trajectory: list = field(default_factory=list)
    error_message: str = ""
    cvm: CuriosityValueMap | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"name": self.name, "goal_category": self.goal_category,
                "success": self.success, "path_length": self.path_length,
                "optimal_length": self.optimal_length, "steps": self.steps,
                "failure_reason": self.failure_reason, "stopped": self.stopped,
                "final_pose": list(self.final_pose),
                "error_message": self.error_message}


# ---------------------------------------------------------------------------
# Panorama capture

def capture_panorama(scene: Scene, pose: Pose, cam: CameraModel,
                     grid: GridSpec, body: AgentBody | None = None,
                     stride: int = 1) -> Panorama:
    """Render the six rotated views and project each one's floor cells."""
    body = body or AgentBody()
    views = []
    for offset in PANORAMA_VIEW_OFFSETS:
        vpose = Pose(pose.x, pose.y, pose.z, pose.yaw + offset)
        obs = render(scene, vpose, cam)
        points = depth_to_world_points(obs.depth, cam, vpose, stride=stride)
        nav = navigable_cells(points, grid, clearance_height=body.height)
        occ = occupied_cells(points, grid, clearance_height=body.height)
        rgb = semantic_to_rgb(obs.semantic, obs.depth)
        views.append(ViewData(vpose, obs.depth, obs.semantic, rgb, nav, occ))
    composite = compose_panorama([v.rgb for v in views])
    return Panorama(views, composite)


# ---------------------------------------------------------------------------
# World-model update and direction choice

def _query_with_retries(backend: VlmBackend, bundle: PromptBundle, parse,
                        retries: int):
    """Query/parse up to ``retries`` times; raises the last ParseFailure."""
    last: ParseFailure | None = None
    for _ in range(max(1, retries)):
        raw = backend.query(bundle)
        try:
            return parse(raw)
        except ParseFailure as exc:
            last = exc
    raise last


def world_model_step(backend: VlmBackend, pano: Panorama, cvm: CuriosityValueMap,
                     pose: Pose, goal: str, cfg: NavConfig, scene: Scene,
                     cam: CameraModel, prev_view: int | None = None,
                     suppress_visited: bool = False, legend: str = ""):
    """Predict -> project -> merge -> zero visited -> average -> argmax.

    Returns (updated map, chosen view index, averaged scores, raw scores).
    A predictor that never parses falls back to uniform 5s, which leaves
    the decision to the map memory alone.
    """
    grid = cvm.spec
    context = {"scene": scene, "goal": goal, "cam": cam,
               "view_poses": [v.pose for v in pano.views],
               "per_view_xy": [grid.cell_centers(v.nav_cells)
                               if len(v.nav_cells) else np.empty((0, 2))
                               for v in pano.views]}
    bundle = build_predict_prompt(pano.composite, goal, legend=legend,
                                  context=context)
    try:
        scores = _query_with_retries(backend, bundle, parse_prediction,
                                     cfg.parse_retries).scores
    except ParseFailure:
        scores = (5,) * len(pano.views)
    nav = project_scores(scores, pano.per_view_cells)
    updated = merge(cvm, nav)
    updated = mark_visited(updated, pose.xy, cfg.r_visit,
                           goal_flag=suppress_visited)
    avg = direction_scores_from_map(updated, pano.per_view_cells)
    alpha = argmax_direction(avg, prev_view)
    return updated, alpha, avg, scores


def plan_step(backend: VlmBackend, view: ViewData, cost: Cost, goal: str,
              cfg: NavConfig, scene: Scene, cam: CameraModel,
              selection_explanation: str = "", legend: str = "",
              commit_probe=None) -> Cost:
    """Ask the planner for the next subtask + goal flag; keep the old
    subtask (flag down) when the response never parses."""
    context = {"scene": scene, "goal": goal, "cam": cam, "view_pose": view.pose,
               "commit_probe": commit_probe}
    bundle = build_plan_prompt(view.rgb, cost, goal,
                               selection_explanation=selection_explanation,
                               legend=legend, context=context)
    try:
        plan = _query_with_retries(backend, bundle, parse_plan,
                                   cfg.parse_retries)
    except ParseFailure:
        return Cost(cost.prev_subtask, False)
    return Cost(plan.subtask, plan.goal_flag)


# ---------------------------------------------------------------------------
# Action proposal

def _cells_to_mask(cells: np.ndarray, grid: GridSpec) -> np.ndarray:
    mask = np.zeros((grid.map_size, grid.map_size), dtype=bool)
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    if cells.shape[0]:
        keep = grid.clip_mask(cells)
        cells = cells[keep]
        mask[cells[:, 0], cells[:, 1]] = True
    return mask


def _seed_mask(grid: GridSpec, pose: Pose, radius: float) -> np.ndarray:
    """Cells near the agent count as walkable: the pitched camera cannot
    see the floor it is standing on."""
    n = grid.map_size
    cx, cy = grid.world_to_cell(pose.x, pose.y)
    r_cells = int(math.ceil(radius / grid.resolution)) + 1
    mask = np.zeros((n, n), dtype=bool)
    x0, x1 = max(0, cx - r_cells), min(n, cx + r_cells + 1)
    y0, y1 = max(0, cy - r_cells), min(n, cy + r_cells + 1)
    if x0 >= x1 or y0 >= y1:
        return mask
    xs = grid.origin[0] + (np.arange(x0, x1) + 0.5) * grid.resolution
    ys = grid.origin[1] + (np.arange(y0, y1) + 0.5) * grid.resolution
    dx, dy = np.meshgrid(xs - pose.x, ys - pose.y, indexing="ij")
    mask[x0:x1, y0:y1] = dx * dx + dy * dy <= radius * radius
    return mask


def _disk_structure(r_cells: int) -> np.ndarray:
    n = 2 * r_cells + 1
    yy, xx = np.mgrid[-r_cells:r_cells + 1, -r_cells:r_cells + 1]
    return xx * xx + yy * yy <= r_cells * r_cells


def _walk_masks(view: ViewData, pose: Pose, cfg: NavConfig, grid: GridSpec,
                body: AgentBody, extra_occ: np.ndarray | None = None):
    """(walkable, blocked) grids for range walks.

    Observed obstacles are inflated by the body radius so sampled motions
    keep executable clearance; without this an agent can forever pick
    bearings that graze a wall corner and truncate to zero movement.
    Cells under the agent's own footprint stay passable (it is standing
    there), and cells near the agent count as walkable because the
    pitched camera cannot see them.  ``extra_occ`` folds in remembered
    obstacles that the current view cannot see (blind-radius blockers).
    """
    nav = (_cells_to_mask(view.nav_cells, grid)
           | _seed_mask(grid, pose, cfg.seed_radius))
    occ = _cells_to_mask(view.occ_cells, grid)
    if extra_occ is not None:
        occ = occ | extra_occ
    r_cells = max(1, int(math.ceil(body.radius / grid.resolution)))
    inflated = binary_dilation(occ, structure=_disk_structure(r_cells))
    footprint = _seed_mask(grid, pose, body.radius + grid.resolution)
    blocked = occ | (inflated & ~footprint)
    return nav & ~blocked, blocked


def _free_range(pose: Pose, bearing: float, walkable: np.ndarray,
                blocked: np.ndarray, grid: GridSpec, max_r: float,
                bridge: float = 0.0) -> float:
    """Longest distance along ``bearing`` over observed-walkable cells.

    The walk may cross up to ``bridge`` meters of unobserved cells (row
    gaps in the floor projection at long range) but never a cell observed
    blocked, and the returned range always ends on a walkable cell.
    """
    step = grid.resolution * 0.5
    dx, dy = math.cos(bearing), math.sin(bearing)
    n = grid.map_size
    good = 0.0
    gap = 0.0
    t = step
    while t <= max_r + 1e-9:
        cx = int(math.floor((pose.x + t * dx - grid.origin[0]) / grid.resolution))
        cy = int(math.floor((pose.y + t * dy - grid.origin[1]) / grid.resolution))
        if not (0 <= cx < n and 0 <= cy < n):
            break
        if blocked[cx, cy]:
            break
        if walkable[cx, cy]:
            good = t
            gap = 0.0
        else:
            gap += step
            if gap > bridge + 1e-9:
                break
        t += step
    return min(good, max_r)


def _bearing_offsets(hfov: float, spacing: float) -> np.ndarray:
    """Bearing offsets covering (-hfov/2, hfov/2) at the given spacing."""
    k = max(1, int(hfov / spacing))
    return (np.arange(k) + 0.5) * spacing - hfov / 2.0


def propose_actions(view: ViewData, pose: Pose, explored: ExploredMap,
                    cfg: NavConfig, grid: GridSpec,
                    body: AgentBody | None = None,
                    extra_occ: np.ndarray | None = None) -> CandidateSet:
    """Exploration-stage sampling: K capped bearings, explored endpoints
    dropped, greedy minimum angular separation.

    Fallback ladder when filtering removes everything: longest action
    with an unexplored endpoint, else longest overall.  Ranges below
    ``r_min`` never survive any stage (sub-clearance hops wedge the agent
    into pockets it cannot sample its way out of); a view with nothing
    at least that long raises EmptyNavigable.
    """
    hfov = math.radians(cfg.hfov_deg)
    spacing = hfov / cfg.num_bearings
    offsets = _bearing_offsets(hfov, spacing)
    walkable, blocked = _walk_masks(view, pose, cfg, grid, body or AgentBody(),
                                    extra_occ)

    raw = []  # (r, bearing, endpoint, unexplored)
    emask = explored.mask()
    for off in offsets:
        bearing = view.pose.yaw + off
        r = _free_range(pose, bearing, walkable, blocked, grid, cfg.r_max)
        if r < cfg.r_min:
            continue
        end = (pose.x + r * math.cos(bearing), pose.y + r * math.sin(bearing))
        cell = grid.world_to_cell(*end)
        unexplored = not (grid.in_bounds(cell) and emask[cell])
        raw.append((r, bearing, end, unexplored))
    if not raw:
        raise EmptyNavigable("no walkable range in this view")

    candidates = [c for c in raw if c[3]]
    # greedy spacing, longest first
    min_sep = math.radians(cfg.delta_theta_min_deg)
    accepted = []
    for cand in sorted(candidates, key=lambda c: -c[0]):
        if all(abs(wrap_pi(cand[1] - a[1])) >= min_sep - 1e-12 for a in accepted):
            accepted.append(cand)
    if not accepted:
        unexplored = [c for c in raw if c[3]]
        pool = unexplored or raw
        accepted = [max(pool, key=lambda c: c[0])]
    accepted.sort(key=lambda c: -wrap_pi(c[1] - pose.yaw))  # image left-to-right
    return CandidateSet(
        STAGE_EXPLORATION,
        tuple(PolarAction(c[0], wrap_pi(c[1] - pose.yaw)) for c in accepted),
        np.array([c[2] for c in accepted]),
        tuple(c[1] for c in accepted))


def propose_goal_actions(view: ViewData, pose: Pose, cfg: NavConfig,
                         grid: GridSpec, body: AgentBody | None = None,
                         extra_occ: np.ndarray | None = None) -> CandidateSet:
    """Goal-stage sampling: dense bearings, no range cap, no endpoint
    filtering (only the universal ``r_min`` floor applies)."""
    hfov = math.radians(cfg.hfov_deg)
    offsets = _bearing_offsets(hfov, math.radians(cfg.delta_theta_dense_deg))
    walkable, blocked = _walk_masks(view, pose, cfg, grid, body or AgentBody(),
                                    extra_occ)
    max_r = grid.map_size * grid.resolution  # no cap: bounded by map extent

    kept = []
    for off in offsets:
        bearing = view.pose.yaw + off
        r = _free_range(pose, bearing, walkable, blocked, grid, max_r,
                        bridge=cfg.goal_gap_bridge)
        if r < cfg.r_min:
            continue
        end = (pose.x + r * math.cos(bearing), pose.y + r * math.sin(bearing))
        kept.append((r, bearing, end))
    if not kept:
        raise EmptyNavigable("no walkable range in this view")
    kept.sort(key=lambda c: -wrap_pi(c[1] - pose.yaw))
    return CandidateSet(
        STAGE_GOAL,
        tuple(PolarAction(c[0], wrap_pi(c[1] - pose.yaw)) for c in kept),
        np.array([c[2] for c in kept]),
        tuple(c[1] for c in kept))


# ---------------------------------------------------------------------------
# Action choice and stopping

def reason_step(backend: VlmBackend, candidates: CandidateSet, view: ViewData,
                cost: Cost, subtask: str, goal: str, cfg: NavConfig,
                scene: Scene, cam: CameraModel, legend: str = ""):
    """Draw numbered markers, ask the reasoner, return (action, endpoint).

    Unparseable or out-of-range answers fall back to the middle marker
    after the retry budget.
    """
    pixels = []
    for ex, ey in candidates.endpoints:
        px = world_to_pixel((ex, ey, 0.0), cam, view.pose, clamp=True)
        pixels.append(px if px is not None else (cam.width / 2.0, cam.height - 1.0))
    annotated = annotate_markers(view.rgb, pixels)
    context = {"scene": scene, "goal": goal, "stage": candidates.stage,
               "endpoints": np.asarray(candidates.endpoints)}
    bundle = build_reason_prompt(annotated, subtask, cost, candidates.stage,
                                 goal_category=goal,
                                 num_actions=len(candidates), legend=legend,
                                 context=context)
    try:
        idx = _query_with_retries(
            backend, bundle,
            lambda raw: parse_action(raw, len(candidates)),
            cfg.parse_retries).index
    except ParseFailure:
        idx = len(candidates) // 2
    return candidates.actions[idx], tuple(candidates.endpoints[idx])


def _goal_commit_probe(scene: Scene, goal: str, view: ViewData, pose: Pose,
                       cfg: NavConfig, grid: GridSpec, body: AgentBody,
                       extra_occ: np.ndarray):
    """Closure for the scripted oracle: True iff the dense goal-stage
    proposals this view would produce include a marker strictly inside the
    success region, i.e. raising the goal flag now cannot end in a miss.
    Learned backends receive it in the prompt context and ignore it."""
    def probe() -> bool:
        try:
            cand = propose_goal_actions(view, pose, cfg, grid, body, extra_occ)
        except EmptyNavigable:
            return False
        instances = scene.instances_of(goal)
        return any(math.hypot(ex - o.x, ey - o.y) < cfg.d_thres - 0.02
                   for ex, ey in cand.endpoints for o in instances)
    return probe


def check_stop(pose: Pose, estimated_goal, d_thres: float) -> StopDecision:
    """Stop iff the planar distance to the estimated goal is strictly
    below the threshold; no estimate means keep going."""
    if estimated_goal is None:
        return StopDecision(False, math.inf)
    d = math.hypot(pose.x - estimated_goal[0], pose.y - estimated_goal[1])
    return StopDecision(d < d_thres, d)


# ---------------------------------------------------------------------------
# Episode runner

def run_episode(scene: Scene, episode: Episode, backend: VlmBackend,
                cfg: NavConfig | None = None, out_dir=None,
                body: AgentBody | None = None, on_step=None) -> EpisodeResult:
    """Run the full loop to stop or budget; never raises on backend trouble.

    When ``out_dir`` is given, writes ``trajectory.jsonl`` and curiosity
    map snapshots (``cvm_step{t}.pgm``) controlled by ``cfg.snapshots``.
    ``on_step(t, cvm, pose)`` is called after each completed step.
    """
    cfg = cfg or NavConfig()
    body = body or AgentBody()
    cam = cfg.camera()
    grid = cfg.grid()
    goal = episode.goal_category
    max_steps = min(cfg.max_steps, episode.max_steps)

    pose = Pose(episode.start.x, episode.start.y, body.camera_height,
                episode.start.yaw)
    optimal = optimal_path_length(scene, (pose.x, pose.y), goal, body,
                                  cfg.d_thres, cfg.resolution)
    legend = color_legend(scene.category_ids)

    cvm = init_map(grid)
    explored = ExploredMap(grid)
    explored.add_visited((pose.x, pose.y), cfg.r_visit)
    cost = initial_cost(goal)
    stage = STAGE_EXPLORATION
    estimated_goal = None
    prev_alpha = None
    path_length = 0.0
    stopped = False
    error_message = ""
    records = []
    trajectory = [(pose.x, pose.y, pose.yaw)]
    steps = 0

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    for t in range(max_steps):
        try:
            pano = capture_panorama(scene, pose, cam, grid, body,
                                    stride=cfg.depth_stride)
            cvm, alpha, avg, scores = world_model_step(
                backend, pano, cvm, pose, goal, cfg, scene, cam,
                prev_view=prev_alpha, suppress_visited=(stage == STAGE_GOAL),
                legend=legend)
            explanation = (f"direction {VIEW_LABELS[alpha]} has the highest "
                           f"average curiosity ({avg[alpha]:.1f})")
            probe = _goal_commit_probe(scene, goal, pano.views[alpha], pose,
                                       cfg, grid, body, explored.obstacles)
            cost = plan_step(backend, pano.views[alpha], cost, goal, cfg,
                             scene, cam, selection_explanation=explanation,
                             legend=legend, commit_probe=probe)
            # the stage tracks the current flag: losing sight of the goal
            # resumes exploration instead of stopping at a stale estimate
            stage = STAGE_GOAL if cost.goal_flag else STAGE_EXPLORATION

            candidates = None
            order = [alpha] + [i for i in np.argsort(avg)[::-1]
                               if i != alpha]
            for a in order:
                try:
                    if stage == STAGE_GOAL:
                        candidates = propose_goal_actions(
                            pano.views[a], pose, cfg, grid, body,
                            explored.obstacles)
                    else:
                        candidates = propose_actions(
                            pano.views[a], pose, explored, cfg, grid, body,
                            explored.obstacles)
                    alpha = int(a)
                    break
                except EmptyNavigable:
                    continue

            if candidates is None:
                # nothing walkable anywhere: rotate and burn the step
                action = PolarAction(0.0, math.pi / 3.0)
                endpoint = None
            else:
                action, endpoint = reason_step(
                    backend, candidates, pano.views[alpha], cost,
                    cost.prev_subtask, goal, cfg, scene, cam, legend=legend)
            if stage == STAGE_GOAL and endpoint is not None:
                estimated_goal = endpoint

            new_pose = execute_action(scene, pose, action, body)
            moved = math.hypot(new_pose.x - pose.x, new_pose.y - pose.y)
            path_length += moved
            if action.r > 0.0 and moved + 1e-9 < min(action.r, grid.resolution):
                # walked into something no view can see (blind radius):
                # imprint a cell block at the contact so later walks cannot
                # slip past it on a neighboring bearing
                heading = pose.yaw + action.theta
                reach = moved + body.radius + 0.5 * grid.resolution
                cx, cy = grid.world_to_cell(pose.x + reach * math.cos(heading),
                                            pose.y + reach * math.sin(heading))
                block = [(cx + dx, cy + dy)
                         for dx in (-1, 0, 1) for dy in (-1, 0, 1)]
                explored.add_obstacles(np.array(block))
            all_nav = [v.nav_cells for v in pano.views if len(v.nav_cells)]
            if all_nav:
                explored.add_observed(np.concatenate(all_nav))
            all_occ = [v.occ_cells for v in pano.views if len(v.occ_cells)]
            if all_occ:
                explored.add_obstacles(np.concatenate(all_occ))
            explored.add_visited((new_pose.x, new_pose.y), cfg.r_visit)
            prev_alpha = alpha
            steps = t + 1

            stop = check_stop(new_pose,
                              estimated_goal if stage == STAGE_GOAL else None,
                              cfg.d_thres)
            records.append({
                "step": t,
                "pose": {"x": pose.x, "y": pose.y, "yaw": pose.yaw},
                "scores": [int(s) for s in scores],
                "avg_scores": [round(float(v), 4) for v in avg],
                "alpha": int(alpha),
                "subtask": cost.prev_subtask,
                "goal_flag": bool(cost.goal_flag),
                "stage": stage,
                "action": {"r": action.r, "theta": action.theta},
                "stop": bool(stop.stop),
            })
            pose = new_pose
            trajectory.append((pose.x, pose.y, pose.yaw))
            if on_step is not None:
                on_step(t, cvm, pose)
            if out_dir is not None and cfg.snapshots == "all":
                save_pgm(cvm, os.path.join(out_dir, f"cvm_step{t}.pgm"))
            if stop.stop:
                stopped = True
                break
        except BackendError as exc:
            error_message = str(exc)
            break

    success = stopped and judge_success(episode, pose, cfg.d_thres)
    if success:
        reason = None
    elif error_message:
        reason = "error"
    elif not stopped:
        reason = "unreachable" if optimal is None else "budget"
    else:
        reason = "missed"  # stopped, but not at the goal

    if out_dir is not None:
        with open(os.path.join(out_dir, "trajectory.jsonl"), "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
        if cfg.snapshots != "off" and steps:
            save_pgm(cvm, os.path.join(out_dir, f"cvm_step{steps - 1}.pgm"))

    return EpisodeResult(
        success=success, path_length=path_length, optimal_length=optimal,
        steps=steps, failure_reason=reason, name=episode.name,
        goal_category=goal, stopped=stopped,
        final_pose=(pose.x, pose.y, pose.yaw),
        trajectory=trajectory, error_message=error_message, cvm=cvm)
