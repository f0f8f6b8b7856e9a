"""Benchmark orchestration: suites, SR/SPL aggregation, artifacts.

A suite is a JSON file ``{"name", "episodes": [paths], "config": {...}}``
with episode paths relative to the suite file.  ``run_benchmark`` runs
every episode (thread pool, deterministic aggregation), computes SR and
SPL with a per-goal-category breakdown, and writes one artifact
directory per episode plus ``results.jsonl`` and ``summary.json``.
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import NavConfig
from .curiosity_map import PGM_SCALE
from .geometry import GridSpec
from .policy import EpisodeResult, run_episode
from .simulator import Scene, SceneError, load_episode, load_scene
from .vlm import VlmBackend


@dataclass
class BenchmarkSummary:
    sr: float
    spl: float
    per_category: dict
    n_episodes: int
    results: list = field(default_factory=list, repr=False)
    suite: str = ""
    backend: str = ""
    seed: int | None = None
    wall_time: float = 0.0
    artifacts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"suite": self.suite, "backend": self.backend,
                "seed": self.seed, "n_episodes": self.n_episodes,
                "sr": self.sr, "spl": self.spl,
                "per_category": self.per_category,
                "wall_time_s": round(self.wall_time, 3),
                "episodes": [r.to_dict() for r in self.results],
                "artifacts": self.artifacts}


def _episode_spl_term(r: EpisodeResult) -> float:
    if not r.success or r.optimal_length is None:
        return 0.0
    if r.path_length <= 0.0:
        return 1.0  # stopped without moving: started inside the goal region
    return r.optimal_length / max(r.path_length, r.optimal_length)


def compute_spl(results) -> float:
    """Mean of success * optimal / max(actual, optimal) over episodes."""
    results = list(results)
    if not results:
        raise ValueError("compute_spl needs at least one episode result")
    return sum(_episode_spl_term(r) for r in results) / len(results)


def compute_sr(results) -> float:
    results = list(results)
    if not results:
        raise ValueError("compute_sr needs at least one episode result")
    return sum(1.0 for r in results if r.success) / len(results)


# ---------------------------------------------------------------------------
# Suite loading

def load_suite(path) -> tuple[str, list[str], NavConfig]:
    """Read a suite file; returns (name, absolute episode paths, config)."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise SceneError(f"{path}: unreadable suite file ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise SceneError(f"{path}: suite must be a JSON object")
    episodes = doc.get("episodes")
    if not isinstance(episodes, list) or not episodes:
        raise SceneError(f"{path}: field 'episodes' must be a nonempty list")
    base = os.path.dirname(os.path.abspath(str(path)))
    paths = []
    for i, ep in enumerate(episodes):
        if not isinstance(ep, str):
            raise SceneError(f"{path}: field 'episodes[{i}]' must be a path")
        full = os.path.normpath(os.path.join(base, ep))
        if not os.path.exists(full):
            raise SceneError(f"{path}: field 'episodes[{i}]' -> missing file "
                             f"{full}")
        paths.append(full)
    cfg_doc = doc.get("config", {})
    if not isinstance(cfg_doc, dict):
        raise SceneError(f"{path}: field 'config' must be an object")
    try:
        cfg = NavConfig.from_dict(cfg_doc)
    except (TypeError, ValueError) as exc:
        raise SceneError(f"{path}: field 'config' invalid: {exc}") from exc
    return str(doc.get("name", os.path.basename(str(path)))), paths, cfg


def _episode_dir_name(ep_path: str) -> str:
    return os.path.splitext(os.path.basename(ep_path))[0]


# ---------------------------------------------------------------------------
# Benchmark runner

def run_benchmark(suite_path, backend: VlmBackend, cfg: NavConfig | None = None,
                  out_dir=None, max_steps: int | None = None,
                  seed: int | None = None,
                  backend_name: str = "") -> BenchmarkSummary:
    """Run a whole suite and aggregate SR/SPL.

    ``cfg`` overrides the suite's embedded config entirely when given.
    Results are aggregated in episode-file order regardless of which
    worker finishes first.
    """
    name, episode_paths, suite_cfg = load_suite(suite_path)
    cfg = cfg or suite_cfg
    if max_steps is not None:
        cfg = NavConfig.from_dict({**cfg.to_dict(), "max_steps": max_steps})
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    def one(ep_path: str) -> EpisodeResult:
        episode = load_episode(ep_path)
        ep_out = None
        if out_dir is not None:
            ep_out = os.path.join(out_dir, _episode_dir_name(ep_path))
        result = run_episode(episode.scene, episode, backend, cfg,
                             out_dir=ep_out)
        result.name = _episode_dir_name(ep_path)
        if ep_out is not None:
            meta = {"episode_path": os.path.abspath(ep_path),
                    "scene_path": os.path.abspath(episode.scene_path)
                    if episode.scene_path else None,
                    "map_size": cfg.map_size, "resolution": cfg.resolution,
                    "result": result.to_dict()}
            with open(os.path.join(ep_out, "meta.json"), "w") as fh:
                json.dump(meta, fh, indent=1)
        return result

    t0 = time.time()
    workers = min(cfg.effective_workers(), len(episode_paths))
    if workers <= 1:
        results = [one(p) for p in episode_paths]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, episode_paths))
    wall = time.time() - t0

    summary = summarize(results, suite=name, backend=backend_name, seed=seed)
    summary.wall_time = wall

    if out_dir is not None:
        results_path = os.path.join(out_dir, "results.jsonl")
        with open(results_path, "w") as fh:
            for r in results:
                fh.write(json.dumps(r.to_dict()) + "\n")
        summary.artifacts["results"] = results_path
        for r, p in zip(results, episode_paths):
            ep_out = os.path.join(out_dir, _episode_dir_name(p))
            traj = os.path.join(ep_out, "trajectory.jsonl")
            if os.path.exists(traj):
                summary.artifacts[f"{r.name}/trajectory"] = traj
            if cfg.snapshots != "off" and r.steps:
                pgm = os.path.join(ep_out, f"cvm_step{r.steps - 1}.pgm")
                if os.path.exists(pgm):
                    summary.artifacts[f"{r.name}/cvm"] = pgm
        summary_path = os.path.join(out_dir, "summary.json")
        with open(summary_path, "w") as fh:
            json.dump(summary.to_dict(), fh, indent=1)
        summary.artifacts["summary"] = summary_path
    return summary


def summarize(results, suite: str = "", backend: str = "",
              seed: int | None = None) -> BenchmarkSummary:
    results = sorted(results, key=lambda r: r.name)
    by_cat: dict[str, list] = {}
    for r in results:
        by_cat.setdefault(r.goal_category or "?", []).append(r)
    per_category = {cat: {"episodes": len(rs), "sr": compute_sr(rs),
                          "spl": compute_spl(rs)}
                    for cat, rs in sorted(by_cat.items())}
    return BenchmarkSummary(sr=compute_sr(results), spl=compute_spl(results),
                            per_category=per_category,
                            n_episodes=len(results), results=results,
                            suite=suite, backend=backend, seed=seed)


# ---------------------------------------------------------------------------
# Trajectory snapshot imagery

def _stamp_disk(img: np.ndarray, grid: GridSpec, x: float, y: float,
                radius: float, color) -> None:
    n = grid.map_size
    cx, cy = grid.world_to_cell(x, y)
    r = max(1, int(round(radius / grid.resolution)))
    for ix in range(max(0, cx - r), min(n, cx + r + 1)):
        for iy in range(max(0, cy - r), min(n, cy + r + 1)):
            if (ix - cx) ** 2 + (iy - cy) ** 2 <= r * r:
                img[ix, iy] = color


def _stamp_line(img: np.ndarray, grid: GridSpec, a, b, color) -> None:
    n = grid.map_size
    steps = max(2, int(math.hypot(b[0] - a[0], b[1] - a[1])
                       / (grid.resolution * 0.5)) + 1)
    for t in np.linspace(0.0, 1.0, steps):
        x = a[0] + t * (b[0] - a[0])
        y = a[1] + t * (b[1] - a[1])
        cx, cy = grid.world_to_cell(x, y)
        if 0 <= cx < n and 0 <= cy < n:
            img[cx, cy] = color


def emit_trajectory_snapshot(result: EpisodeResult, scene: Scene, path,
                             grid: GridSpec | None = None) -> str:
    """Write a top-down P3 PPM: CVM gray base, walls, path, goal, stop.

    Uncovered pixels carry the curiosity map's export gray
    (round(score * 25.5)); walls are black, the trajectory blue, goal
    instances green, and the final position orange.
    """
    if grid is None:
        if result.cvm is None:
            raise ValueError("need a grid spec or a result with a map")
        grid = result.cvm.spec
    n = grid.map_size
    img = np.zeros((n, n, 3), dtype=np.uint8)
    if result.cvm is not None:
        gray = np.floor(result.cvm.grid * PGM_SCALE + 0.5).astype(np.uint8)
    else:
        gray = np.zeros((n, n), dtype=np.uint8)
    img[:, :, 0] = img[:, :, 1] = img[:, :, 2] = gray

    for seg in scene.collision_segments():
        _stamp_line(img, grid, (seg.x0, seg.y0), (seg.x1, seg.y1), (0, 0, 0))
    for i in range(len(result.trajectory) - 1):
        a, b = result.trajectory[i], result.trajectory[i + 1]
        _stamp_line(img, grid, a, b, (60, 90, 230))
    for obj in scene.instances_of(result.goal_category):
        _stamp_disk(img, grid, obj.x, obj.y, obj.radius, (40, 180, 70))
    if result.final_pose:
        _stamp_disk(img, grid, result.final_pose[0], result.final_pose[1],
                    0.15, (240, 140, 20))

    lines = ["P3", f"{n} {n}", "255"]
    for row in range(n):
        cy = n - 1 - row
        vals = img[:, cy, :].reshape(-1)
        lines.append(" ".join(str(int(v)) for v in vals))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return str(path)


def load_results_jsonl(path) -> list[EpisodeResult]:
    """Rehydrate results written by run_benchmark for offline SPL math."""
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            out.append(EpisodeResult(
                success=bool(d["success"]),
                path_length=float(d["path_length"]),
                optimal_length=(None if d.get("optimal_length") is None
                                else float(d["optimal_length"])),
                steps=int(d.get("steps", 0)),
                failure_reason=d.get("failure_reason"),
                name=d.get("name", "episode"),
                goal_category=d.get("goal_category", ""),
                stopped=bool(d.get("stopped", False)),
                final_pose=tuple(d.get("final_pose", ()))))
    return out
