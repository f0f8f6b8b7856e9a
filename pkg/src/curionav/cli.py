"""Command-line entry points: run a suite, recompute SPL, draw snapshots."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import NavConfig
from .curiosity_map import CuriosityValueMap, PGM_SCALE
from .geometry import GridSpec
from .harness import (compute_spl, compute_sr, emit_trajectory_snapshot,
                      load_results_jsonl, run_benchmark)
from .policy import EpisodeResult
from .simulator import SceneError, load_scene
from .vlm import HttpBackend, OracleBackend, RecordingBackend, ReplayBackend


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="curionav",
                                description="object-goal navigation benchmark")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a benchmark suite")
    run.add_argument("--suite", required=True, help="suite JSON file")
    run.add_argument("--backend", required=True,
                     choices=["oracle", "http", "replay"])
    run.add_argument("--out", required=True, help="artifact directory")
    run.add_argument("--max-steps", type=int, default=None)
    run.add_argument("--log-vlm", action="store_true",
                     help="record every VLM request/response")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--config", default=None,
                     help="JSON config overriding the suite's")
    run.add_argument("--workers", type=int, default=None)
    run.add_argument("--http-url", default=None,
                     help="chat-completion base URL (http backend)")
    run.add_argument("--http-model", default=None,
                     help="model id (http backend)")
    run.add_argument("--replay-file", default=None,
                     help="recorded responses JSONL (replay backend)")

    spl = sub.add_parser("spl", help="recompute SR/SPL from results.jsonl")
    spl.add_argument("--results", required=True)

    snap = sub.add_parser("snapshot", help="render a trajectory image")
    snap.add_argument("--episode", required=True,
                      help="episode artifact directory (or its "
                           "trajectory.jsonl)")
    snap.add_argument("--out", default=None, help="output PPM path")
    return p


def _make_backend(args, out_dir: str):
    if args.backend == "oracle":
        backend = OracleBackend()
    elif args.backend == "http":
        if not args.http_url or not args.http_model:
            raise SystemExit("http backend needs --http-url and --http-model "
                             f"(API key from ${HttpBackend.API_KEY_ENV})")
        log = os.path.join(out_dir, "vlm_log.jsonl") if args.log_vlm else None
        backend = HttpBackend(args.http_url, args.http_model, log_path=log)
    else:
        if not args.replay_file:
            raise SystemExit("replay backend needs --replay-file")
        backend = ReplayBackend(args.replay_file)
    if args.log_vlm:
        backend = RecordingBackend(backend,
                                   os.path.join(out_dir, "vlm_records.jsonl"))
    return backend


def _cmd_run(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    backend = _make_backend(args, args.out)
    cfg = None
    if args.config is not None:
        cfg = NavConfig.from_json(args.config)
    if args.workers is not None:
        base = cfg.to_dict() if cfg else NavConfig().to_dict()
        base["workers"] = args.workers
        cfg = NavConfig.from_dict(base)
    try:
        summary = run_benchmark(args.suite, backend, cfg=cfg,
                                out_dir=args.out, max_steps=args.max_steps,
                                seed=args.seed, backend_name=args.backend)
    except SceneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"suite={summary.suite} episodes={summary.n_episodes} "
          f"SR={summary.sr:.3f} SPL={summary.spl:.3f} "
          f"time={summary.wall_time:.1f}s")
    for cat, stats in summary.per_category.items():
        print(f"  {cat}: n={stats['episodes']} SR={stats['sr']:.3f} "
              f"SPL={stats['spl']:.3f}")
    print(f"artifacts: {os.path.join(args.out, 'summary.json')}")
    return 0


def _cmd_spl(args) -> int:
    try:
        results = load_results_jsonl(args.results)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {args.results}: {exc}", file=sys.stderr)
        return 2
    if not results:
        print(f"error: {args.results}: no results", file=sys.stderr)
        return 2
    print(f"episodes={len(results)} SR={compute_sr(results):.4f} "
          f"SPL={compute_spl(results):.4f}")
    return 0


def _read_pgm_scores(path) -> np.ndarray:
    with open(path) as fh:
        tokens = fh.read().split()
    if not tokens or tokens[0] != "P2":
        raise ValueError(f"{path}: not a P2 graymap")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    vals = np.array(tokens[4:4 + w * h], dtype=np.float64)
    if vals.size != w * h:
        raise ValueError(f"{path}: truncated graymap")
    grid = np.empty((w, h))
    img = vals.reshape(h, w)
    for row in range(h):
        grid[:, h - 1 - row] = img[row]
    return grid / PGM_SCALE


def _cmd_snapshot(args) -> int:
    ep_dir = args.episode
    if os.path.isfile(ep_dir):
        ep_dir = os.path.dirname(os.path.abspath(ep_dir))
    meta_path = os.path.join(ep_dir, "meta.json")
    try:
        with open(meta_path) as fh:
            meta = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {meta_path}: {exc}", file=sys.stderr)
        return 2
    try:
        scene = load_scene(meta["scene_path"])
    except (KeyError, SceneError) as exc:
        print(f"error: {meta_path}: cannot load scene ({exc})",
              file=sys.stderr)
        return 2
    rd = meta.get("result", {})
    grid = GridSpec(int(meta.get("map_size", 400)),
                    float(meta.get("resolution", 0.1)))

    trajectory = []
    traj_path = os.path.join(ep_dir, "trajectory.jsonl")
    if os.path.exists(traj_path):
        with open(traj_path) as fh:
            for line in fh:
                rec = json.loads(line)
                pose = rec.get("pose", {})
                trajectory.append((pose.get("x", 0.0), pose.get("y", 0.0),
                                   pose.get("yaw", 0.0)))
    if rd.get("final_pose"):
        trajectory.append(tuple(rd["final_pose"]))

    cvm = None
    steps = int(rd.get("steps", 0))
    pgm = os.path.join(ep_dir, f"cvm_step{steps - 1}.pgm") if steps else None
    if pgm and os.path.exists(pgm):
        try:
            cvm = CuriosityValueMap(grid, _read_pgm_scores(pgm))
        except ValueError as exc:
            print(f"warning: ignoring map snapshot ({exc})", file=sys.stderr)

    result = EpisodeResult(
        success=bool(rd.get("success", False)),
        path_length=float(rd.get("path_length", 0.0)),
        optimal_length=rd.get("optimal_length"),
        steps=steps, failure_reason=rd.get("failure_reason"),
        name=rd.get("name", os.path.basename(ep_dir)),
        goal_category=rd.get("goal_category", ""),
        stopped=bool(rd.get("stopped", False)),
        final_pose=tuple(rd.get("final_pose", ())),
        trajectory=trajectory, cvm=cvm)

    out = args.out or os.path.join(ep_dir, "snapshot.ppm")
    emit_trajectory_snapshot(result, scene, out, grid=grid)
    print(out)
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "spl":
        return _cmd_spl(args)
    return _cmd_snapshot(args)


if __name__ == "__main__":
    sys.exit(main())
