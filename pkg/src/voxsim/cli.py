"""Command-line entry point chaining the pipeline stages.

Subcommands mirror the stages: synth, fuse, topo, lanes, spawn, simulate,
metrics, and a pipeline command running all of them end to end with a single
root seed. Exit codes: 0 success, 2 config error, 3 stage failure, 4 I/O
error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import agents as agents_mod
from . import fusion as fusion_mod
from . import lanes as lanes_mod
from . import metrics as metrics_mod
from . import occupancy, synthworld, topology
from .geometry import Pose2, Trajectory, load_trajectory, save_trajectory
from .simulation import SimParams, IdmParams, Simulator

log = logging.getLogger("voxsim")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_IO = 4


class ConfigError(Exception):
    pass


def stage_seed(root_seed: int, stage: str) -> int:
    """Deterministic per-stage sub-seed: stage reordering cannot leak RNG
    state between stages."""
    digest = hashlib.sha256(f"{root_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def worker_cap() -> int:
    try:
        return max(1, int(os.environ.get("OCCSIM_THREADS", "1")))
    except ValueError:
        return 1


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --- stage implementations --------------------------------------------------

def run_synth(cfg: dict, seed: int, out_dir: Path) -> dict:
    spec = synthworld.WorldSpec.from_json({**cfg.get("world", {}), "seed": seed % (2 ** 31)})
    world = synthworld.generate_world(spec)
    traj_cfg = cfg.get("trajectory", {})
    if "path" in traj_cfg:
        traj = load_trajectory(traj_cfg["path"])
        poses = traj.poses
    elif spec.recipe == "curve":
        poses = synthworld.curve_trajectory(spec, step=traj_cfg.get("step", 3.0))
    else:
        poses = synthworld.straight_trajectory(spec, step=traj_cfg.get("step", 3.2))
    frames = synthworld.sample_frames(world, poses,
                                      crop_dims=tuple(cfg.get("crop_dims", occupancy.DEFAULT_CROP_DIMS)),
                                      noise=cfg.get("noise", 0.0), seed=seed % (2 ** 31))
    frames_dir = out_dir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        occupancy.write_grid(f, frames_dir / f"frame_{i:06d}.occg")
    world_path = out_dir / "world.occg"
    occupancy.write_grid(world, world_path)
    traj_path = out_dir / "trajectory.json"
    save_trajectory(Trajectory(tuple((float(i), p) for i, p in enumerate(poses))), traj_path)
    return {"world": str(world_path), "frames": str(frames_dir), "trajectory": str(traj_path)}


def _load_frames(frames_dir: Path):
    paths = sorted(Path(frames_dir).glob("frame_*.occg"))
    if not paths:
        raise ConfigError(f"no frames found under {frames_dir}")
    return [occupancy.read_grid(p) for p in paths]


def run_fuse(frames_dir, traj_path, params_cfg: dict, out_path: Path) -> dict:
    frames = _load_frames(frames_dir)
    poses = load_trajectory(traj_path).poses
    params = fusion_mod.FusionParams(**params_cfg)
    gmap = fusion_mod.fuse_sequence(frames, poses, params)
    occupancy.write_grid(gmap, out_path)
    return {"map": str(out_path)}


def run_topo(map_path, params_cfg: dict, out_path: Path) -> dict:
    gmap = occupancy.read_grid(map_path)
    params = topology.TopologyParams(**params_cfg)
    g, valid = topology.extract_topology(gmap, params)
    topology.save_graph(g, valid, out_path)
    return {"graph": str(out_path)}


def run_lanes(map_path, graph_path, params_cfg: dict, out_path: Path) -> dict:
    gmap = occupancy.read_grid(map_path)
    g, _ = topology.load_graph(graph_path)
    params = lanes_mod.LaneParams(**params_cfg)
    lanes = lanes_mod.extract_lanes(gmap, g, params)
    lanes_mod.save_lanes(lanes, out_path)
    return {"lanes": str(out_path)}


def _endpoints_to_world(gmap, valid_px):
    vox = gmap.voxel_size
    return [((x + 0.5) * vox + gmap.origin.x, (y + 0.5) * vox + gmap.origin.y)
            for x, y in valid_px]


def _build_sim(map_path, lanes_path, graph_path, traj_path, params_cfg, seed,
               layout: str = "procedural"):
    gmap = occupancy.read_grid(map_path)
    lanes = lanes_mod.load_lanes(lanes_path)
    _, valid_px = topology.load_graph(graph_path)
    endpoints = _endpoints_to_world(gmap, valid_px)
    poses = load_trajectory(traj_path).poses
    idm_cfg = params_cfg.pop("idm", {})
    params = SimParams(idm=IdmParams(**idm_cfg), seed=seed % (2 ** 31), **params_cfg)
    if layout != "procedural":
        source = agents_mod.FileLayoutSource(layout)
    else:
        source = agents_mod.ProceduralLayoutSource(lanes)
    return Simulator(gmap, lanes, endpoints, poses, params, layout_source=source)


def run_spawn(map_path, lanes_path, graph_path, layout, seed, out_path: Path) -> dict:
    gmap = occupancy.read_grid(map_path)
    lanes = lanes_mod.load_lanes(lanes_path)
    _, valid_px = topology.load_graph(graph_path)
    endpoints = _endpoints_to_world(gmap, valid_px)
    if not endpoints:
        raise ConfigError("graph has no valid endpoints to route toward")
    from .routing import build_route_network
    network = build_route_network(lanes)
    rng = np.random.default_rng(seed % (2 ** 31))
    if layout != "procedural":
        source = agents_mod.FileLayoutSource(layout)
    else:
        source = agents_mod.ProceduralLayoutSource(lanes)
    lo, hi = gmap.extent
    anchor = Pose2(float((lo[0] + hi[0]) / 2), float((lo[1] + hi[1]) / 2), 0.0)
    spawned = agents_mod.spawn_agents(
        anchor, True, gmap, lanes, network, endpoints,
        agents_mod.DEFAULT_ASSETS, (8.0, 2.0), source, rng)
    out = [{"x": float(a.position[0]), "y": float(a.position[1]),
            "yaw": a.yaw, "speed": a.speed, "static": a.static,
            "is_ego": a.is_ego,
            "route": a.route.tolist(), "target": np.asarray(a.target).tolist()}
           for a in spawned]
    with open(out_path, "w") as fh:
        json.dump(out, fh)
    return {"agents": str(out_path)}


def run_simulate(map_path, lanes_path, graph_path, traj_path, params_cfg,
                 seed, layout, out_dir: Path) -> dict:
    sim = _build_sim(map_path, lanes_path, graph_path, traj_path,
                     dict(params_cfg), seed, layout)
    frames, logbook = sim.run(ego_pose_index=0)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        occupancy.write_grid(f, out_dir / f"frame_{i:06d}.occg")
    manifest_path = out_dir / "run_manifest.json"
    with open(manifest_path, "w") as fh:
        json.dump({"steps": logbook}, fh)
    return {"frames": str(out_dir), "run_manifest": str(manifest_path)}


def run_metrics(args) -> dict:
    a = metrics_mod.read_features(args.a)
    report = {"metric": args.metric}
    if args.metric == "vendi":
        report["value"] = metrics_mod.vendi(a)
    elif args.metric in ("mmd", "kid", "fid"):
        if not args.b:
            raise ConfigError(f"{args.metric} needs --b")
        b = metrics_mod.read_features(args.b)
        if args.metric == "mmd":
            report["value"] = metrics_mod.mmd(a, b, kernel=args.kernel,
                                              sigma=args.sigma)
        elif args.metric == "kid":
            report["value"] = metrics_mod.kid(a, b)
        else:
            value, flagged = metrics_mod.fid(a, b)
            report["value"] = value
            report["singular_covariance"] = flagged
    elif args.metric == "diversity":
        if not args.b:
            raise ConfigError("diversity needs --b")
        ga = occupancy.read_grid(args.a)
        gb = occupancy.read_grid(args.b)
        _, m = metrics_mod.miou(ga, gb, ga.table.ids)
        report["value"] = 1.0 - m
    else:
        raise ConfigError(f"unknown metric {args.metric}")
    return report


# --- pipeline ---------------------------------------------------------------

def run_pipeline(config: dict, root_seed: int, out_dir: Path) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"seed": root_seed, "stages": []}
    artifacts = {}

    def record(stage, produced):
        entry = {"stage": stage, "artifacts": {}}
        for name, path in produced.items():
            p = Path(path)
            if p.is_dir():
                digest = hashlib.sha256()
                for f in sorted(p.rglob("*")):
                    if f.is_file():
                        digest.update(f.name.encode())
                        digest.update(bytes.fromhex(_sha256(f)))
                entry["artifacts"][name] = {"path": str(p), "sha256": digest.hexdigest()}
            else:
                entry["artifacts"][name] = {"path": str(p), "sha256": _sha256(p)}
        manifest["stages"].append(entry)
        artifacts.update(produced)

    record("synth", run_synth(config.get("synth", {}), stage_seed(root_seed, "synth"), out_dir))
    record("fuse", run_fuse(artifacts["frames"], artifacts["trajectory"],
                            config.get("fuse", {}), out_dir / "map.occg"))
    record("topo", run_topo(artifacts["map"], config.get("topo", {}), out_dir / "graph.json"))
    record("lanes", run_lanes(artifacts["map"], artifacts["graph"],
                              config.get("lanes", {}), out_dir / "lanes.json"))
    record("spawn", run_spawn(artifacts["map"], artifacts["lanes"], artifacts["graph"],
                              "procedural", stage_seed(root_seed, "spawn"),
                              out_dir / "agents.json"))
    record("simulate", run_simulate(artifacts["map"], artifacts["lanes"],
                                    artifacts["graph"], artifacts["trajectory"],
                                    config.get("simulate", {}),
                                    stage_seed(root_seed, "simulate"),
                                    "procedural", out_dir / "rollout"))
    manifest_path = out_dir / "pipeline_manifest.json"
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


# --- argument parsing -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="voxsim")
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic world and frames")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("fuse", help="fuse ego frames into a global map")
    p.add_argument("--frames", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--params", default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("topo", help="extract the road graph")
    p.add_argument("--map", required=True)
    p.add_argument("--params", default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("lanes", help="extract vectorized lanes")
    p.add_argument("--map", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--params", default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("spawn", help="spawn agents on the lane network")
    p.add_argument("--map", required=True)
    p.add_argument("--lanes", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--layout", default="procedural")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("simulate", help="run the closed-loop engine")
    p.add_argument("--map", required=True)
    p.add_argument("--lanes", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--params", default=None)
    p.add_argument("--layout", default="procedural")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("metrics", help="evaluate realism/diversity metrics")
    p.add_argument("metric", choices=["vendi", "mmd", "kid", "fid", "diversity"])
    p.add_argument("--a", required=True)
    p.add_argument("--b", default=None)
    p.add_argument("--kernel", default="gaussian", choices=["gaussian", "polynomial"])
    p.add_argument("--sigma", type=float, default=1.0)

    p = sub.add_parser("pipeline", help="run all stages end to end")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    return ap


def _load_json(path, default=None):
    if path is None:
        return default if default is not None else {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as e:
        raise ConfigError(str(e))
    except json.JSONDecodeError as e:
        raise ConfigError(f"bad JSON in {path}: {e}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.WARNING))
    try:
        if args.command == "synth":
            result = run_synth(_load_json(args.spec), args.seed, Path(args.out))
        elif args.command == "fuse":
            result = run_fuse(args.frames, args.poses, _load_json(args.params),
                              Path(args.out))
        elif args.command == "topo":
            result = run_topo(args.map, _load_json(args.params), Path(args.out))
        elif args.command == "lanes":
            result = run_lanes(args.map, args.graph, _load_json(args.params),
                               Path(args.out))
        elif args.command == "spawn":
            result = run_spawn(args.map, args.lanes, args.graph, args.layout,
                               args.seed, Path(args.out))
        elif args.command == "simulate":
            result = run_simulate(args.map, args.lanes, args.graph, args.poses,
                                  _load_json(args.params), args.seed,
                                  args.layout, Path(args.out))
        elif args.command == "metrics":
            result = run_metrics(args)
        elif args.command == "pipeline":
            result = run_pipeline(_load_json(args.config), args.seed,
                                  Path(args.out_dir))
        else:  # pragma: no cover
            return EXIT_CONFIG
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, OSError, occupancy.GridFormatError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except Exception as e:
        print(f"stage failure ({args.command}): {e}", file=sys.stderr)
        return EXIT_STAGE
    json.dump(result, sys.stdout, indent=2, default=str)
    print()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
