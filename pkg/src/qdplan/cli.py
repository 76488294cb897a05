"""Command-line entry point.

Exit codes: 0 success, 2 configuration error (bad keys or values, missing
files, maze mismatch), 3 runtime error (training divergence, corrupt
artifacts, planning failures).
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
import time
from importlib import metadata
from pathlib import Path

from qdplan.archive import GridArchive, read_archive_csv, write_archive_csv
from qdplan.baseline import load_elites, run_map_elites, save_elites
from qdplan.config import ConfigError, MazeMismatchError, RunConfig, load_config, resolve_maze
from qdplan.evaluation import (
    compare_methods,
    corrected_metrics_for_archive,
    corrected_metrics_for_planner,
    generalization_experiment,
    read_summary_csv,
    render_rows,
    render_summary,
    write_cells_csv,
    write_rows_csv,
    write_summary_csv,
)
from qdplan.imaging import write_heatmap
from qdplan.planner import ArchiveGraph, coverage_of, plan, read_plan_csv, write_plan_csv
from qdplan.policy import PolicyError, PolicyHandle, load_policy, save_policy
from qdplan.ppo import train
from qdplan.world import initial_state

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
log = logging.getLogger("qdplan")


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    try:
        return "v" + metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "v0.0.0"


def run_dir(cfg: RunConfig, command: str) -> Path:
    d = Path(cfg.get("run", "output_dir")) / f"{command}-{cfg.run_id}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_manifest(out: Path, cfg: RunConfig, command: str, started: float, extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "version": version_string(),
        "config_hash": cfg.config_hash(),
        "run_id": cfg.run_id,
        "seed": cfg.seed,
        "threads": cfg.threads,
        "wall_clock_s": round(time.time() - started, 3),
        "started_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
        "config": cfg.snapshot(),
    }
    manifest.update(extra or {})
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out / "config.ini").write_text(cfg.to_ini())
    return path


def _policy(cfg: RunConfig, args) -> PolicyHandle:
    if getattr(args, "analytic", False) or cfg.get("run", "analytic"):
        return PolicyHandle.analytic()
    path = getattr(args, "policy", None) or cfg.get("run", "policy")
    if not path:
        raise ConfigError("a policy file is required (--policy FILE) unless --analytic is given")
    if not Path(path).is_file():
        raise ConfigError(f"policy file not found: {path}")
    return load_policy(path)


def _read_manifest(artifact_dir: Path) -> dict:
    path = artifact_dir / "manifest.json"
    if not path.is_file():
        raise ConfigError(f"no manifest.json in {artifact_dir}")
    return json.loads(path.read_text())


def cmd_train(cfg: RunConfig, args) -> Path:
    t0 = time.time()
    maze = cfg.maze()
    ppo_cfg = cfg.ppo()
    out = run_dir(cfg, "train")
    ckpt = out / "checkpoints" if ppo_cfg.checkpoint_every else None
    if ckpt:
        ckpt.mkdir(exist_ok=True)
    policy, train_log = train(ppo_cfg, maze, dynamics=cfg.dynamics(), checkpoint_dir=ckpt)
    save_policy(policy, out / "policy.gcpol")
    train_log.write_csv(out / "train_log.csv")
    write_manifest(out, cfg, "train", t0, {"sim_steps": ppo_cfg.iterations * ppo_cfg.batch_size,
                                           "maze": maze.name})
    print(f"policy written to {out / 'policy.gcpol'}")
    return out


def cmd_plan(cfg: RunConfig, args) -> Path:
    t0 = time.time()
    maze = cfg.maze()
    resolution, _ = cfg.maze_settings(maze)
    policy = _policy(cfg, args)
    pcfg = cfg.planner()
    archive = GridArchive.for_maze(maze, resolution)
    tree = plan(maze, policy, archive, pcfg, dynamics=cfg.dynamics())
    out = run_dir(cfg, "plan")
    write_plan_csv(tree, out / "plan.csv")
    write_heatmap(out / "coverage.png", tree.settled.astype(float), vmin=0.0, vmax=1.0)
    summary = {"maze": maze.name, "resolution": list(resolution), "policy": policy.kind,
               "coverage": coverage_of(tree), "rollouts": tree.edge_rollout_count, "sim_steps": tree.total_steps,
               "directed_edges": ArchiveGraph(archive).directed_edge_count}
    write_manifest(out, cfg, "plan", t0, summary)
    print(f"coverage {100 * summary['coverage']:.2f}% with {tree.edge_rollout_count} edge rollouts -> {out}")
    return out


def cmd_baseline(cfg: RunConfig, args) -> Path:
    t0 = time.time()
    maze = cfg.maze()
    resolution, episode_len = cfg.maze_settings(maze)
    me_cfg = cfg.map_elites(episode_len)
    run = run_map_elites(maze, me_cfg, resolution, cfg.reward(), dynamics=cfg.dynamics(), threads=cfg.threads)
    out = run_dir(cfg, "baseline")
    write_archive_csv(run.archive, out / "archive.csv")
    run.write_log_csv(out / "me_log.csv")
    save_elites(run, out / "elites.npz")
    write_heatmap(out / "archive.png", run.archive.objective_grid())
    m = run.archive.metrics(run.offset)
    write_manifest(out, cfg, "baseline", t0, {
        "maze": maze.name, "resolution": list(resolution), "iterations": me_cfg.iterations,
        "episode_len": episode_len, "rollouts": run.total_rollouts, "sim_steps": run.total_steps,
        "coverage": m.coverage,
        "budget": {"rollouts": run.total_rollouts, "sim_steps": run.total_steps,
                   "budget_steps": cfg.get("map_elites", "budget_steps")},
    })
    print(f"budget: {run.total_rollouts} rollouts, {run.total_steps} steps; coverage {100 * m.coverage:.2f}% -> {out}")
    return out


def _check_maze(manifest: dict, maze_name: str, artifact_dir: Path) -> None:
    if manifest.get("maze") != maze_name:
        raise MazeMismatchError(
            f"artifacts in {artifact_dir} were produced on maze {manifest.get('maze')!r} "
            f"but the evaluation maze is {maze_name!r}")


def _write_report(out: Path, report) -> None:
    write_summary_csv([report], out / "report_summary.csv")
    write_cells_csv(report, out / "report_cells.csv")
    (out / "report.txt").write_text(render_summary(report))
    grid = report.archive.objective_grid() * 0.0
    for c in report.cells:
        grid[c.cell] = c.success_rate
    write_heatmap(out / "success.png", grid, vmin=0.0, vmax=1.0)


def cmd_eval(cfg: RunConfig, args) -> Path:
    t0 = time.time()
    maze = cfg.maze()
    resolution, episode_len = cfg.maze_settings(maze)
    protocol = cfg.protocol(episode_len)
    artifacts = Path(args.artifacts)
    manifest = _read_manifest(artifacts)
    _check_maze(manifest, maze.name, artifacts)
    if tuple(manifest.get("resolution", resolution)) != tuple(resolution):
        raise MazeMismatchError(f"artifact resolution {manifest.get('resolution')} != {list(resolution)}")
    archive = GridArchive.for_maze(maze, resolution)
    if manifest["command"] == "plan":
        pcfg = cfg.planner()
        policy = _policy(cfg, args)
        tree = read_plan_csv(artifacts / "plan.csv", initial_state(maze), pcfg.eps)
        report = corrected_metrics_for_planner(
            maze, policy, tree, archive, protocol, pcfg, dynamics=cfg.dynamics(), threads=cfg.threads,
            metadata={"plan_rollouts": manifest.get("rollouts"), "plan_steps": manifest.get("sim_steps")})
    elif manifest["command"] == "baseline":
        stored = read_archive_csv(artifacts / "archive.csv", resolution, archive.bounds)
        elites, shapes = load_elites(artifacts / "elites.npz")
        report = corrected_metrics_for_archive(
            stored, elites, maze, protocol, shapes=shapes, dynamics=cfg.dynamics(), threads=cfg.threads,
            metadata={"rollouts": manifest.get("rollouts"), "sim_steps": manifest.get("sim_steps")})
    else:
        raise ConfigError(f"{artifacts} holds {manifest['command']!r} artifacts; expected plan or baseline")
    out = run_dir(cfg, "eval")
    _write_report(out, report)
    write_manifest(out, cfg, "eval", t0, {"maze": maze.name, "artifacts": str(artifacts),
                                          "method": report.method})
    print(render_summary(report), end="")
    return out


def cmd_generalize(cfg: RunConfig, args) -> Path:
    t0 = time.time()
    maze_a = resolve_maze(args.maze_a or cfg.get("run", "maze"), cfg.get("maze", "cell_size"))
    maze_b = resolve_maze(args.maze_b or cfg.get("run", "maze_b"), cfg.get("maze", "cell_size"))
    policy = _policy(cfg, args)
    out = run_dir(cfg, "generalize")
    stored = None
    if policy.params is not None:
        stored = save_policy(policy, out / "policy.gcpol")
    (res_a, ep_a), (res_b, ep_b) = cfg.maze_settings(maze_a), cfg.maze_settings(maze_b)
    result = generalization_experiment(policy, maze_a, maze_b, (res_a, res_b),
                                       (cfg.protocol(ep_a), cfg.protocol(ep_b)), cfg.planner(),
                                       policy_path=stored, dynamics=cfg.dynamics(), threads=cfg.threads)
    for tag, rep, tree in zip("ab", result.reports, result.plans):
        sub = out / f"{tag}_{rep.maze}"
        sub.mkdir(exist_ok=True)
        _write_report(sub, rep)
        write_plan_csv(tree, sub / "plan.csv")
    storage = dict(result.storage)
    storage["policy_files"] = len(list(out.rglob("*.gcpol")))
    (out / "storage.json").write_text(json.dumps(storage, indent=2, sort_keys=True) + "\n")
    write_manifest(out, cfg, "generalize", t0, {"storage": storage})
    _, text = compare_methods(list(result.reports))
    print(text, end="")
    print(f"stored policy files: {storage['policy_files']}")
    return out


def cmd_compare(cfg: RunConfig, args) -> Path:
    t0 = time.time()
    rows = []
    for item in args.reports:
        p = Path(item)
        if p.is_dir():
            p = p / "report_summary.csv"
        if not p.is_file():
            raise ConfigError(f"report not found: {item}")
        rows.extend(read_summary_csv(p))
    rows.sort(key=lambda r: (r["method"], r["maze"]))
    out = run_dir(cfg, "compare")
    write_rows_csv(rows, out / "comparison.csv")
    text = render_rows(rows)
    (out / "comparison.txt").write_text(text)
    write_manifest(out, cfg, "compare", t0, {"inputs": [str(p) for p in args.reports]})
    print(text, end="")
    return out


COMMANDS = {"train": cmd_train, "plan": cmd_plan, "baseline": cmd_baseline, "eval": cmd_eval,
            "generalize": cmd_generalize, "compare": cmd_compare}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker threads; 1 gives byte-identical re-runs")
    common.add_argument("--maze", help="built-in layout name or maze text file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--n-reevals", type=int, help="re-evaluations per cell for corrected metrics")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="qdplan", description="Goal-conditioned planning over QD archives")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train the goal-conditioned policy with PPO")
    p.add_argument("--total-steps", type=int)

    for name, text in (("plan", "plan over the archive graph"),
                       ("generalize", "plan and evaluate on two mazes with one policy")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--policy", help="policy file from 'train'")
        p.add_argument("--analytic", action="store_true", help="use the analytic controller instead")
        if name == "generalize":
            p.add_argument("--maze-a")
            p.add_argument("--maze-b")

    p = sub.add_parser("baseline", parents=[common], help="run vanilla MAP-Elites")
    p.add_argument("--iterations", type=int)
    p.add_argument("--budget-steps", type=int, help="derive iterations from a simulator-step budget")

    p = sub.add_parser("eval", parents=[common], help="corrected metrics for a plan or baseline run")
    p.add_argument("artifacts", help="run directory written by 'plan' or 'baseline'")
    p.add_argument("--policy")
    p.add_argument("--analytic", action="store_true")

    p = sub.add_parser("compare", parents=[common], help="comparison table over report files")
    p.add_argument("reports", nargs="+", help="report_summary.csv files or eval run directories")
    return parser


def _overrides(args) -> list[str]:
    ov = list(args.set)
    for flag, key in (("seed", "run.seed"), ("threads", "run.threads"), ("maze", "run.maze"),
                      ("out", "run.output_dir"), ("total_steps", "ppo.total_steps"),
                      ("iterations", "map_elites.iterations"), ("budget_steps", "map_elites.budget_steps"),
                      ("n_reevals", "eval.n_reevals")):
        value = getattr(args, flag, None)
        if value is not None:
            ov.append(f"{key}={value}")
    return ov


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if getattr(args, "total_steps", None) is not None and args.total_steps <= 0:
            raise ConfigError("--total-steps must be positive")
        cfg = load_config(args.config, _overrides(args))
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PolicyError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
