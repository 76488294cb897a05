"""Corrected QD metrics: re-evaluate, rebuild the archive, then score it.

Archive methods have every occupant re-run ``n_reevals`` times and the mean
result re-inserted at the cell of its mean descriptor. The planner has every
settled cell re-executed along its waypoint chain. A cell counts as covered
when a strict majority of the runs end within ``eps`` of the cell center.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Hashable, Mapping, Sequence

import numpy as np

from qdplan.archive import Cell, GridArchive, QdMetrics, fmt, parse_float
from qdplan.baseline import evaluate_candidates
from qdplan.planner import ArchiveGraph, PlannerConfig, PlanTree, coverage_of, execute_tree, plan
from qdplan.policy import PolicyHandle, PolicyParams
from qdplan.world import (
    DEFAULT_DYNAMICS,
    DEFAULT_REWARD,
    Dynamics,
    MazeSpec,
    RewardCoeffs,
    SimState,
    initial_state,
    perturb_state,
    reward_lower_bound,
)

# (occupant, seed) -> (objective, descriptor)
Evaluator = Callable[[object, int], tuple[float, Sequence[float]]]


class MissingPolicyError(KeyError):
    pass


@dataclass(frozen=True)
class EvalProtocol:
    n_reevals: int = 50
    common_reward: RewardCoeffs = DEFAULT_REWARD
    episode_len: int = 250
    seed_base: int = 0
    settle_steps: int = 20
    pos_noise: float = 0.0
    vel_noise: float = 0.0
    success_threshold: float = 0.5  # covered iff success rate is strictly above this
    strict_episode: bool = False  # stop planner execution at episode_len too

    def __post_init__(self):
        if self.n_reevals < 1:
            raise ValueError("n_reevals must be >= 1")
        if self.episode_len < 1:
            raise ValueError("episode_len must be >= 1")
        if self.settle_steps < 0 or self.pos_noise < 0 or self.vel_noise < 0:
            raise ValueError("settle_steps and noise levels must be non-negative")
        if not 0.0 <= self.success_threshold < 1.0:
            raise ValueError("success_threshold must be in [0, 1)")

    @property
    def seeds(self) -> list[int]:
        return [self.seed_base + k for k in range(self.n_reevals)]

    @property
    def noisy(self) -> bool:
        return self.pos_noise > 0 or self.vel_noise > 0

    def start_state(self, maze: MazeSpec, seed: int, base: SimState | None = None) -> SimState:
        base = initial_state(maze) if base is None else base
        if not self.noisy:
            return base
        return perturb_state(base, maze, self.pos_noise, self.vel_noise, np.random.default_rng(seed))

    def offset(self, maze: MazeSpec, dynamics: Dynamics = DEFAULT_DYNAMICS) -> float:
        return self.episode_len * reward_lower_bound(self.common_reward, maze, dynamics)


@dataclass
class CellReport:
    cell: Cell
    target: tuple[float, float]
    success_rate: float
    mean_objective: float
    mean_descriptor: tuple[float, float]
    n: int
    # planner only: share of runs within eps of the target at step episode_len
    in_episode_rate: float | None = None


@dataclass
class CorrectedReport:
    method: str
    maze: str
    metrics: QdMetrics
    cells: list[CellReport]
    archive: GridArchive
    metadata: dict = field(default_factory=dict)

    @property
    def success_rate(self) -> dict[Cell, float]:
        return {c.cell: c.success_rate for c in self.cells}


def _mean(values) -> float:
    v = np.asarray(values, dtype=float)
    # identical runs give back their value bit for bit
    return float(v[0]) if np.all(v == v[0]) else float(v.mean())


def _aggregate(cell, target, objs, descs, hits, in_episode=None) -> CellReport:
    descs = np.asarray(descs, dtype=float)
    return CellReport(
        cell=cell,
        target=target,
        success_rate=float(np.mean(hits)),
        mean_objective=_mean(objs),
        mean_descriptor=(_mean(descs[:, 0]), _mean(descs[:, 1])),
        n=len(objs),
        in_episode_rate=None if in_episode is None else float(np.mean(in_episode)),
    )


def _batched_params_evaluator(occupants, shapes, maze, protocol, dynamics, threads):
    """Evaluate every parameter vector under every seed with the batched simulator."""
    ids = list(occupants)
    flats = np.stack([occupants[i].flat_weights if isinstance(occupants[i], PolicyParams)
                      else np.asarray(occupants[i], dtype=float) for i in ids])

    def one_seed(seed):
        starts = [protocol.start_state(maze, seed)] * len(ids)
        return evaluate_candidates(flats, shapes, maze, protocol.episode_len, protocol.common_reward,
                                   starts=starts, dynamics=dynamics)

    seeds = protocol.seeds
    distinct = seeds[:1] if not protocol.noisy else seeds
    if threads > 1 and len(distinct) > 1:
        with ThreadPoolExecutor(threads) as pool:
            outs = list(pool.map(one_seed, distinct))
    else:
        outs = [one_seed(s) for s in distinct]
    if len(distinct) < len(seeds):
        outs = outs * len(seeds)
    return {oid: ([float(o[0][k]) for o in outs], [tuple(o[1][k]) for o in outs]) for k, oid in enumerate(ids)}


def corrected_metrics_for_archive(
    archive: GridArchive,
    occupants: Mapping[Hashable, object],
    maze: MazeSpec,
    protocol: EvalProtocol,
    *,
    evaluate: Evaluator | None = None,
    deterministic: bool = False,
    shapes=None,
    method: str = "map_elites",
    dynamics: Dynamics = DEFAULT_DYNAMICS,
    threads: int = 1,
    metadata: dict | None = None,
) -> CorrectedReport:
    """Re-evaluate each archive occupant and score the corrected archive.

    ``occupants`` maps occupant ids to policy parameters (evaluated with the
    batched simulator, needs ``shapes`` unless they are :class:`PolicyParams`)
    or to arbitrary agents handled by ``evaluate``. With ``deterministic`` the
    evaluator is called once per occupant and the result replicated.
    """
    items = archive.items()
    missing = [e.occupant_id for _, e in items if e.occupant_id not in occupants]
    if missing:
        raise MissingPolicyError(f"no policy for archive occupants {missing[:5]}")
    seeds = protocol.seeds
    needed = {e.occupant_id: occupants[e.occupant_id] for _, e in items}
    if evaluate is None:
        if shapes is None:
            first = next(iter(needed.values()), None)
            shapes = first.layer_shapes if isinstance(first, PolicyParams) else None
        if needed and shapes is None:
            raise ValueError("layer shapes are required to evaluate raw parameter vectors")
        results = _batched_params_evaluator(needed, shapes, maze, protocol, dynamics, threads) if needed else {}
    else:
        results = {}
        for oid, agent in needed.items():
            runs = seeds[:1] if deterministic else seeds
            outs = [evaluate(agent, s) for s in runs]
            if deterministic:
                outs = outs * len(seeds)
            results[oid] = ([float(o[0]) for o in outs], [tuple(map(float, o[1])) for o in outs])

    corrected = archive.empty_like()
    cells = []
    for cell, elite in items:
        objs, descs = results[elite.occupant_id]
        hits = [archive.cell_of(d) == cell for d in descs]
        rep = _aggregate(cell, archive.cell_center(cell), objs, descs, hits)
        cells.append(rep)
        corrected.insert(elite.occupant_id, rep.mean_objective, rep.mean_descriptor, target=rep.target)
    meta = {
        "method": method,
        "maze": maze.name,
        "seeds": f"{seeds[0]}..{seeds[-1]}",
        "n_reevals": protocol.n_reevals,
        "uncorrected_coverage": len(items) / archive.n_cells,
        "eval_steps": len(items) * protocol.n_reevals * protocol.episode_len,
    }
    meta.update(metadata or {})
    return CorrectedReport(method, maze.name, corrected.metrics(protocol.offset(maze, dynamics)), cells, corrected, meta)


def corrected_metrics_for_planner(
    maze: MazeSpec,
    policy: PolicyHandle,
    plan_tree: PlanTree,
    archive: GridArchive,
    protocol: EvalProtocol,
    config: PlannerConfig = PlannerConfig(),
    *,
    method: str = "planner",
    dynamics: Dynamics = DEFAULT_DYNAMICS,
    threads: int = 1,
    metadata: dict | None = None,
) -> CorrectedReport:
    """Re-execute the waypoint chain to every settled cell under each seed.

    A covered cell is entered into the corrected archive at its own index
    with the mean achieved position as descriptor, so DEM measures the
    distance from the mean final position to the cell center.
    """
    seeds = protocol.seeds
    shortcut = policy.deterministic and not protocol.noisy
    runs = seeds[:1] if shortcut else seeds

    def one_seed(seed):
        return execute_tree(maze, policy, plan_tree, config, archive, seed=seed,
                            coeffs=protocol.common_reward, episode_len=protocol.episode_len,
                            settle_steps=protocol.settle_steps, strict_episode=protocol.strict_episode,
                            start=protocol.start_state(maze, seed, plan_tree.start_state), dynamics=dynamics)

    if threads > 1 and len(runs) > 1:
        with ThreadPoolExecutor(threads) as pool:
            outs = list(pool.map(one_seed, runs))
    else:
        outs = [one_seed(s) for s in runs]
    if shortcut:
        outs = outs * len(seeds)

    corrected = archive.empty_like()
    cells = []
    ny = archive.resolution[1]
    exec_steps = 0
    for cell in sorted(plan_tree.order):
        cx, cy = archive.cell_center(cell)
        rs = [o[cell] for o in outs]
        exec_steps += sum(r.steps_used for r in rs[: len(runs)])
        descs = [(r.final_state.x, r.final_state.y) for r in rs]
        cut = [math.hypot(r.cut_state.x - cx, r.cut_state.y - cy) <= config.eps for r in rs]
        rep = _aggregate(cell, (cx, cy), [r.return_ for r in rs], descs, [r.reached for r in rs], cut)
        cells.append(rep)
        if rep.success_rate > protocol.success_threshold:
            corrected.insert(cell[0] * ny + cell[1], rep.mean_objective, rep.mean_descriptor,
                             target=(cx, cy), cell=cell)
    in_episode = sum(1 for c in cells if c.in_episode_rate > protocol.success_threshold)
    meta = {
        "method": method,
        "maze": maze.name,
        "seeds": f"{seeds[0]}..{seeds[-1]}",
        "n_reevals": protocol.n_reevals,
        "uncorrected_coverage": coverage_of(plan_tree),
        "coverage_within_episode": in_episode / archive.n_cells,
        "plan_rollouts": plan_tree.edge_rollout_count,
        "plan_steps": plan_tree.total_steps,
        "directed_edges": ArchiveGraph(archive).directed_edge_count,
        "eval_steps": exec_steps,
    }
    meta.update(metadata or {})
    return CorrectedReport(method, maze.name, corrected.metrics(protocol.offset(maze, dynamics)), cells, corrected, meta)


@dataclass
class GeneralizationResult:
    reports: tuple[CorrectedReport, CorrectedReport]
    plans: tuple[PlanTree, PlanTree]
    storage: dict


def generalization_experiment(
    policy: PolicyHandle,
    maze_a: MazeSpec,
    maze_b: MazeSpec,
    resolutions: tuple[tuple[int, int], tuple[int, int]],
    protocols: tuple[EvalProtocol, EvalProtocol],
    config: PlannerConfig = PlannerConfig(),
    *,
    policy_path: str | Path | None = None,
    dynamics: Dynamics = DEFAULT_DYNAMICS,
    threads: int = 1,
) -> GeneralizationResult:
    """Plan and evaluate on two mazes with one and the same policy."""
    reports, plans, storage = [], [], {}
    policies_used = set()
    for tag, maze, res, proto in zip("ab", (maze_a, maze_b), resolutions, protocols):
        archive = GridArchive.for_maze(maze, res)
        tree = plan(maze, policy, archive, config, dynamics=dynamics)
        policies_used.add(id(policy))
        rep = corrected_metrics_for_planner(maze, policy, tree, archive, proto, config,
                                            dynamics=dynamics, threads=threads)
        reports.append(rep)
        plans.append(tree)
        storage[f"rollouts_{tag}"] = tree.edge_rollout_count
        storage[f"directed_edges_{tag}"] = rep.metadata["directed_edges"]
        storage[f"maze_{tag}"] = maze.name
    storage["stored_policies"] = len(policies_used)
    if policy_path is not None:
        storage["policy_bytes"] = Path(policy_path).stat().st_size
    elif policy.params is not None:
        storage["policy_bytes"] = int(policy.params.flat_weights.nbytes)
    else:
        storage["policy_bytes"] = 0
    return GeneralizationResult((reports[0], reports[1]), (plans[0], plans[1]), storage)


# --- report serialization ---------------------------------------------------

SUMMARY_COLUMNS = ("method", "maze", "qd_score", "qd_score_offset", "offset", "coverage", "best", "dem",
                   "occupied", "total", "rollouts", "sim_steps")
_FLOAT_FIELDS = ("qd_score", "qd_score_offset", "offset", "coverage", "best", "dem")
_INT_FIELDS = ("occupied", "total", "rollouts", "sim_steps")


def _budget(report: CorrectedReport) -> tuple[int | None, int | None]:
    md = report.metadata
    rollouts = md.get("rollouts", md.get("plan_rollouts"))
    steps = md.get("sim_steps", md.get("plan_steps"))
    return rollouts, steps


def summary_row(report: CorrectedReport) -> dict:
    m = report.metrics
    rollouts, steps = _budget(report)
    return {"method": report.method, "maze": report.maze, "qd_score": m.qd_score,
            "qd_score_offset": m.qd_score_offset, "offset": m.offset, "coverage": m.coverage, "best": m.best,
            "dem": m.dem, "occupied": m.occupied, "total": m.total, "rollouts": rollouts, "sim_steps": steps}


def _cell_text(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return fmt(v)
    return str(v)


def write_summary_csv(reports: Sequence[CorrectedReport], path: str | Path) -> Path:
    return write_rows_csv([summary_row(r) for r in reports], path)


def read_summary_csv(path: str | Path) -> list[dict]:
    rows = []
    with Path(path).open(newline="") as f:
        for raw in csv.DictReader(f):
            row = {"method": raw["method"], "maze": raw["maze"]}
            for c in _FLOAT_FIELDS:
                row[c] = parse_float(raw[c])
            for c in _INT_FIELDS:
                row[c] = None if raw[c] == "" else int(raw[c])
            rows.append(row)
    return rows


def write_cells_csv(report: CorrectedReport, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("i", "j", "target_x", "target_y", "success_rate", "in_episode_rate", "mean_objective",
                    "mean_x", "mean_y", "n"))
        for c in report.cells:
            w.writerow([c.cell[0], c.cell[1], fmt(c.target[0]), fmt(c.target[1]), fmt(c.success_rate),
                        fmt(c.in_episode_rate), fmt(c.mean_objective), fmt(c.mean_descriptor[0]),
                        fmt(c.mean_descriptor[1]), c.n])
    return path


def write_rows_csv(rows: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for row in rows:
            w.writerow([_cell_text(row[c]) for c in SUMMARY_COLUMNS])
    return path


def render_rows(rows: Sequence[dict]) -> str:
    header = ("method", "maze", "QD-Score", "QD-Score(offset)", "Cov %", "Best", "DEM", "rollouts", "sim steps")

    def num(v, spec):
        return "-" if v is None else format(v, spec)

    body = [(r["method"], r["maze"], num(r["qd_score"], ".1f"), num(r["qd_score_offset"], ".1f"),
             num(None if r["coverage"] is None else 100.0 * r["coverage"], ".2f"), num(r["best"], ".2f"),
             num(r["dem"], ".3f"), num(r["rollouts"], "d"), num(r["sim_steps"], "d")) for r in rows]
    widths = [max([len(h)] + [len(b[k]) for b in body]) for k, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)), "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines) + "\n"


def compare_methods(reports: Sequence[CorrectedReport]) -> tuple[list[dict], str]:
    """One row per report, sorted by method then maze, plus a rendered table."""
    rows = sorted((summary_row(r) for r in reports), key=lambda r: (r["method"], r["maze"]))
    return rows, render_rows(rows)


def render_summary(report: CorrectedReport) -> str:
    m = report.metrics
    lines = [f"method: {report.method}", f"maze: {report.maze}",
             f"qd_score: {m.qd_score:.6g}", f"qd_score_offset: {m.qd_score_offset:.6g}",
             f"coverage: {100 * m.coverage:.2f}% ({m.occupied}/{m.total})",
             f"best: {'-' if m.best is None else format(m.best, '.6g')}",
             f"dem: {'-' if m.dem is None else format(m.dem, '.4f')}"]
    for k, v in sorted(report.metadata.items()):
        lines.append(f"{k}: {v}")
    return "\n".join(lines) + "\n"
