"""Dijkstra over the archive grid with rollout-validated edges.

Every archive cell is a vertex connected to its 8 neighbours with Euclidean
center-to-center weights. Nothing about the maze is known up front: when a
cell is settled, the goal-conditioned policy is rolled out from the state in
which it arrived there toward each unsettled neighbour, and the edge only
exists if the rollout gets within ``eps`` of the neighbour's center in at
most ``max_steps_per_edge`` steps.
"""

from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from qdplan.archive import Cell, GridArchive, fmt
from qdplan.world import (
    DEFAULT_DYNAMICS,
    DEFAULT_REWARD,
    Dynamics,
    MazeSpec,
    RewardCoeffs,
    RolloutResult,
    SimState,
    initial_state,
    rollout,
)

# lexicographic, so neighbour expansion order is deterministic
OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))

EdgeValidator = Callable[[Cell, Cell, SimState], tuple[bool, SimState, int]]


class PlanError(ValueError):
    pass


class TargetUnreachableError(PlanError):
    pass


@dataclass(frozen=True)
class PlannerConfig:
    eps: float = 0.5
    max_steps_per_edge: int = 150
    seed: int = 0
    revalidation: int = 0  # extra attempts for an edge whose first rollout failed
    edge_weight: str = "euclidean"  # or "steps"
    # Skip rollouts for edges that cannot lower the tentative cost of their
    # head cell. Same tree, far fewer rollouts than validating every edge.
    lazy_edges: bool = False

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.max_steps_per_edge < 1:
            raise ValueError("max_steps_per_edge must be >= 1")
        if self.revalidation < 0:
            raise ValueError("revalidation must be >= 0")
        if self.edge_weight not in ("euclidean", "steps"):
            raise ValueError(f"unknown edge_weight {self.edge_weight!r}")


class ArchiveGraph:
    """Implicit 8-connected graph over the cells of an archive."""

    def __init__(self, archive: GridArchive):
        self.archive = archive
        self.resolution = archive.resolution
        wx, wy = archive.cell_size
        self._square = wx == wy
        self._weights = (wx, wy, math.sqrt(wx * wx + wy * wy))

    def neighbors(self, cell: Cell) -> list[Cell]:
        i, j = cell
        nx, ny = self.resolution
        return [(i + di, j + dj) for di, dj in OFFSETS if 0 <= i + di < nx and 0 <= j + dj < ny]

    def edge_kind(self, u: Cell, v: Cell) -> int:
        """0: step along x (or any cardinal step on square cells), 1: along y, 2: diagonal."""
        di, dj = abs(v[0] - u[0]), abs(v[1] - u[1])
        if di + dj == 0 or di > 1 or dj > 1:
            raise ValueError(f"{u} and {v} are not adjacent")
        if di and dj:
            return 2
        return 0 if (di or self._square) else 1

    def weight(self, u: Cell, v: Cell) -> float:
        di, dj = abs(v[0] - u[0]), abs(v[1] - u[1])
        if di and dj:
            return self._weights[2]
        return self._weights[0] if di else self._weights[1]

    def path_cost(self, counts: tuple[int, int, int]) -> float:
        # Cost from move counts, so equal-length paths get bit-identical floats.
        wx, wy, wd = self._weights
        return counts[0] * wx + counts[1] * wy + counts[2] * wd

    def edges(self) -> list[tuple[Cell, Cell, float]]:
        out = []
        nx, ny = self.resolution
        for i in range(nx):
            for j in range(ny):
                for v in self.neighbors((i, j)):
                    if v > (i, j):
                        out.append(((i, j), v, self.weight((i, j), v)))
        return out

    @property
    def directed_edge_count(self) -> int:
        return 2 * len(self.edges())


def graph_edges(archive: GridArchive) -> list[tuple[Cell, Cell, float]]:
    """Each undirected 8-neighbour pair once, in lexicographic order."""
    return ArchiveGraph(archive).edges()


@dataclass
class PlanTree:
    source: Cell
    resolution: tuple[int, int]
    cost: np.ndarray
    pred: dict[Cell, Cell]
    arrival: dict[Cell, SimState]
    edge_steps: dict[Cell, int]
    order: list[Cell]
    start_state: SimState
    edge_rollout_count: int = 0
    total_steps: int = 0
    eps: float = 0.5
    attempts: dict[Cell, int] = field(default_factory=dict)

    @property
    def settled(self) -> np.ndarray:
        return np.isfinite(self.cost)

    def is_settled(self, cell: Cell) -> bool:
        i, j = cell
        nx, ny = self.resolution
        return 0 <= i < nx and 0 <= j < ny and bool(np.isfinite(self.cost[i, j]))

    def status(self, cell: Cell) -> str:
        return "settled" if self.is_settled(cell) else "unreachable"

    def path_to(self, target: Cell) -> list[Cell]:
        if not self.is_settled(target):
            raise TargetUnreachableError(f"cell {target} is not settled in this plan")
        path = [target]
        seen = {target}
        while path[-1] != self.source:
            nxt = self.pred[path[-1]]
            if nxt in seen:
                raise PlanError(f"predecessor cycle at {nxt}")
            seen.add(nxt)
            path.append(nxt)
        path.reverse()
        return path


def coverage_of(plan: PlanTree) -> float:
    return int(plan.settled.sum()) / plan.cost.size


def edge_seed(seed: int, u: Cell, v: Cell, attempt: int = 0) -> int:
    return int(np.random.SeedSequence([seed, u[0], u[1], v[0], v[1], attempt]).generate_state(1)[0])


def plan_with(
    graph: ArchiveGraph,
    source: Cell,
    start_state: SimState,
    validate: EdgeValidator,
    config: PlannerConfig = PlannerConfig(),
) -> PlanTree:
    """Dijkstra where each relaxation must be confirmed by ``validate``.

    ``validate(u, v, state_at_u)`` returns ``(reached, state_at_v, steps)``.
    Every edge from a settled cell to an unsettled neighbour is validated
    unless ``config.lazy_edges`` is set.
    """
    nx, ny = graph.resolution
    cost = np.full((nx, ny), np.inf)
    tentative: dict[Cell, float] = {source: 0.0}
    counts: dict[Cell, tuple[int, int, int]] = {source: (0, 0, 0)}
    states: dict[Cell, SimState] = {source: start_state}
    tree = PlanTree(source, (nx, ny), cost, {}, {source: start_state}, {source: 0}, [], start_state, eps=config.eps)
    settled: set[Cell] = set()
    by_steps = config.edge_weight == "steps"
    lazy = config.lazy_edges and not by_steps
    heap = [(0.0, source[0], source[1])]
    while heap:
        c, i, j = heapq.heappop(heap)
        u = (i, j)
        if u in settled:
            continue
        settled.add(u)
        cost[i, j] = c
        tree.order.append(u)
        tree.arrival[u] = states[u]
        for v in graph.neighbors(u):
            if v in settled:
                continue
            if not by_steps:
                k = graph.edge_kind(u, v)
                new_counts = tuple(n + (1 if m == k else 0) for m, n in enumerate(counts[u]))
                new = graph.path_cost(new_counts)
                if lazy and v in tentative and not new < tentative[v]:
                    continue
            ok = False
            for attempt in range(config.revalidation + 1):
                ok, final, steps = validate(u, v, states[u])
                tree.edge_rollout_count += 1
                tree.total_steps += steps
                if ok:
                    break
            if not ok:
                continue
            if by_steps:
                new = c + steps
            if v in tentative and not new < tentative[v]:
                continue
            if not by_steps:
                counts[v] = new_counts
            tentative[v] = new
            states[v] = final
            tree.pred[v] = u
            tree.edge_steps[v] = steps
            tree.attempts[v] = attempt
            heapq.heappush(heap, (new, v[0], v[1]))
    # drop bookkeeping for cells that were reached tentatively but never settled
    tree.pred = {v: p for v, p in tree.pred.items() if v in settled}
    tree.edge_steps = {v: s for v, s in tree.edge_steps.items() if v in settled}
    tree.attempts = {v: a for v, a in tree.attempts.items() if v in settled}
    return tree


def plan(
    maze: MazeSpec,
    policy,
    archive: GridArchive,
    config: PlannerConfig = PlannerConfig(),
    start: SimState | None = None,
    *,
    dynamics: Dynamics = DEFAULT_DYNAMICS,
) -> PlanTree:
    start = initial_state(maze) if start is None else start
    source, out = archive.cell_of(start.position, with_flag=True)
    if out:
        raise PlanError(f"start position {start.position} lies outside the archive bounds {archive.bounds}")
    graph = ArchiveGraph(archive)
    stochastic = not policy.deterministic

    def validate(u: Cell, v: Cell, state: SimState) -> tuple[bool, SimState, int]:
        goal = archive.cell_center(v)
        attempt = validate.attempts.get((u, v), 0)
        validate.attempts[(u, v)] = attempt + 1
        seed = edge_seed(config.seed, u, v, attempt) if stochastic else 0
        r = rollout(state, policy, goal, maze, config.max_steps_per_edge, config.eps, seed, dynamics=dynamics)
        if r.reached:
            assert math.hypot(r.final_state.x - goal[0], r.final_state.y - goal[1]) <= config.eps
        return r.reached, r.final_state, r.steps_used

    validate.attempts = {}
    return plan_with(graph, source, start, validate, config)


def _leg(maze, policy, archive, state, goal_cell, key, max_steps, config, seed, coeffs, dynamics, reward_steps,
         settle=False):
    s = edge_seed(seed, *key, 0) if not policy.deterministic else 0
    return rollout(state, policy, archive.cell_center(goal_cell), maze, max_steps, config.eps, s,
                   coeffs=coeffs, dynamics=dynamics, stop_on_reach=not settle,
                   reward_steps=None if reward_steps is None else max(0, reward_steps))


class _Episode:
    """Running totals of a chained execution with an optional episode horizon."""

    __slots__ = ("state", "steps", "total", "cut")

    def __init__(self, state, steps=0, total=0.0, cut=None):
        self.state, self.steps, self.total, self.cut = state, steps, total, cut

    def copy(self):
        return _Episode(self.state, self.steps, self.total, self.cut)

    def advance(self, r: RolloutResult, horizon):
        if horizon is not None and self.cut is None and self.steps + r.steps_used >= horizon:
            self.cut = r.cut_state
        self.state = r.final_state
        self.steps += r.steps_used
        self.total += r.return_


def _run_leg(ep: _Episode, maze, policy, archive, goal_cell, key, max_steps, config, seed, coeffs, dynamics,
             horizon, strict, settle=False):
    if strict and horizon is not None:
        max_steps = int(min(max_steps, horizon - ep.steps))
    if max_steps <= 0:
        return
    reward_steps = None if horizon is None else horizon - ep.steps
    r = _leg(maze, policy, archive, ep.state, goal_cell, key, max_steps, config, seed, coeffs, dynamics,
             reward_steps, settle)
    ep.advance(r, horizon)


def _finish(ep: _Episode, archive, target, eps, horizon) -> RolloutResult:
    cx, cy = archive.cell_center(target)
    reached = math.hypot(ep.state.x - cx, ep.state.y - cy) <= eps
    cut = None if horizon is None else (ep.cut if ep.cut is not None else ep.state)
    return RolloutResult(reached, ep.state, ep.steps, ep.total, None, cut)


def execute_to_cell(
    maze: MazeSpec,
    policy,
    plan: PlanTree,
    target: Cell,
    config: PlannerConfig,
    archive: GridArchive,
    *,
    seed: int | None = None,
    coeffs: RewardCoeffs = DEFAULT_REWARD,
    episode_len: int | None = None,
    settle_steps: int = 0,
    strict_episode: bool = False,
    start: SimState | None = None,
    dynamics: Dynamics = DEFAULT_DYNAMICS,
) -> RolloutResult:
    """Replay the planned waypoint chain from the source to ``target``.

    Each leg is a fresh rollout toward the next cell center starting wherever
    the previous leg ended (also when that leg timed out). After the last
    waypoint the policy keeps holding the target for ``settle_steps``.
    ``reached`` is judged on the final state.

    With ``episode_len`` the return only counts the first ``episode_len``
    steps and ``cut_state`` is the state at that step. ``strict_episode``
    additionally stops the whole execution there.
    """
    path = plan.path_to(target)
    seed = config.seed if seed is None else seed
    ep = _Episode(plan.start_state if start is None else start)
    for u, v in zip(path[:-1], path[1:]):
        _run_leg(ep, maze, policy, archive, v, (u, v), config.max_steps_per_edge, config, seed, coeffs, dynamics,
                 episode_len, strict_episode)
    _run_leg(ep, maze, policy, archive, target, (target, target), settle_steps, config, seed, coeffs, dynamics,
             episode_len, strict_episode, settle=True)
    return _finish(ep, archive, target, config.eps, episode_len)


def execute_tree(
    maze: MazeSpec,
    policy,
    plan: PlanTree,
    config: PlannerConfig,
    archive: GridArchive,
    *,
    seed: int | None = None,
    coeffs: RewardCoeffs = DEFAULT_REWARD,
    episode_len: int | None = None,
    settle_steps: int = 0,
    strict_episode: bool = False,
    start: SimState | None = None,
    dynamics: Dynamics = DEFAULT_DYNAMICS,
) -> dict[Cell, RolloutResult]:
    """:func:`execute_to_cell` for every settled cell at once.

    Legs shared by several targets are simulated once; the result for each
    cell is identical to calling :func:`execute_to_cell` on it.
    """
    seed = config.seed if seed is None else seed
    at: dict[Cell, _Episode] = {plan.source: _Episode(plan.start_state if start is None else start)}
    for v in plan.order:
        if v == plan.source:
            continue
        u = plan.pred[v]
        ep = at[u].copy()
        _run_leg(ep, maze, policy, archive, v, (u, v), config.max_steps_per_edge, config, seed, coeffs, dynamics,
                 episode_len, strict_episode)
        at[v] = ep
    results = {}
    for cell in plan.order:
        ep = at[cell].copy()
        _run_leg(ep, maze, policy, archive, cell, (cell, cell), settle_steps, config, seed, coeffs, dynamics,
                 episode_len, strict_episode, settle=True)
        results[cell] = _finish(ep, archive, cell, config.eps, episode_len)
    return results


PLAN_COLUMNS = ("i", "j", "status", "cost", "pred_i", "pred_j", "steps_used")


def write_plan_csv(plan: PlanTree, path: str | Path) -> Path:
    path = Path(path)
    nx, ny = plan.resolution
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(PLAN_COLUMNS)
        for i in range(nx):
            for j in range(ny):
                cell = (i, j)
                if plan.is_settled(cell):
                    p = plan.pred.get(cell)
                    w.writerow([i, j, "settled", fmt(plan.cost[i, j]), "" if p is None else p[0],
                                "" if p is None else p[1], plan.edge_steps.get(cell, 0)])
                else:
                    w.writerow([i, j, "unreachable", "inf", "", "", ""])
    return path


def read_plan_csv(path: str | Path, start_state: SimState, eps: float = 0.5) -> PlanTree:
    """Rebuild a plan (without memoized arrival states) from its CSV."""
    rows = list(csv.DictReader(Path(path).open(newline="")))
    nx = max(int(r["i"]) for r in rows) + 1
    ny = max(int(r["j"]) for r in rows) + 1
    cost = np.full((nx, ny), np.inf)
    pred, steps = {}, {}
    source = None
    for r in rows:
        cell = (int(r["i"]), int(r["j"]))
        if r["status"] != "settled":
            continue
        cost[cell] = float(r["cost"])
        steps[cell] = int(r["steps_used"])
        if r["pred_i"] == "":
            source = cell
        else:
            pred[cell] = (int(r["pred_i"]), int(r["pred_j"]))
    if source is None:
        raise PlanError(f"{path}: no source cell")
    order = sorted((c for c in zip(*np.nonzero(np.isfinite(cost)))), key=lambda c: (cost[c], c))
    order = [(int(i), int(j)) for i, j in order]
    return PlanTree(source, (nx, ny), cost, pred, {}, steps, order, start_state, eps=eps)
