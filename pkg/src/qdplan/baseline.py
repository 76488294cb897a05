"""Vanilla MAP-Elites over policy network parameters.

Each candidate is the goal-conditioned network with its goal input held at
zero, rolled out once from the maze start. Its descriptor is the final xy
position and its objective the undiscounted episode return.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from qdplan import mlp
from qdplan.archive import GridArchive, fmt
from qdplan.policy import DEFAULT_HIDDEN, PolicyParams
from qdplan.world import (
    DEFAULT_DYNAMICS,
    DEFAULT_REWARD,
    OBS_DIM,
    Dynamics,
    MazeSpec,
    RewardCoeffs,
    SimState,
    initial_state,
    reward_lower_bound,
    step_batch,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MeConfig:
    batch_size: int = 64
    iterations: int = 100
    sigma: float = 0.1
    init_pop: int = 64
    episode_len: int = 250
    seed: int = 0
    init_scale: float = 1.0
    hidden: tuple[int, ...] = DEFAULT_HIDDEN

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.batch_size < 1 or self.init_pop < 1:
            raise ValueError("batch_size and init_pop must be >= 1")
        if self.iterations < 0 or self.episode_len < 1:
            raise ValueError("iterations must be >= 0 and episode_len >= 1")

    @property
    def shapes(self):
        return mlp.shapes_for((OBS_DIM, *self.hidden, 2))


def iterations_for_budget(budget_steps: int, config: MeConfig) -> int:
    """Largest iteration count whose total simulator steps fit in ``budget_steps``."""
    rest = budget_steps - config.init_pop * config.episode_len
    return max(0, rest // (config.batch_size * config.episode_len))


def random_params(shapes, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    parts = []
    for i, o in shapes:
        parts.append(rng.normal(0.0, scale / np.sqrt(i), size=i * o))
        parts.append(np.zeros(o))
    parts.append(np.zeros(2))  # log-std, unused by deterministic rollouts
    return np.concatenate(parts)


def evaluate_candidates(
    flats: np.ndarray,
    shapes,
    maze: MazeSpec,
    episode_len: int,
    coeffs: RewardCoeffs = DEFAULT_REWARD,
    *,
    starts: list[SimState] | None = None,
    dynamics: Dynamics = DEFAULT_DYNAMICS,
) -> tuple[np.ndarray, np.ndarray]:
    """Roll out a batch of networks with zeroed goal input; returns (objectives, final xy)."""
    flats = np.atleast_2d(np.asarray(flats, dtype=float))
    nets = flats[:, :-2]
    B = len(flats)
    if starts is None:
        starts = [initial_state(maze)] * B
    pos = np.array([[s.x, s.y] for s in starts], dtype=float)
    vel = np.array([[s.vx, s.vy] for s in starts], dtype=float)
    heading = np.array([s.heading for s in starts], dtype=float)
    omega = np.array([s.omega for s in starts], dtype=float)
    total = np.zeros(B)
    zeros = np.zeros((B, 2))
    for _ in range(episode_len):
        obs = np.column_stack([zeros, np.sin(heading), np.cos(heading), vel, omega])
        a = np.clip(np.tanh(mlp.forward_many(nets, shapes, obs)), -1.0, 1.0)
        pos, vel, heading, omega = step_batch(pos, vel, heading, a, maze, dynamics)
        rot = np.abs(omega) * dynamics.dt if coeffs.rotation_mode == "heading_rate" else 0.0
        # goal channel is zero, so the goal term of the reward vanishes
        total += (coeffs.c_a * (a * a).sum(axis=1) + coeffs.c_R * rot
                  + coeffs.c_omega * np.abs(omega) + coeffs.c_alive * coeffs.r_alive)
    return total, pos


def evaluate_candidate(
    params: PolicyParams,
    maze: MazeSpec,
    episode_len: int,
    reward_coeffs: RewardCoeffs = DEFAULT_REWARD,
    dynamics: Dynamics = DEFAULT_DYNAMICS,
) -> tuple[float, tuple[float, float]]:
    obj, desc = evaluate_candidates(params.flat_weights[None, :], params.layer_shapes, maze, episode_len,
                                    reward_coeffs, dynamics=dynamics)
    return float(obj[0]), (float(desc[0, 0]), float(desc[0, 1]))


def _evaluate_chunked(flats, shapes, maze, episode_len, coeffs, dynamics, threads, starts=None):
    if threads <= 1 or len(flats) < 2 * threads:
        return evaluate_candidates(flats, shapes, maze, episode_len, coeffs, starts=starts, dynamics=dynamics)
    chunks = np.array_split(np.arange(len(flats)), threads)
    with ThreadPoolExecutor(threads) as pool:
        parts = list(pool.map(
            lambda idx: evaluate_candidates(flats[idx], shapes, maze, episode_len, coeffs,
                                            starts=None if starts is None else [starts[k] for k in idx],
                                            dynamics=dynamics),
            chunks,
        ))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


@dataclass
class MeLogRow:
    iteration: int
    evaluations: int
    sim_steps: int
    qd_score: float
    qd_score_offset: float
    coverage: float
    best: float


@dataclass
class MapElitesRun:
    archive: GridArchive
    params: dict[int, np.ndarray]
    config: MeConfig
    offset: float
    log: list[MeLogRow] = field(default_factory=list)
    total_steps: int = 0
    total_rollouts: int = 0
    next_id: int = 0

    def policy(self, occupant_id: int) -> PolicyParams:
        return PolicyParams(self.params[occupant_id], self.config.shapes)

    def elite_params(self) -> dict[int, np.ndarray]:
        """Parameters of the current archive occupants only."""
        return {e.occupant_id: self.params[e.occupant_id] for e in self.archive.elites()}

    def _record(self, iteration: int):
        m = self.archive.metrics(self.offset)
        self.log.append(MeLogRow(iteration, self.total_rollouts, self.total_steps, m.qd_score,
                                 m.qd_score_offset, m.coverage, m.best))

    def write_log_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(list(MeLogRow.__dataclass_fields__))
            for row in self.log:
                w.writerow([fmt(v) if isinstance(v, float) else v for v in asdict(row).values()])
        return path


def _add_batch(run: MapElitesRun, flats: np.ndarray, maze, coeffs, dynamics, threads) -> int:
    cfg = run.config
    objs, descs = _evaluate_chunked(flats, cfg.shapes, maze, cfg.episode_len, coeffs, dynamics, threads)
    run.total_steps += len(flats) * cfg.episode_len
    run.total_rollouts += len(flats)
    inserted = 0
    for k in range(len(flats)):
        oid = run.next_id
        run.next_id += 1
        if run.archive.insert(oid, float(objs[k]), descs[k]):
            run.params[oid] = flats[k]
            inserted += 1
    # keep only parameters that are still referenced by the archive
    live = {e.occupant_id for e in run.archive.elites()}
    for oid in [o for o in run.params if o not in live]:
        del run.params[oid]
    return inserted


def me_step(run: MapElitesRun, rng: np.random.Generator, maze: MazeSpec,
            coeffs: RewardCoeffs = DEFAULT_REWARD, dynamics: Dynamics = DEFAULT_DYNAMICS,
            threads: int = 1) -> dict:
    """One MAP-Elites generation: uniform parent selection, Gaussian mutation, insertion."""
    elites = run.archive.elites()
    if not elites:
        raise ValueError("me_step needs a non-empty archive")
    cfg = run.config
    picks = rng.integers(len(elites), size=cfg.batch_size)
    parents = np.stack([run.params[elites[k].occupant_id] for k in picks])
    noise = rng.standard_normal(parents.shape)
    noise[:, -2:] = 0.0
    children = parents + cfg.sigma * noise
    inserted = _add_batch(run, children, maze, coeffs, dynamics, threads)
    return {"inserted": inserted, "occupied": len(run.archive)}


def run_map_elites(
    maze: MazeSpec,
    config: MeConfig,
    resolution: tuple[int, int],
    coeffs: RewardCoeffs = DEFAULT_REWARD,
    *,
    dynamics: Dynamics = DEFAULT_DYNAMICS,
    threads: int = 1,
) -> MapElitesRun:
    rng = np.random.default_rng(config.seed)
    archive = GridArchive.for_maze(maze, resolution)
    offset = config.episode_len * reward_lower_bound(coeffs, maze, dynamics)
    run = MapElitesRun(archive, {}, config, offset)
    init = np.stack([random_params(config.shapes, rng, config.init_scale) for _ in range(config.init_pop)])
    _add_batch(run, init, maze, coeffs, dynamics, threads)
    run._record(0)
    for it in range(1, config.iterations + 1):
        me_step(run, rng, maze, coeffs, dynamics, threads)
        run._record(it)
        if it % 50 == 0:
            log.info("ME iter %d coverage %.3f", it, run.log[-1].coverage)
    return run


def save_elites(run: MapElitesRun, path: str | Path) -> Path:
    path = Path(path)
    ids = sorted(run.elite_params())
    np.savez(path, ids=np.array(ids, dtype=np.int64),
             weights=np.stack([run.params[i] for i in ids]) if ids else np.zeros((0, 0)),
             shapes=np.array(run.config.shapes, dtype=np.int64))
    return path


def load_elites(path: str | Path) -> tuple[dict[int, PolicyParams], tuple]:
    with np.load(path) as data:
        shapes = tuple((int(a), int(b)) for a, b in data["shapes"])
        return {int(i): PolicyParams(w.copy(), shapes) for i, w in zip(data["ids"], data["weights"])}, shapes
