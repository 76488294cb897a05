"""Deterministic planar maze simulator.

The agent is a point mass driven by a 2D force. Velocity damping is linear and
the damped dynamics are integrated exactly over each control interval (zero
order hold), so a constant action from rest follows the closed-form solution
of ``m*dv/dt = F*a - m*c*v`` at every step boundary. Walls are axis-aligned
rectangles; collisions are resolved per axis by stopping at the face that was
crossed and zeroing that velocity component.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Callable, NamedTuple, Protocol, Sequence

import numpy as np

from qdplan.layouts import LAYOUT_DEFAULTS, LAYOUTS

Rect = tuple[float, float, float, float]  # x_lo, y_lo, x_hi, y_hi

TWO_PI = 2.0 * math.pi


class MazeError(ValueError):
    pass


class UnknownMazeError(MazeError):
    pass


@dataclass(frozen=True)
class MazeSpec:
    width: float
    height: float
    obstacles: tuple[Rect, ...]
    start_pose: tuple[float, float, float]
    name: str = "custom"

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise MazeError(f"maze {self.name!r}: width and height must be positive")
        rects = []
        for rect in self.obstacles:
            x0, y0, x1, y1 = (float(v) for v in rect)
            if not (x0 < x1 and y0 < y1):
                raise MazeError(f"maze {self.name!r}: degenerate obstacle {rect}")
            if x0 < 0 or y0 < 0 or x1 > self.width or y1 > self.height:
                raise MazeError(f"maze {self.name!r}: obstacle {rect} leaves the world bounds")
            rects.append((x0, y0, x1, y1))
        object.__setattr__(self, "obstacles", tuple(rects))
        sx, sy, sh = (float(v) for v in self.start_pose)
        object.__setattr__(self, "start_pose", (sx, sy, sh))
        if not self.is_free(sx, sy):
            raise MazeError(f"maze {self.name!r}: start pose {self.start_pose} is not in free space")

    def is_free(self, x: float, y: float) -> bool:
        """True when (x, y) is inside the world and not strictly inside a wall."""
        if not (0.0 <= x <= self.width and 0.0 <= y <= self.height):
            return False
        for x0, y0, x1, y1 in self.obstacles:
            if x0 < x < x1 and y0 < y < y1:
                return False
        return True

    @cached_property
    def obstacle_array(self) -> np.ndarray:
        return np.array(self.obstacles, dtype=float).reshape(-1, 4)

    @property
    def bounds(self) -> tuple[tuple[float, float], tuple[float, float]]:
        return ((0.0, self.width), (0.0, self.height))


class SimState(NamedTuple):
    x: float
    y: float
    heading: float
    vx: float
    vy: float
    omega: float
    step: int = 0

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)

    @property
    def velocity(self) -> tuple[float, float]:
        return (self.vx, self.vy)


class GoalObservation(NamedTuple):
    p_rel: tuple[float, float]
    base_obs: tuple[float, ...]

    def as_array(self) -> np.ndarray:
        return np.array((*self.p_rel, *self.base_obs), dtype=float)


OBS_DIM = 7  # p_rel (2) + sin h, cos h, vx, vy, omega


@dataclass(frozen=True)
class RewardCoeffs:
    """Weights of the goal-reaching reward.

    The goal, control, rotation and angular-velocity weights are penalties
    (negative, or zero to disable a term); the alive bonus is positive.
    """

    c_g: float = -1.0
    c_a: float = -0.05
    c_R: float = -0.1
    c_omega: float = -0.01
    c_alive: float = 1.0
    r_alive: float = 0.1
    rotation_mode: str = "none"

    def __post_init__(self):
        if not self.c_g < 0:
            raise ValueError("c_g must be negative")
        for name in ("c_a", "c_R", "c_omega"):
            if getattr(self, name) > 0:
                raise ValueError(f"{name} must be <= 0")
        if not (self.c_alive > 0 and self.r_alive > 0):
            raise ValueError("c_alive and r_alive must be positive")
        if self.rotation_mode not in ("none", "heading_rate"):
            raise ValueError(f"unknown rotation_mode {self.rotation_mode!r}")


DEFAULT_REWARD = RewardCoeffs()


@dataclass(frozen=True)
class Dynamics:
    dt: float = 0.05
    mass: float = 1.0
    max_force: float = 4.0
    damping: float = 2.0  # 1/s
    turn_gain: float = 8.0  # heading chases the velocity direction at this rate
    max_turn_rate: float = 2.0 * math.pi
    min_turn_speed: float = 1e-6

    def __post_init__(self):
        if self.dt <= 0 or self.mass <= 0 or self.max_force <= 0 or self.damping < 0:
            raise ValueError("dt, mass and max_force must be positive and damping >= 0")

    @cached_property
    def zoh(self) -> tuple[float, float, float, float]:
        """(velocity decay, velocity->displacement, accel->velocity, accel->displacement)."""
        c, dt = self.damping, self.dt
        if c == 0.0:
            return 1.0, dt, dt, 0.5 * dt * dt
        decay = math.exp(-c * dt)
        g = (1.0 - decay) / c
        return decay, g, g, (dt - g) / c

    @property
    def top_speed(self) -> float:
        return math.inf if self.damping == 0 else self.max_force / (self.mass * self.damping)


DEFAULT_DYNAMICS = Dynamics()


def _clip1(v: float) -> float:
    return -1.0 if v < -1.0 else (1.0 if v > 1.0 else v)


def _wrap(angle: float) -> float:
    return (angle + math.pi) % TWO_PI - math.pi


def _sweep(p: float, q: float, other: float, axis: int, obstacles) -> tuple[float, bool]:
    """Move coordinate ``p`` toward ``q`` along ``axis`` and stop at the first wall face."""
    hit = False
    if axis == 0:
        if q > p:
            for x0, y0, x1, y1 in obstacles:
                if y0 < other < y1 and p <= x0 < q:
                    q, hit = x0, True
        elif q < p:
            for x0, y0, x1, y1 in obstacles:
                if y0 < other < y1 and q < x1 <= p:
                    q, hit = x1, True
    else:
        if q > p:
            for x0, y0, x1, y1 in obstacles:
                if x0 < other < x1 and p <= y0 < q:
                    q, hit = y0, True
        elif q < p:
            for x0, y0, x1, y1 in obstacles:
                if x0 < other < x1 and q < y1 <= p:
                    q, hit = y1, True
    return q, hit


def step(
    state: SimState,
    action: Sequence[float],
    maze: MazeSpec,
    dt: float | None = None,
    dynamics: Dynamics = DEFAULT_DYNAMICS,
) -> SimState:
    if dt is not None and dt != dynamics.dt:
        dynamics = replace(dynamics, dt=dt)
    decay, g_v, g_av, g_ap = dynamics.zoh
    acc = dynamics.max_force / dynamics.mass
    ax = acc * _clip1(float(action[0]))
    ay = acc * _clip1(float(action[1]))

    vx = state.vx * decay + ax * g_av
    vy = state.vy * decay + ay * g_av
    nx = state.x + (state.vx * g_v + ax * g_ap)
    ny = state.y + (state.vy * g_v + ay * g_ap)

    obstacles = maze.obstacles
    nx, hit = _sweep(state.x, nx, state.y, 0, obstacles)
    if nx < 0.0:
        nx, hit = 0.0, True
    elif nx > maze.width:
        nx, hit = maze.width, True
    if hit:
        vx = 0.0
    ny, hit = _sweep(state.y, ny, nx, 1, obstacles)
    if ny < 0.0:
        ny, hit = 0.0, True
    elif ny > maze.height:
        ny, hit = maze.height, True
    if hit:
        vy = 0.0

    heading = state.heading
    if math.hypot(vx, vy) > dynamics.min_turn_speed:
        err = _wrap(math.atan2(vy, vx) - heading)
        omega = dynamics.turn_gain * err
        omega = max(-dynamics.max_turn_rate, min(dynamics.max_turn_rate, omega))
    else:
        omega = 0.0
    heading = _wrap(heading + omega * dynamics.dt)
    return SimState(nx, ny, heading, vx, vy, omega, state.step + 1)


def step_batch(
    pos: np.ndarray,
    vel: np.ndarray,
    heading: np.ndarray,
    action: np.ndarray,
    maze: MazeSpec,
    dynamics: Dynamics = DEFAULT_DYNAMICS,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized :func:`step` over a batch of agents sharing one maze.

    Returns new (pos, vel, heading, omega) arrays of shapes (B,2), (B,2), (B,), (B,).
    """
    decay, g_v, g_av, g_ap = dynamics.zoh
    acc = (dynamics.max_force / dynamics.mass) * np.clip(action, -1.0, 1.0)
    new_vel = vel * decay + acc * g_av
    target = pos + (vel * g_v + acc * g_ap)

    rects = maze.obstacle_array
    x, y = pos[:, 0], pos[:, 1]
    nx = target[:, 0].copy()
    hit_x = np.zeros(len(pos), dtype=bool)
    if len(rects):
        x0, y0, x1, y1 = (rects[:, k][None, :] for k in range(4))
        inside_y = (y0 < y[:, None]) & (y[:, None] < y1)
        right = inside_y & (x[:, None] <= x0) & (x0 < nx[:, None])
        left = inside_y & (nx[:, None] < x1) & (x1 <= x[:, None])
        stop_r = np.where(right, x0, np.inf).min(axis=1)
        stop_l = np.where(left, x1, -np.inf).max(axis=1)
        hit_x = right.any(axis=1) | left.any(axis=1)
        nx = np.minimum(nx, stop_r)
        nx = np.maximum(nx, stop_l)
    hit_x |= (nx < 0.0) | (nx > maze.width)
    nx = np.clip(nx, 0.0, maze.width)

    ny = target[:, 1].copy()
    hit_y = np.zeros(len(pos), dtype=bool)
    if len(rects):
        inside_x = (x0 < nx[:, None]) & (nx[:, None] < x1)
        up = inside_x & (y[:, None] <= y0) & (y0 < ny[:, None])
        down = inside_x & (ny[:, None] < y1) & (y1 <= y[:, None])
        stop_u = np.where(up, y0, np.inf).min(axis=1)
        stop_d = np.where(down, y1, -np.inf).max(axis=1)
        hit_y = up.any(axis=1) | down.any(axis=1)
        ny = np.minimum(ny, stop_u)
        ny = np.maximum(ny, stop_d)
    hit_y |= (ny < 0.0) | (ny > maze.height)
    ny = np.clip(ny, 0.0, maze.height)

    new_vel[hit_x, 0] = 0.0
    new_vel[hit_y, 1] = 0.0
    speed = np.hypot(new_vel[:, 0], new_vel[:, 1])
    err = (np.arctan2(new_vel[:, 1], new_vel[:, 0]) - heading + math.pi) % TWO_PI - math.pi
    omega = np.clip(dynamics.turn_gain * err, -dynamics.max_turn_rate, dynamics.max_turn_rate)
    omega = np.where(speed > dynamics.min_turn_speed, omega, 0.0)
    new_heading = (heading + omega * dynamics.dt + math.pi) % TWO_PI - math.pi
    return np.stack([nx, ny], axis=1), new_vel, new_heading, omega


def rotation_terms(state: SimState, mode: str, dt: float = DEFAULT_DYNAMICS.dt) -> tuple[float, float]:
    # A planar body cannot roll or pitch; "heading_rate" charges the heading
    # excursion over the last step instead.
    if mode == "heading_rate":
        return (abs(state.omega) * dt, 0.0)
    return (0.0, 0.0)


def reward(
    state: SimState,
    action: Sequence[float],
    p_rel: Sequence[float],
    coeffs: RewardCoeffs = DEFAULT_REWARD,
    alive: bool = True,
    rotation: tuple[float, float] | None = None,
) -> float:
    d = math.hypot(p_rel[0], p_rel[1])
    goal_term = d * d if d >= 1.0 else d
    rx, ry = rotation if rotation is not None else rotation_terms(state, coeffs.rotation_mode)
    r = (
        coeffs.c_g * goal_term
        + coeffs.c_a * (action[0] * action[0] + action[1] * action[1])
        + coeffs.c_R * (abs(rx) + abs(ry))
        + coeffs.c_omega * abs(state.omega)
    )
    if alive:
        r += coeffs.c_alive * coeffs.r_alive
    return r


def reward_lower_bound(
    coeffs: RewardCoeffs, maze: MazeSpec, dynamics: Dynamics = DEFAULT_DYNAMICS
) -> float:
    """Smallest per-step reward reachable in ``maze`` (goal anywhere in bounds)."""
    d = math.hypot(maze.width, maze.height)
    goal_term = d * d if d >= 1.0 else d
    rot = dynamics.max_turn_rate * dynamics.dt if coeffs.rotation_mode == "heading_rate" else 0.0
    return (
        coeffs.c_g * goal_term
        + coeffs.c_a * 2.0
        + coeffs.c_R * rot
        + coeffs.c_omega * dynamics.max_turn_rate
        + coeffs.c_alive * coeffs.r_alive
    )


def observe(state: SimState, goal: Sequence[float]) -> GoalObservation:
    return GoalObservation(
        (goal[0] - state.x, goal[1] - state.y),
        (math.sin(state.heading), math.cos(state.heading), state.vx, state.vy, state.omega),
    )


def initial_state(maze: MazeSpec) -> SimState:
    x, y, h = maze.start_pose
    return SimState(x, y, h, 0.0, 0.0, 0.0, 0)


def perturb_state(
    state: SimState, maze: MazeSpec, pos_noise: float, vel_noise: float, rng: np.random.Generator
) -> SimState:
    """Reset noise: uniform position jitter in [-pos_noise, pos_noise] and Gaussian velocity."""
    dx, dy = rng.uniform(-pos_noise, pos_noise, size=2) if pos_noise > 0 else (0.0, 0.0)
    dvx, dvy = rng.normal(0.0, vel_noise, size=2) if vel_noise > 0 else (0.0, 0.0)
    x, y = state.x + dx, state.y + dy
    if not maze.is_free(x, y):
        x, y = state.x, state.y
    return state._replace(x=float(x), y=float(y), vx=state.vx + float(dvx), vy=state.vy + float(dvy))


class Controller(Protocol):
    def controller(self, rng: np.random.Generator | None) -> Callable[[SimState, Sequence[float]], tuple[float, float]]:
        ...


@dataclass
class RolloutResult:
    reached: bool
    final_state: SimState
    steps_used: int
    return_: float
    trajectory: list[SimState] | None = field(default=None, repr=False)
    # state after ``reward_steps`` steps (or the final state if the episode was shorter)
    cut_state: SimState | None = None


def rollout(
    start: SimState,
    policy: Controller,
    goal: Sequence[float],
    maze: MazeSpec,
    max_steps: int,
    eps: float,
    seed: int | np.random.Generator | None = 0,
    *,
    coeffs: RewardCoeffs = DEFAULT_REWARD,
    dynamics: Dynamics = DEFAULT_DYNAMICS,
    record: bool = False,
    stop_on_reach: bool = True,
    reward_steps: int | None = None,
) -> RolloutResult:
    """Run ``policy`` closed loop toward ``goal``.

    With ``stop_on_reach`` the episode ends on the first state within ``eps``
    of the goal (possibly the start state itself); otherwise it always runs
    ``max_steps`` and ``reached`` reflects the final state only. With
    ``reward_steps`` only the first that many rewards are summed and the
    state at that step is kept in ``cut_state``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if max_steps < 0:
        raise ValueError("max_steps must be non-negative")
    gx, gy = float(goal[0]), float(goal[1])
    state = start
    traj = [start] if record else None
    if stop_on_reach and math.hypot(gx - state.x, gy - state.y) <= eps:
        return RolloutResult(True, state, 0, 0.0, traj, state if reward_steps is not None else None)

    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ctl = policy.controller(rng)
    goal_xy = (gx, gy)
    limit = max_steps if reward_steps is None else reward_steps
    cut = start if limit <= 0 else None
    total = 0.0
    reached = False
    used = 0
    for used in range(1, max_steps + 1):
        action = ctl(state, goal_xy)
        state = step(state, action, maze, dynamics=dynamics)
        p_rel = (gx - state.x, gy - state.y)
        if used <= limit:
            total += reward(state, action, p_rel, coeffs)
            if used == limit:
                cut = state
        if record:
            traj.append(state)
        if stop_on_reach and math.hypot(p_rel[0], p_rel[1]) <= eps:
            reached = True
            break
    if not stop_on_reach:
        reached = math.hypot(gx - state.x, gy - state.y) <= eps
    if reward_steps is None:
        cut = None
    elif cut is None:
        cut = state
    return RolloutResult(reached, state, used, total, traj, cut)


def parse_maze_text(text: str, cell_size: float = 1.0, name: str = "custom") -> MazeSpec:
    """Build a maze from an ASCII grid (``#`` wall, ``.`` free, ``S`` start)."""
    rows = [line.rstrip("\r") for line in text.strip("\n").splitlines() if line.strip()]
    if not rows:
        raise MazeError("empty maze grid")
    ncols = len(rows[0])
    if any(len(r) != ncols for r in rows):
        raise MazeError("maze grid rows have unequal length")
    bad = set("".join(rows)) - set("#.S")
    if bad:
        raise MazeError(f"unexpected characters in maze grid: {sorted(bad)}")
    nrows = len(rows)
    starts = [(c, nrows - 1 - r) for r, row in enumerate(rows) for c, ch in enumerate(row) if ch == "S"]
    if len(starts) != 1:
        raise MazeError(f"maze grid needs exactly one 'S', found {len(starts)}")

    # Horizontal runs per row, then merge identical runs in consecutive rows.
    open_runs: dict[tuple[int, int], list[int]] = {}
    rects: list[tuple[int, int, int, int]] = []
    for y in range(nrows):
        row = rows[nrows - 1 - y]
        runs = []
        c = 0
        while c < ncols:
            if row[c] == "#":
                s = c
                while c < ncols and row[c] == "#":
                    c += 1
                runs.append((s, c))
            else:
                c += 1
        next_open = {}
        for run in runs:
            if run in open_runs:
                open_runs[run][1] = y + 1
                next_open[run] = open_runs.pop(run)
            else:
                next_open[run] = [y, y + 1]
        for run, (ya, yb) in open_runs.items():
            rects.append((run[0], ya, run[1], yb))
        open_runs = next_open
    for run, (ya, yb) in open_runs.items():
        rects.append((run[0], ya, run[1], yb))
    rects.sort(key=lambda r: (r[1], r[0]))

    cs = float(cell_size)
    sc, sr = starts[0]
    return MazeSpec(
        width=ncols * cs,
        height=nrows * cs,
        obstacles=tuple((x0 * cs, y0 * cs, x1 * cs, y1 * cs) for x0, y0, x1, y1 in rects),
        start_pose=((sc + 0.5) * cs, (sr + 0.5) * cs, 0.0),
        name=name,
    )


def load_maze_file(path: str | Path, cell_size: float = 1.0) -> MazeSpec:
    path = Path(path)
    if not path.is_file():
        raise MazeError(f"maze file not found: {path}")
    return parse_maze_text(path.read_text(), cell_size=cell_size, name=path.stem)


def builtin_maze(name: str) -> MazeSpec:
    if name not in LAYOUTS:
        raise UnknownMazeError(f"unknown maze {name!r}; available layouts: {', '.join(sorted(LAYOUTS))}")
    return parse_maze_text(LAYOUTS[name], cell_size=1.0, name=name)


def maze_defaults(name: str) -> dict:
    return dict(LAYOUT_DEFAULTS.get(name, {"resolution": (32, 32), "episode_len": 3000}))


def free_cell_mask(maze: MazeSpec, shape: tuple[int, int]) -> np.ndarray:
    """Boolean (nx, ny) mask of grid cells whose centers lie in free space."""
    nx, ny = shape
    wx, wy = maze.width / nx, maze.height / ny
    mask = np.zeros(shape, dtype=bool)
    for i in range(nx):
        for j in range(ny):
            mask[i, j] = maze.is_free((i + 0.5) * wx, (j + 0.5) * wy)
    return mask
