"""Minimal PPO (clipped surrogate + GAE) for the goal-reaching policy.

Goals are drawn uniformly from a disk around the agent. Reaching a goal ends
that goal's episode for bootstrapping purposes and a new goal is drawn on the
spot while the body keeps moving. The policy is a tanh-squashed diagonal
Gaussian over an MLP mean; the critic is a separate MLP on the same input.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from qdplan import mlp
from qdplan.archive import fmt
from qdplan.policy import PolicyHandle, PolicyParams, save_policy
from qdplan.world import (
    DEFAULT_DYNAMICS,
    DEFAULT_REWARD,
    OBS_DIM,
    Dynamics,
    MazeSpec,
    RewardCoeffs,
    step_batch,
)

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class PpoConfig:
    goal_radius: float = 5.0
    n_envs: int = 16
    steps_per_rollout: int = 256
    total_steps: int = 2_000_000
    lr: float = 3e-4
    clip_eps: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    epochs: int = 4
    minibatches: int = 8
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    anneal_lr: bool = True
    hidden: tuple[int, ...] = (64, 64)
    goal_eps: float = 0.5
    goal_timeout: int = 150
    goal_mode: str = "hold"  # or "resample"
    episode_len: int = 1000
    normalize_obs: bool = False
    checkpoint_every: int = 0
    seed: int = 0
    reward: RewardCoeffs = field(default_factory=lambda: DEFAULT_REWARD)

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must be in [0, 1]")
        if not self.clip_eps > 0:
            raise ValueError("clip_eps must be positive")
        if not self.goal_radius > 0:
            raise ValueError("goal_radius must be positive")
        if self.n_envs < 1 or self.steps_per_rollout < 1 or self.epochs < 1 or self.minibatches < 1:
            raise ValueError("n_envs, steps_per_rollout, epochs and minibatches must be >= 1")
        if self.goal_mode not in ("hold", "resample"):
            raise ValueError(f"unknown goal_mode {self.goal_mode!r}")
        if self.total_steps < self.batch_size:
            raise ValueError(f"total_steps must cover at least one rollout batch ({self.batch_size} steps)")

    @property
    def batch_size(self) -> int:
        return self.n_envs * self.steps_per_rollout

    @property
    def iterations(self) -> int:
        # round up so that at least total_steps are collected
        return -(-self.total_steps // self.batch_size)


def sample_goal_tries(agent_pos, radius: float, maze: MazeSpec, rng: np.random.Generator,
                      max_tries: int = 1000) -> tuple[tuple[float, float], int]:
    """Uniform sample from the free part of the disk; returns (goal, rejections)."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    ax, ay = float(agent_pos[0]), float(agent_pos[1])
    for tries in range(max_tries):
        r = radius * math.sqrt(rng.random())
        theta = 2.0 * math.pi * rng.random()
        gx, gy = ax + r * math.cos(theta), ay + r * math.sin(theta)
        if maze.is_free(gx, gy):
            return (gx, gy), tries
    return (ax, ay), max_tries


def sample_goal(agent_pos, radius: float, maze: MazeSpec, rng: np.random.Generator) -> tuple[float, float]:
    return sample_goal_tries(agent_pos, radius, maze, rng)[0]


def sample_free_point(maze: MazeSpec, rng: np.random.Generator) -> tuple[float, float]:
    while True:
        x, y = rng.uniform(0.0, maze.width), rng.uniform(0.0, maze.height)
        if maze.is_free(x, y):
            return (x, y)


def compute_gae(rewards, values, dones, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and value targets.

    ``values`` has one more entry (along time) than ``rewards``: the bootstrap
    value of the state after the last step. ``dones[t]`` marks that the
    episode ended with step ``t``, so nothing is bootstrapped across it.
    Works on (T,) or (T, n_envs) arrays.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    T = rewards.shape[0]
    if values.shape[0] != T + 1 or dones.shape != rewards.shape or values.shape[1:] != rewards.shape[1:]:
        raise ValueError(
            f"length mismatch: rewards {rewards.shape}, values {values.shape} (need T+1), dones {dones.shape}"
        )
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[1:])
    for t in range(T - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * live - values[t]
        last = delta + gamma * lam * live * last
        adv[t] = last
    return adv, adv + values[:T]


class ActorCritic:
    """Shapes and slicing of the joint parameter vector [policy net, log_std, value net]."""

    def __init__(self, obs_dim: int = OBS_DIM, hidden=(64, 64), act_dim: int = 2):
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.pi_shapes = mlp.shapes_for((obs_dim, *hidden, act_dim))
        self.v_shapes = mlp.shapes_for((obs_dim, *hidden, 1))
        self.n_pi = mlp.n_params(self.pi_shapes)
        self.n_v = mlp.n_params(self.v_shapes)
        self.size = self.n_pi + act_dim + self.n_v

    def split(self, theta: np.ndarray):
        a = self.n_pi
        b = a + self.act_dim
        return theta[:a], theta[a:b], theta[b:]

    def init(self, rng: np.random.Generator) -> np.ndarray:
        pi = mlp.init_params(self.pi_shapes, rng, out_gain=0.01)
        v = mlp.init_params(self.v_shapes, rng, out_gain=1.0)
        return np.concatenate([pi, np.zeros(self.act_dim), v])

    def policy_params(self, theta: np.ndarray) -> PolicyParams:
        pi, log_std, _ = self.split(theta)
        return PolicyParams(np.concatenate([pi, log_std]), self.pi_shapes, self.obs_dim, self.act_dim)


def gaussian_logp(u: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (u - mean) * np.exp(-log_std)
    return (-0.5 * z * z - log_std - 0.5 * LOG_2PI).sum(axis=-1)


def ppo_loss_and_grad(theta: np.ndarray, ac: ActorCritic, batch: dict, clip_eps: float,
                      value_coef: float, entropy_coef: float) -> tuple[float, np.ndarray, dict]:
    """Total PPO loss (to minimize) and its exact gradient with respect to ``theta``.

    ``batch`` holds ``obs``, ``u`` (pre-squash actions), ``logp_old``, ``adv``
    (already normalized) and ``ret``.
    """
    pi, log_std, vw = ac.split(theta)
    obs, u = batch["obs"], batch["u"]
    adv, ret = batch["adv"], batch["ret"]
    n = len(obs)

    mean, pi_acts = mlp.forward(pi, ac.pi_shapes, obs)
    inv_std = np.exp(-log_std)
    z = (u - mean) * inv_std
    logp = (-0.5 * z * z - log_std - 0.5 * LOG_2PI).sum(axis=1)
    ratio = np.exp(logp - batch["logp_old"])
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    pg_loss = -np.minimum(unclipped, clipped).mean()
    # d(min)/d(ratio): the unclipped branch always carries gradient; the
    # clipped branch only while the ratio sits inside the clip interval.
    in_clip = (ratio >= 1.0 - clip_eps) & (ratio <= 1.0 + clip_eps)
    use_unclipped = unclipped <= clipped
    dmin_dratio = np.where(use_unclipped | in_clip, adv, 0.0)
    g_logp = -(dmin_dratio * ratio) / n

    values, v_acts = mlp.forward(vw, ac.v_shapes, obs)
    values = values[:, 0]
    v_err = values - ret
    v_loss = 0.5 * np.mean(v_err * v_err)
    entropy = float((log_std + 0.5 * (LOG_2PI + 1.0)).sum())

    loss = pg_loss + value_coef * v_loss - entropy_coef * entropy

    g_mean = g_logp[:, None] * z * inv_std
    g_log_std = (g_logp[:, None] * (z * z - 1.0)).sum(axis=0) - entropy_coef
    g_pi = mlp.backward(pi, ac.pi_shapes, pi_acts, g_mean)
    g_v = mlp.backward(vw, ac.v_shapes, v_acts, (value_coef * v_err / n)[:, None])
    grad = np.concatenate([g_pi, g_log_std, g_v])

    log_ratio = logp - batch["logp_old"]
    stats = {
        "pg_loss": float(pg_loss),
        "v_loss": float(v_loss),
        "entropy": entropy,
        "approx_kl": float(np.mean((ratio - 1.0) - log_ratio)),
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > clip_eps)),
    }
    return float(loss), grad, stats


class Adam:
    def __init__(self, size: int, lr: float, betas=(0.9, 0.999), eps: float = 1e-5):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def ppo_update(theta: np.ndarray, ac: ActorCritic, batch: dict, config: PpoConfig,
               opt: Adam, rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    """Several epochs of minibatch Adam steps on the clipped objective.

    Advantages are normalized over the whole batch first. Raises
    :class:`TrainingDivergedError` on a non-finite loss or gradient.
    """
    adv = batch["adv"]
    batch = dict(batch, adv=(adv - adv.mean()) / (adv.std() + 1e-8))
    n = len(batch["obs"])
    mb = max(1, n // config.minibatches)
    totals: dict[str, float] = {}
    count = 0
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, mb):
            idx = perm[start : start + mb]
            sub = {k: v[idx] for k, v in batch.items()}
            loss, grad, stats = ppo_loss_and_grad(theta, ac, sub, config.clip_eps, config.value_coef, config.entropy_coef)
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                raise TrainingDivergedError(
                    f"non-finite PPO loss {loss} (stats {stats}, |theta|max {np.abs(theta).max():.3g})"
                )
            norm = float(np.linalg.norm(grad))
            if config.max_grad_norm and norm > config.max_grad_norm:
                grad = grad * (config.max_grad_norm / norm)
            theta = opt.step(theta, grad)
            for k, v in stats.items():
                totals[k] = totals.get(k, 0.0) + v
            count += 1
    return theta, {k: v / count for k, v in totals.items()}


class RunningNorm:
    def __init__(self, dim: int):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 1e-4

    def update(self, x: np.ndarray):
        bm, bv, bc = x.mean(axis=0), x.var(axis=0), len(x)
        delta = bm - self.mean
        tot = self.count + bc
        self.mean = self.mean + delta * bc / tot
        self.var = (self.var * self.count + bv * bc + delta ** 2 * self.count * bc / tot) / tot
        self.count = tot

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / np.sqrt(self.var + 1e-8)


def fold_normalization(params: PolicyParams, norm: RunningNorm) -> PolicyParams:
    """Absorb an input normalizer into the first layer so the saved policy sees raw observations."""
    flat = params.flat_weights.copy()
    i, o = params.layer_shapes[0]
    w = flat[: i * o].reshape(i, o)
    b = flat[i * o : i * o + o]
    scale = 1.0 / np.sqrt(norm.var + 1e-8)
    new_w = w * scale[:, None]
    new_b = b - (norm.mean * scale) @ w
    flat[: i * o] = new_w.ravel()
    flat[i * o : i * o + o] = new_b
    return params.with_weights(flat)


class GoalEnvBatch:
    """``n`` independent goal-reaching episodes stepped together."""

    def __init__(self, n: int, maze: MazeSpec, config: PpoConfig, rng: np.random.Generator,
                 dynamics: Dynamics = DEFAULT_DYNAMICS):
        self.n, self.maze, self.cfg, self.rng, self.dyn = n, maze, config, rng, dynamics
        self.pos = np.zeros((n, 2))
        self.vel = np.zeros((n, 2))
        self.heading = np.zeros(n)
        self.omega = np.zeros(n)
        self.goal = np.zeros((n, 2))
        self.goal_t = np.zeros(n, dtype=int)
        self.ep_t = np.zeros(n, dtype=int)
        self.goal_ret = np.zeros(n)
        for k in range(n):
            self._respawn(k)

    def _respawn(self, k: int):
        self.pos[k] = sample_free_point(self.maze, self.rng)
        self.vel[k] = 0.0
        self.heading[k] = self.rng.uniform(-math.pi, math.pi)
        self.omega[k] = 0.0
        self.ep_t[k] = 0
        self._new_goal(k)

    def _new_goal(self, k: int):
        self.goal[k] = sample_goal(self.pos[k], self.cfg.goal_radius, self.maze, self.rng)
        self.goal_t[k] = 0
        self.goal_ret[k] = 0.0

    def obs(self) -> np.ndarray:
        p_rel = self.goal - self.pos
        return np.column_stack([p_rel, np.sin(self.heading), np.cos(self.heading), self.vel, self.omega])

    def step(self, actions: np.ndarray):
        c = self.cfg.reward
        a = np.clip(actions, -1.0, 1.0)
        self.pos, self.vel, self.heading, self.omega = step_batch(
            self.pos, self.vel, self.heading, a, self.maze, self.dyn
        )
        p_rel = self.goal - self.pos
        d = np.hypot(p_rel[:, 0], p_rel[:, 1])
        rot = np.abs(self.omega) * self.dyn.dt if c.rotation_mode == "heading_rate" else 0.0
        r = (c.c_g * np.where(d >= 1.0, d * d, d) + c.c_a * (a * a).sum(axis=1) + c.c_R * rot
             + c.c_omega * np.abs(self.omega) + c.c_alive * c.r_alive)
        self.goal_t += 1
        self.ep_t += 1
        self.goal_ret += r
        timeout = self.goal_t >= self.cfg.goal_timeout
        ep_end = self.ep_t >= self.cfg.episode_len
        if self.cfg.goal_mode == "hold":
            # success is judged when the goal period runs out
            reached = timeout & (d <= self.cfg.goal_eps)
        else:
            reached = d <= self.cfg.goal_eps
        done = reached | timeout | ep_end
        finished = []
        for k in np.flatnonzero(done):
            # a goal cut short by the episode limit is neither a success nor a failure
            if reached[k] or timeout[k]:
                finished.append((bool(reached[k]), float(self.goal_ret[k]), float(d[k])))
            if ep_end[k]:
                self._respawn(k)
            else:
                self._new_goal(k)
        return r, done, finished


@dataclass
class TrainRow:
    iteration: int
    steps: int
    mean_return: float
    mean_goal_distance_final: float
    success_rate: float
    goals_finished: int
    pg_loss: float
    v_loss: float
    entropy: float
    approx_kl: float
    clip_frac: float


@dataclass
class TrainLog:
    rows: list[TrainRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        names = list(TrainRow.__dataclass_fields__)
        with path.open("w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(names)
            for row in self.rows:
                w.writerow([fmt(v) if isinstance(v, float) else v for v in asdict(row).values()])
        return path


def train(
    config: PpoConfig,
    maze: MazeSpec,
    *,
    dynamics: Dynamics = DEFAULT_DYNAMICS,
    checkpoint_dir: str | Path | None = None,
) -> tuple[PolicyHandle, TrainLog]:
    """Train a goal-conditioned policy with PPO.

    Collection is single-threaded and vectorized over ``n_envs``, so a run is
    fully determined by ``config`` (including its seed).
    """
    rng = np.random.default_rng(config.seed)
    ac = ActorCritic(OBS_DIM, config.hidden)
    theta = ac.init(rng)
    opt = Adam(ac.size, config.lr)
    env = GoalEnvBatch(config.n_envs, maze, config, rng, dynamics)
    norm = RunningNorm(OBS_DIM) if config.normalize_obs else None
    T, N = config.steps_per_rollout, config.n_envs
    train_log = TrainLog()
    steps = 0

    for it in range(config.iterations):
        if config.anneal_lr:
            opt.lr = config.lr * (1.0 - it / config.iterations)
        pi, log_std, vw = ac.split(theta)
        std = np.exp(log_std)
        obs_buf = np.zeros((T, N, OBS_DIM))
        u_buf = np.zeros((T, N, 2))
        logp_buf = np.zeros((T, N))
        val_buf = np.zeros((T + 1, N))
        rew_buf = np.zeros((T, N))
        done_buf = np.zeros((T, N))
        finished = []
        for t in range(T):
            raw = env.obs()
            if norm is not None:
                norm.update(raw)
                o = norm(raw)
            else:
                o = raw
            mean, _ = mlp.forward(pi, ac.pi_shapes, o)
            u = mean + std * rng.standard_normal(mean.shape)
            obs_buf[t], u_buf[t] = o, u
            logp_buf[t] = gaussian_logp(u, mean, log_std)
            val_buf[t] = mlp.forward(vw, ac.v_shapes, o)[0][:, 0]
            r, done, fin = env.step(np.tanh(u))
            rew_buf[t], done_buf[t] = r, done
            finished.extend(fin)
        last = env.obs() if norm is None else norm(env.obs())
        val_buf[T] = mlp.forward(vw, ac.v_shapes, last)[0][:, 0]
        adv, ret = compute_gae(rew_buf, val_buf, done_buf, config.gamma, config.gae_lambda)
        batch = {
            "obs": obs_buf.reshape(T * N, OBS_DIM),
            "u": u_buf.reshape(T * N, 2),
            "logp_old": logp_buf.ravel(),
            "adv": adv.ravel(),
            "ret": ret.ravel(),
        }
        theta, stats = ppo_update(theta, ac, batch, config, opt, rng)
        steps += T * N
        succ = [f[0] for f in finished]
        train_log.rows.append(TrainRow(
            iteration=it,
            steps=steps,
            mean_return=float(np.mean([f[1] for f in finished])) if finished else float("nan"),
            mean_goal_distance_final=float(np.mean([f[2] for f in finished])) if finished else float("nan"),
            success_rate=float(np.mean(succ)) if finished else float("nan"),
            goals_finished=len(finished),
            **stats,
        ))
        if it % 25 == 0 or it == config.iterations - 1:
            row = train_log.rows[-1]
            log.info("iter %d steps %d return %.2f success %.3f", it, steps, row.mean_return, row.success_rate)
        if checkpoint_dir is not None and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            save_policy(_export(ac, theta, norm), Path(checkpoint_dir) / f"checkpoint_{it + 1:05d}.gcpol")

    return PolicyHandle.neural(_export(ac, theta, norm)), train_log


def _export(ac: ActorCritic, theta: np.ndarray, norm: RunningNorm | None) -> PolicyParams:
    params = ac.policy_params(theta)
    return params if norm is None else fold_normalization(params, norm)
