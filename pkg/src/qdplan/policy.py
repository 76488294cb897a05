"""Goal-conditioned policies: an analytic PD pursuit law and a small tanh MLP."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from qdplan import mlp
from qdplan.world import OBS_DIM, GoalObservation, SimState

MAGIC = b"GCPOL1"
_ONE_BELOW = float(np.nextafter(1.0, 0.0))
DEFAULT_GAINS = (2.0, 0.5)
DEFAULT_HIDDEN = (64, 64)


class PolicyError(ValueError):
    pass


class PolicyFileError(PolicyError):
    """Raised for unreadable or truncated policy files."""


class PolicyShapeError(PolicyError):
    pass


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """Flat MLP weights plus one log-std per action dimension (stored last)."""

    flat_weights: np.ndarray
    layer_shapes: tuple[tuple[int, int], ...]
    obs_dim: int = OBS_DIM
    act_dim: int = 2

    def __post_init__(self):
        shapes = tuple((int(i), int(o)) for i, o in self.layer_shapes)
        object.__setattr__(self, "layer_shapes", shapes)
        flat = np.asarray(self.flat_weights, dtype=np.float64)
        object.__setattr__(self, "flat_weights", flat)
        if self.act_dim != 2:
            raise PolicyShapeError(f"act_dim must be 2, got {self.act_dim}")
        if not shapes or shapes[0][0] != self.obs_dim or shapes[-1][1] != self.act_dim:
            raise PolicyShapeError(f"layer shapes {shapes} do not map obs_dim={self.obs_dim} to act_dim={self.act_dim}")
        for (_, o), (i, _) in zip(shapes[:-1], shapes[1:]):
            if o != i:
                raise PolicyShapeError(f"layer shapes {shapes} do not chain")
        if flat.ndim != 1 or flat.size != self.size_for(shapes, self.act_dim):
            raise PolicyShapeError(
                f"expected {self.size_for(shapes, self.act_dim)} weights for {shapes}, got {flat.size}"
            )

    @staticmethod
    def size_for(shapes, act_dim: int = 2) -> int:
        return mlp.n_params(tuple(shapes)) + act_dim

    @classmethod
    def zeros(cls, hidden: Sequence[int] = DEFAULT_HIDDEN, obs_dim: int = OBS_DIM) -> "PolicyParams":
        shapes = mlp.shapes_for((obs_dim, *hidden, 2))
        return cls(np.zeros(cls.size_for(shapes)), shapes, obs_dim)

    @property
    def net_weights(self) -> np.ndarray:
        return self.flat_weights[: -self.act_dim]

    @property
    def log_std(self) -> np.ndarray:
        return self.flat_weights[-self.act_dim :]

    def with_weights(self, flat: np.ndarray) -> "PolicyParams":
        return PolicyParams(np.array(flat, dtype=np.float64), self.layer_shapes, self.obs_dim, self.act_dim)


def analytic_controller_law(
    p_rel: Sequence[float], velocity: Sequence[float], gains: tuple[float, float] = DEFAULT_GAINS
) -> tuple[float, float]:
    kp, kd = gains
    if not (kp > 0 and kd >= 0):
        raise ValueError("analytic controller needs kp > 0 and kd >= 0")
    ax = kp * p_rel[0] - kd * velocity[0]
    ay = kp * p_rel[1] - kd * velocity[1]
    return (max(-1.0, min(1.0, ax)), max(-1.0, min(1.0, ay)))


@dataclass(frozen=True, eq=False)
class PolicyHandle:
    kind: str
    params: PolicyParams | None = None
    action_mode: str = "deterministic"
    gains: tuple[float, float] = DEFAULT_GAINS

    def __post_init__(self):
        if self.kind not in ("analytic", "neural"):
            raise PolicyError(f"unknown policy kind {self.kind!r}")
        if self.action_mode not in ("deterministic", "stochastic"):
            raise PolicyError(f"unknown action mode {self.action_mode!r}")
        if self.kind == "analytic":
            # the analytic law has no noise model
            object.__setattr__(self, "action_mode", "deterministic")
        elif self.params is None:
            raise PolicyError("neural policy needs params")

    @classmethod
    def analytic(cls, gains: tuple[float, float] = DEFAULT_GAINS) -> "PolicyHandle":
        return cls("analytic", gains=tuple(gains))

    @classmethod
    def neural(cls, params: PolicyParams, action_mode: str = "deterministic") -> "PolicyHandle":
        return cls("neural", params=params, action_mode=action_mode)

    @property
    def deterministic(self) -> bool:
        return self.action_mode == "deterministic"

    @property
    def obs_dim(self) -> int:
        return OBS_DIM if self.params is None else self.params.obs_dim

    @cached_property
    def _layers(self):
        return mlp.unpack(self.params.net_weights, self.params.layer_shapes)

    def mean_and_std(self, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = obs
        last = len(self._layers) - 1
        for n, (w, b) in enumerate(self._layers):
            h = h @ w + b
            if n < last:
                h = np.tanh(h)
        return h, np.exp(self.params.log_std)

    def controller(self, rng: np.random.Generator | None = None) -> Callable[[SimState, Sequence[float]], tuple[float, float]]:
        """Closed-loop action function ``(state, goal_xy) -> action`` for rollouts."""
        if self.kind == "analytic":
            kp, kd = self.gains

            def analytic(state: SimState, goal) -> tuple[float, float]:
                ax = kp * (goal[0] - state.x) - kd * state.vx
                ay = kp * (goal[1] - state.y) - kd * state.vy
                return (-1.0 if ax < -1.0 else (1.0 if ax > 1.0 else ax),
                        -1.0 if ay < -1.0 else (1.0 if ay > 1.0 else ay))

            return analytic

        stochastic = not self.deterministic
        if stochastic and rng is None:
            rng = np.random.default_rng(0)

        def neural(state: SimState, goal) -> tuple[float, float]:
            obs = np.array((goal[0] - state.x, goal[1] - state.y, math.sin(state.heading),
                            math.cos(state.heading), state.vx, state.vy, state.omega))
            mean, std = self.mean_and_std(obs)
            if stochastic:
                a = np.clip(np.tanh(mean + std * rng.standard_normal(2)), -_ONE_BELOW, _ONE_BELOW)
            else:
                a = np.clip(np.tanh(mean), -1.0, 1.0)
            return (float(a[0]), float(a[1]))

        return neural


def act(
    policy: PolicyHandle,
    obs: GoalObservation | Sequence[float],
    seed: int | np.random.Generator | None = None,
) -> np.ndarray:
    vec = obs.as_array() if isinstance(obs, GoalObservation) else np.asarray(obs, dtype=float)
    if vec.shape != (policy.obs_dim,):
        raise PolicyShapeError(f"observation has shape {vec.shape}, policy expects ({policy.obs_dim},)")
    if policy.kind == "analytic":
        return np.array(analytic_controller_law(vec[:2], vec[4:6], policy.gains))
    mean, std = policy.mean_and_std(vec)
    if policy.deterministic:
        return np.clip(np.tanh(mean), -1.0, 1.0)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return np.clip(np.tanh(mean + std * rng.standard_normal(policy.params.act_dim)), -_ONE_BELOW, _ONE_BELOW)


def save_policy(policy: PolicyHandle | PolicyParams, path: str | Path) -> Path:
    params = policy.params if isinstance(policy, PolicyHandle) else policy
    if params is None:
        raise PolicyError("analytic policies have no parameters to save")
    header = MAGIC + struct.pack("<III", params.obs_dim, params.act_dim, len(params.layer_shapes))
    header += b"".join(struct.pack("<II", i, o) for i, o in params.layer_shapes)
    path = Path(path)
    path.write_bytes(header + params.flat_weights.astype("<f8").tobytes())
    return path


def load_policy(
    path: str | Path, action_mode: str = "deterministic", expected_obs_dim: int | None = OBS_DIM
) -> PolicyHandle:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise PolicyFileError(f"{path}: not a policy file (bad magic)")
    k = len(MAGIC)
    if len(data) < k + 12:
        raise PolicyFileError(f"{path}: truncated header")
    obs_dim, act_dim, n_layers = struct.unpack_from("<III", data, k)
    k += 12
    if len(data) < k + 8 * n_layers:
        raise PolicyFileError(f"{path}: truncated layer table")
    shapes = tuple(struct.unpack_from("<II", data, k + 8 * n) for n in range(n_layers))
    k += 8 * n_layers
    expected = PolicyParams.size_for(shapes, act_dim) * 8
    if len(data) - k != expected:
        raise PolicyFileError(f"{path}: expected {expected} weight bytes, found {len(data) - k}")
    if expected_obs_dim is not None and obs_dim != expected_obs_dim:
        raise PolicyShapeError(f"{path}: policy obs_dim={obs_dim} but environment provides {expected_obs_dim}")
    flat = np.frombuffer(data, dtype="<f8", offset=k).astype(np.float64)
    params = PolicyParams(flat, shapes, obs_dim, act_dim)
    return PolicyHandle.neural(params, action_mode)
