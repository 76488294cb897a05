"""INI run configuration with typed defaults and command-line overrides.

Precedence is command line > config file > built-in defaults. Every key has
a default, so an empty file is a valid configuration.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from qdplan.baseline import MeConfig, iterations_for_budget
from qdplan.evaluation import EvalProtocol
from qdplan.planner import PlannerConfig
from qdplan.ppo import PpoConfig
from qdplan.world import (
    Dynamics,
    MazeError,
    MazeSpec,
    RewardCoeffs,
    builtin_maze,
    load_maze_file,
    maze_defaults,
)
from qdplan.layouts import LAYOUTS


class ConfigError(ValueError):
    pass


class MazeMismatchError(ConfigError):
    pass


def _fields(cls, skip=()) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip or not f.init:
            continue
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
    return out


DEFAULTS: dict[str, dict] = {
    "run": {"maze": "open", "method": "planner", "output_dir": "runs", "seed": 0, "threads": 1,
            "policy": "", "analytic": False, "maze_b": "hardmaze2d"},
    "maze": {"cell_size": 1.0, "resolution": "", "episode_len": 0},
    "ppo": _fields(PpoConfig, skip=("seed",)),
    "planner": _fields(PlannerConfig, skip=("seed",)),
    "map_elites": {**_fields(MeConfig, skip=("seed", "episode_len")), "budget_steps": 0},
    "eval": _fields(EvalProtocol, skip=("common_reward", "episode_len")),
    "reward": _fields(RewardCoeffs),
    "dynamics": _fields(Dynamics),
}
METHODS = ("planner", "map_elites")


def _coerce(section: str, key: str, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(float(text)) if "e" in text.lower() and float(text).is_integer() else int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    values: dict[str, dict]

    def get(self, section: str, key: str):
        return self.values[section][key]

    def set(self, section: str, key: str, value) -> None:
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        default = DEFAULTS[section][key]
        self.values[section][key] = _coerce(section, key, value, default) if isinstance(value, str) else value

    @property
    def seed(self) -> int:
        return int(self.values["run"]["seed"])

    @property
    def threads(self) -> int:
        return int(self.values["run"]["threads"])

    def snapshot(self) -> dict:
        return {s: {k: _render(v) for k, v in sorted(kv.items())} for s, kv in sorted(self.values.items())}

    def config_hash(self) -> str:
        blob = json.dumps(self.snapshot(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    @property
    def run_id(self) -> str:
        return f"{self.config_hash()}-s{self.seed}"

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for s, kv in self.snapshot().items():
            cp[s] = kv
        lines = []
        for s in cp.sections():
            lines.append(f"[{s}]")
            lines += [f"{k} = {v}" for k, v in cp[s].items()]
            lines.append("")
        return "\n".join(lines)

    # --- typed views ---------------------------------------------------------

    def maze(self, which: str = "maze") -> MazeSpec:
        return resolve_maze(self.values["run"][which], self.values["maze"]["cell_size"])

    def maze_settings(self, maze: MazeSpec) -> tuple[tuple[int, int], int]:
        """(archive resolution, evaluation episode length) for ``maze``."""
        d = maze_defaults(maze.name) if maze.name in LAYOUTS else {
            "resolution": (max(1, round(maze.width)), max(1, round(maze.height))), "episode_len": 3000}
        res = self.values["maze"]["resolution"]
        if res:
            parts = tuple(int(v) for v in res.replace(" ", "").split(","))
            if len(parts) != 2 or min(parts) < 1:
                raise ConfigError(f"[maze] resolution must be 'nx,ny', got {res!r}")
            resolution = parts
        else:
            resolution = tuple(d["resolution"])
        ep = self.values["maze"]["episode_len"] or d["episode_len"]
        return resolution, int(ep)

    def reward(self) -> RewardCoeffs:
        return _build(RewardCoeffs, "reward", self.values["reward"])

    def dynamics(self) -> Dynamics:
        return _build(Dynamics, "dynamics", self.values["dynamics"])

    def ppo(self) -> PpoConfig:
        return _build(PpoConfig, "ppo", {**self.values["ppo"], "seed": self.seed, "reward": self.reward()})

    def planner(self) -> PlannerConfig:
        return _build(PlannerConfig, "planner", {**self.values["planner"], "seed": self.seed})

    def map_elites(self, episode_len: int) -> MeConfig:
        kv = dict(self.values["map_elites"])
        budget = kv.pop("budget_steps")
        cfg = _build(MeConfig, "map_elites", {**kv, "seed": self.seed, "episode_len": episode_len})
        if budget:
            cfg = dataclasses.replace(cfg, iterations=iterations_for_budget(budget, cfg))
        return cfg

    def protocol(self, episode_len: int) -> EvalProtocol:
        return _build(EvalProtocol, "eval", {**self.values["eval"], "common_reward": self.reward(),
                                             "episode_len": episode_len})


def _build(cls, section, kwargs):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def resolve_maze(name_or_path: str, cell_size: float = 1.0) -> MazeSpec:
    if name_or_path in LAYOUTS:
        return builtin_maze(name_or_path)
    path = Path(name_or_path)
    if path.suffix or path.parent != Path("."):
        if not path.is_file():
            raise ConfigError(f"maze file not found: {path}")
        try:
            return load_maze_file(path, cell_size)
        except MazeError as exc:
            raise ConfigError(f"bad maze file {path}: {exc}") from None
    raise ConfigError(f"unknown maze {name_or_path!r}; built-in layouts: {', '.join(sorted(LAYOUTS))}")


def default_config() -> RunConfig:
    return RunConfig({s: dict(kv) for s, kv in DEFAULTS.items()})


def parse_override(text: str) -> tuple[str, str, str]:
    key, sep, value = text.partition("=")
    section, dot, name = key.strip().partition(".")
    if not sep or not dot:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    return section, name, value


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> RunConfig:
    cfg = default_config()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in cp.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, value in cp[section].items():
                cfg.set(section, key, value)
    for item in overrides:
        cfg.set(*parse_override(item))
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    run = cfg.values["run"]
    if run["method"] not in METHODS:
        raise ConfigError(f"[run] method must be one of {METHODS}, got {run['method']!r}")
    if run["threads"] < 1:
        raise ConfigError("[run] threads must be >= 1")
    if run["policy"] and not Path(run["policy"]).is_file():
        raise ConfigError(f"policy file not found: {run['policy']}")
    maze = cfg.maze()
    cfg.maze_settings(maze)
    cfg.reward()
    cfg.dynamics()
    cfg.ppo()
    cfg.planner()
    cfg.map_elites(1)
    cfg.protocol(1)
