"""Desk-scale environments: the N_G x N_G grid world and 2-D landmark navigation.

Both expose ``reset() -> observation`` and ``step(action) -> StepResult``.
``StepResult.state_snapshot`` is the global state fed to the diversity
machinery (normalised cell coordinates for the grid, agent position for
navigation); it always describes the state *after* the step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

UP, DOWN, LEFT, RIGHT = range(4)
GRID_ACTIONS = ("up", "down", "left", "right")
_MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}


class EpisodeTerminated(RuntimeError):
    """Raised when stepping an environment whose episode has ended."""


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    observation_dim: int
    action_kind: str  # "discrete" | "continuous"
    action_dim: int  # number of actions, or vector dimension
    horizon: int
    state_dim: int

    def __post_init__(self):
        if self.horizon < 1 or self.observation_dim < 1 or self.action_dim < 1:
            raise ConfigurationError("dimensions and horizon must be positive")
        if self.action_kind not in ("discrete", "continuous"):
            raise ConfigurationError(f"bad action kind {self.action_kind!r}")


@dataclass
class StepResult:
    next_observation: np.ndarray
    reward: float
    terminated: bool
    state_snapshot: np.ndarray
    info: dict = field(default_factory=dict)


# ---------------------------------------------------------------- grid world


@dataclass
class GridWorldState:
    row: int
    col: int
    steps: int = 0
    done: bool = False


def gridworld_step(state, action, grid_size, horizon=None):
    """Pure transition: returns ``(new_state, reward)``.

    Moves off the grid leave the agent in place. Reward 1 on entering the
    bottom-right cell, which ends the episode, as does reaching ``horizon``.
    """
    if state.done:
        raise EpisodeTerminated("episode already terminated; call reset()")
    if action not in _MOVES:
        raise ValueError(f"invalid grid action {action!r}")
    horizon = 4 * grid_size if horizon is None else horizon
    dr, dc = _MOVES[action]
    row, col = state.row + dr, state.col + dc
    if not (0 <= row < grid_size and 0 <= col < grid_size):
        row, col = state.row, state.col
    goal = row == grid_size - 1 and col == grid_size - 1
    steps = state.steps + 1
    new = GridWorldState(row, col, steps, goal or steps >= horizon)
    return new, (1.0 if goal else 0.0)


class GridWorld:
    """Start top-left, goal bottom-right, horizon ``4 * grid_size`` by default."""

    name = "gridworld"

    def __init__(self, grid_size=5, horizon=None):
        if grid_size < 2:
            raise ConfigurationError("grid_size must be >= 2")
        self.grid_size = int(grid_size)
        self.horizon = int(horizon) if horizon is not None else 4 * self.grid_size
        self.spec = EnvSpec(self.grid_size ** 2, "discrete", 4, self.horizon, 2)
        self.state = GridWorldState(0, 0, 0, True)

    def observation(self, state=None):
        s = self.state if state is None else state
        obs = np.zeros(self.grid_size ** 2)
        obs[s.row * self.grid_size + s.col] = 1.0
        return obs

    def snapshot(self, state=None):
        s = self.state if state is None else state
        n = self.grid_size - 1
        return np.array([s.row / n, s.col / n])

    def reset(self, rng=None):
        self.state = GridWorldState(0, 0, 0, False)
        return self.observation()

    def step(self, action):
        self.state, reward = gridworld_step(self.state, int(action), self.grid_size, self.horizon)
        return StepResult(self.observation(), reward, self.state.done, self.snapshot(),
                          {"cell": (self.state.row, self.state.col)})


# ---------------------------------------------------------------- navigation


@dataclass(frozen=True)
class NavConfig:
    n_landmarks: int = 4
    agent_size: float = 0.05  # a
    landmark_size: float = 0.05  # b
    separation: float = 0.6  # c
    arena: float = 1.0  # half-width of the square arena
    dt: float = 0.1
    max_steps: int = 1000
    max_speed: float = 1.0

    def scaled(self, s):
        """Same layout geometry with every length multiplied by ``s``."""
        return NavConfig(self.n_landmarks, s * self.agent_size, s * self.landmark_size,
                         s * self.separation, s * self.arena, self.dt, self.max_steps, s * self.max_speed)

    @property
    def min_center_distance(self):
        return self.separation + 2.0 * (self.agent_size + self.landmark_size)

    @property
    def touch_distance(self):
        return self.agent_size + self.landmark_size


@dataclass
class NavState:
    agent_position: np.ndarray
    landmark_centers: np.ndarray  # (n_landmarks, 2)
    step_count: int = 0
    done: bool = False


MAX_REJECTIONS = 10_000


def nav_reset(rng, config):
    """Place landmarks by rejection sampling; the agent starts at the centre.

    Landmark centres keep pairwise distance above ``c + 2(a + b)``, lie fully
    inside the arena, and sit at least ``a + b + c/2`` from the start so an
    episode never begins in contact.
    """
    lo, hi = -config.arena + config.landmark_size, config.arena - config.landmark_size
    if hi <= lo:
        raise ConfigurationError("arena too small for a single landmark")
    min_d = config.min_center_distance
    start_clearance = config.touch_distance + 0.5 * config.separation
    centers = []
    rejected = 0
    while len(centers) < config.n_landmarks:
        p = rng.uniform(lo, hi, size=2)
        ok = math.hypot(p[0], p[1]) > start_clearance and all(
            math.hypot(p[0] - q[0], p[1] - q[1]) > min_d for q in centers
        )
        if ok:
            centers.append(p)
            continue
        rejected += 1
        if rejected >= MAX_REJECTIONS:
            raise ConfigurationError(
                f"could not place {config.n_landmarks} landmarks after {MAX_REJECTIONS} rejections"
            )
    return NavState(np.zeros(2), np.array(centers).reshape(-1, 2), 0, False)


def nav_observation(state):
    return np.concatenate([state.agent_position, state.landmark_centers.ravel()])


def nav_step(state, velocity, config):
    """Advance one step in place; returns ``(reward, touched_landmark or None)``."""
    if state.done:
        raise EpisodeTerminated("episode already terminated; call reset()")
    vx, vy = float(velocity[0]), float(velocity[1])
    if not (math.isfinite(vx) and math.isfinite(vy)):
        raise ValueError("velocity must be finite")
    vmax = config.max_speed
    vx = min(max(vx, -vmax), vmax)
    vy = min(max(vy, -vmax), vmax)
    lim = config.arena
    x = min(max(state.agent_position[0] + config.dt * vx, -lim), lim)
    y = min(max(state.agent_position[1] + config.dt * vy, -lim), lim)
    state.agent_position = np.array([x, y])
    state.step_count += 1
    touched = None
    reach = config.touch_distance
    for k, (cx, cy) in enumerate(state.landmark_centers):
        if math.hypot(x - cx, y - cy) < reach:
            touched = k
            break
    if touched is not None or state.step_count >= config.max_steps:
        state.done = True
    return (1.0 if touched is not None else 0.0), touched


class Navigation:
    """Landmark navigation. The layout is drawn once from ``seed`` and reused
    by every ``reset`` unless ``resample_layout`` is set."""

    name = "nav"

    def __init__(self, config=None, seed=0, resample_layout=False):
        self.config = config or NavConfig()
        self.seed = seed
        self.resample_layout = resample_layout
        self._layout_rng = np.random.default_rng(seed)
        self.layout = nav_reset(np.random.default_rng(seed), self.config).landmark_centers
        n = self.config.n_landmarks
        self.spec = EnvSpec(2 + 2 * n, "continuous", 2, self.config.max_steps, 2)
        self.state = NavState(np.zeros(2), self.layout.copy(), 0, True)

    def reset(self, rng=None):
        if self.resample_layout:
            self.state = nav_reset(self._layout_rng, self.config)
        else:
            self.state = NavState(np.zeros(2), self.layout.copy(), 0, False)
        return nav_observation(self.state)

    def snapshot(self):
        return self.state.agent_position.copy()

    def step(self, action):
        """``action`` is a velocity in units of ``max_speed``."""
        velocity = self.config.max_speed * np.asarray(action, dtype=np.float64)
        reward, touched = nav_step(self.state, velocity, self.config)
        return StepResult(nav_observation(self.state), reward, self.state.done,
                          self.state.agent_position.copy(), {"landmark": touched})


def make_env(name, grid_size=5, n_landmarks=4, seed=0, scale=1.0, **nav_kwargs):
    if name == "gridworld":
        return GridWorld(grid_size)
    if name == "nav":
        return Navigation(NavConfig(n_landmarks=n_landmarks, **nav_kwargs).scaled(scale), seed=seed)
    raise ConfigurationError(f"unknown environment {name!r}")
