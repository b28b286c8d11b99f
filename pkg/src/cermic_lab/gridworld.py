"""Partially observable multi-agent gridworld with a sparse shared success reward.

Coordinates are (x, y) with 0 <= x < width, 0 <= y < height. Cells outside the
grid are walls. Noisy cells show a fresh uniform value in the noise channel on
every step; the value is a pure function of (seed, cell, step).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields, asdict

import numpy as np

from .rng import counter_uniform

ACTION_NAMES = ("up", "down", "left", "right", "stay")
MOVES = np.array([[0, -1], [0, 1], [-1, 0], [1, 0], [0, 0]], dtype=int)
N_ACTIONS = len(MOVES)


def _cells(v):
    return tuple(tuple(int(c) for c in cell) for cell in v)


@dataclass(frozen=True)
class GridConfig:
    width: int = 9
    height: int = 9
    n_agents: int = 3
    goals: tuple = tuple((x, y) for y in range(6, 9) for x in range(6, 9))
    view_radius: int = 2
    noisy_cells: tuple = ((8, 0), (7, 0), (8, 1), (7, 1))
    horizon: int = 64
    success_reward: float = 1.0
    seed: int = 0
    starts: tuple | None = ((0, 0), (1, 0), (0, 1))
    freeze_on_goal: bool = True
    agent_goals: tuple | None = None
    adversary: int | None = None
    self_position: bool = True

    def __post_init__(self):
        object.__setattr__(self, "goals", _cells(self.goals))
        object.__setattr__(self, "noisy_cells", _cells(self.noisy_cells))
        if self.starts is not None:
            object.__setattr__(self, "starts", _cells(self.starts))
        if self.agent_goals is not None:
            object.__setattr__(self, "agent_goals", tuple(_cells(g) for g in self.agent_goals))
        if self.width < 1 or self.height < 1:
            raise ValueError("grid must be at least 1x1")
        if self.n_agents < 1:
            raise ValueError("n_agents must be at least 1")
        if self.view_radius < 1:
            raise ValueError("view_radius must be at least 1")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        for name in ("goals", "noisy_cells"):
            for x, y in getattr(self, name):
                if not self.inside(x, y):
                    raise ValueError(f"{name} cell {(x, y)} is outside the grid")
        if self.starts is not None:
            if len(self.starts) != self.n_agents:
                raise ValueError("starts must list one cell per agent")
            if len(set(self.starts)) != len(self.starts):
                raise ValueError("start cells must be distinct")
            for x, y in self.starts:
                if not self.inside(x, y):
                    raise ValueError(f"start cell {(x, y)} is outside the grid")
        if self.agent_goals is not None and len(self.agent_goals) != self.n_agents:
            raise ValueError("agent_goals must list one goal set per agent")
        if self.adversary is not None and not 0 <= self.adversary < self.n_agents:
            raise ValueError("adversary must index an agent")

    def inside(self, x, y) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height

    @property
    def window(self) -> int:
        return 2 * self.view_radius + 1

    @property
    def n_channels(self) -> int:
        return 3 + self.n_agents

    @property
    def obs_dim(self) -> int:
        extra = self.width * self.height if self.self_position else 0
        return self.window**2 * self.n_channels + extra

    def goal_set(self, agent: int) -> set:
        return set(self.agent_goals[agent] if self.agent_goals is not None else self.goals)

    @classmethod
    def from_dict(cls, d: dict) -> "GridConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown grid config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class WorldState:
    positions: np.ndarray
    step: int = 0
    agent_done: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    last_actions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    done: bool = False
    success: bool = False
    noise_key: int = 0

    def copy(self) -> "WorldState":
        return WorldState(self.positions.copy(), self.step, self.agent_done.copy(),
                          self.last_actions.copy(), self.done, self.success, self.noise_key)


class GridWorld:
    def __init__(self, config: GridConfig):
        self.config = config
        c, r = config, config.view_radius
        self._static = np.zeros((2, c.height + 2 * r, c.width + 2 * r))
        self._static[0] = 1.0
        self._static[0, r:r + c.height, r:r + c.width] = 0.0
        for x, y in c.goals:
            self._static[1, y + r, x + r] = 1.0
        if c.agent_goals is not None:
            for g in c.agent_goals:
                for x, y in g:
                    self._static[1, y + r, x + r] = 1.0
        self._noisy = np.array(c.noisy_cells, dtype=int).reshape(-1, 2)
        self._noisy_ids = self._noisy[:, 1] * c.width + self._noisy[:, 0]

    # ------------------------------------------------------------ lifecycle
    def reset(self, seed: int | None = None) -> tuple[WorldState, np.ndarray]:
        c = self.config
        seed = c.seed if seed is None else seed
        if c.starts is not None:
            pos = np.array(c.starts, dtype=int)
        else:
            free = [(x, y) for y in range(c.height) for x in range(c.width) if (x, y) not in set(c.goals)]
            if c.n_agents > len(free):
                raise ValueError("not enough free cells to place every agent")
            rng = np.random.default_rng(seed)
            pick = rng.choice(len(free), size=c.n_agents, replace=False)
            pos = np.array([free[i] for i in pick], dtype=int)
        state = WorldState(pos, 0, np.zeros(c.n_agents, dtype=bool),
                           np.full(c.n_agents, N_ACTIONS - 1, dtype=int), False, False, int(seed))
        self._refresh_done(state)
        return state, self.observe(state)

    def _on_goal(self, state: WorldState) -> np.ndarray:
        return np.array([tuple(p) in self.config.goal_set(i) for i, p in enumerate(state.positions.tolist())])

    def _refresh_done(self, state: WorldState) -> None:
        if self.config.freeze_on_goal:
            on = self._on_goal(state)
            if self.config.adversary is not None:
                on[self.config.adversary] = False
            state.agent_done |= on

    def success(self, state: WorldState) -> bool:
        on = self._on_goal(state)
        if self.config.adversary is not None:
            on[self.config.adversary] = ~on[self.config.adversary]
        return bool(on.all())

    def step(self, state: WorldState, actions) -> tuple[WorldState, np.ndarray, float, bool]:
        c = self.config
        actions = np.asarray(actions, dtype=int).reshape(-1)
        if actions.shape != (c.n_agents,):
            raise ValueError(f"expected {c.n_agents} actions, got {actions.shape}")
        if np.any((actions < 0) | (actions >= N_ACTIONS)):
            raise ValueError("invalid action id")
        if state.done:
            raise ValueError("episode already finished")
        new = state.copy()
        actions = np.where(state.agent_done, N_ACTIONS - 1, actions)
        new.positions = resolve_moves(state.positions, actions, c.width, c.height)
        new.last_actions = actions
        new.step = state.step + 1
        self._refresh_done(new)
        reward = 0.0
        if self.success(new) and not state.success:
            reward = float(c.success_reward)
            new.success = True
        new.done = new.success or new.step >= c.horizon
        return new, self.observe(new), reward, new.done

    # ------------------------------------------------------------ observation
    def noise_values(self, state: WorldState) -> np.ndarray:
        if self._noisy_ids.size == 0:
            return np.zeros(0)
        return counter_uniform(state.noise_key, self._noisy_ids, np.full(self._noisy_ids.shape, state.step))

    def observe(self, state: WorldState) -> np.ndarray:
        """Per-agent flattened observations, shape (n_agents, obs_dim)."""
        c, r = self.config, self.config.view_radius
        H, W = c.height + 2 * r, c.width + 2 * r
        layers = np.zeros((c.n_channels, H, W))
        layers[:2] = self._static
        for j, (x, y) in enumerate(state.positions.tolist()):
            layers[2 + j, y + r, x + r] = 1.0
        if self._noisy.size:
            layers[-1, self._noisy[:, 1] + r, self._noisy[:, 0] + r] = self.noise_values(state)
        w = c.window
        out = np.zeros((c.n_agents, c.obs_dim))
        for i, (x, y) in enumerate(state.positions.tolist()):
            out[i, :w * w * c.n_channels] = layers[:, y:y + w, x:x + w].ravel()
            if c.self_position:
                out[i, w * w * c.n_channels + y * c.width + x] = 1.0
        return out

    def window_dim(self) -> int:
        c = self.config
        return c.window**2 * c.n_channels

    def noise_slice(self) -> slice:
        c = self.config
        w2 = c.window**2
        return slice(w2 * (c.n_channels - 1), w2 * c.n_channels)

    def agent_channel_slice(self, j: int) -> slice:
        w2 = self.config.window**2
        return slice(w2 * (2 + j), w2 * (3 + j))

    # ------------------------------------------------------------ labels
    def oracle_labels(self, state: WorldState):
        """Visibility labels, true latents and relative offsets for every observer.

        Returns (labels (N, N), latents (N, 2 + n_actions), offsets (N, N, 2))
        where offsets[i, j] = pos_j - pos_i and labels[i, j] = 1 iff j lies in
        i's view window.
        """
        c = self.config
        pos = state.positions.astype(float)
        offsets = pos[None, :, :] - pos[:, None, :]
        labels = (np.abs(offsets).max(axis=-1) <= c.view_radius).astype(float)
        scale = np.array([max(c.width - 1, 1), max(c.height - 1, 1)], dtype=float)
        latents = np.concatenate([pos / scale, np.eye(N_ACTIONS)[state.last_actions]], axis=1)
        return labels, latents, offsets


def resolve_moves(positions: np.ndarray, actions: np.ndarray, width: int, height: int) -> np.ndarray:
    """Simultaneous moves; any conflicting mover stays where it was.

    Conflicts are: leaving the grid, two movers targeting one cell, two agents
    swapping cells, and moving into a cell whose occupant ends up staying.
    Resolution repeats until no conflict remains.
    """
    pos = np.asarray(positions, dtype=int)
    target = pos + MOVES[actions]
    outside = (target[:, 0] < 0) | (target[:, 0] >= width) | (target[:, 1] < 0) | (target[:, 1] >= height)
    target[outside] = pos[outside]
    n = len(pos)
    while True:
        keys = [tuple(t) for t in target.tolist()]
        here = [tuple(p) for p in pos.tolist()]
        stuck = []
        for i in range(n):
            if keys[i] == here[i]:
                continue
            others = [j for j in range(n) if j != i]
            clash = any(keys[j] == keys[i] for j in others)
            swap = any(keys[j] == here[i] and here[j] == keys[i] for j in others)
            blocked = any(here[j] == keys[i] and keys[j] == here[j] for j in others)
            if clash or swap or blocked:
                stuck.append(i)
        if not stuck:
            return target
        # every conflict in a pass is judged against the same targets
        target[stuck] = pos[stuck]


def feature_map(s, action: int, n_actions: int = N_ACTIONS) -> np.ndarray:
    """One-hot action block holding [s, 1] / ||[s, 1]||, so ||eta|| = 1."""
    s = np.asarray(s, dtype=float).reshape(-1)
    if not 0 <= action < n_actions:
        raise ValueError("invalid action id")
    base = np.append(s, 1.0)
    base /= np.linalg.norm(base)
    eta = np.zeros(n_actions * base.size)
    eta[action * base.size:(action + 1) * base.size] = base
    return eta


def write_trace(path, rows) -> None:
    """rows: iterable of (step, agent, x, y, action, reward)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "agent", "pos_x", "pos_y", "action", "reward"])
        for step, agent, x, y, a, r in rows:
            w.writerow([int(step), int(agent), int(x), int(y), int(a), f"{float(r):.17g}"])


def rollout_trace(world: GridWorld, actions_seq, seed: int | None = None):
    """Replay a fixed joint-action sequence and return trace rows."""
    state, _ = world.reset(seed)
    rows = []
    for acts in actions_seq:
        if state.done:
            break
        state, _, r, _ = world.step(state, acts)
        for i, (x, y) in enumerate(state.positions.tolist()):
            rows.append((state.step, i, x, y, int(state.last_actions[i]), r))
    return rows
