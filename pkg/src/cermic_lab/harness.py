"""Episode loop: act, store, score curiosity, update the policy, then update the curiosity module."""
from __future__ import annotations

import csv
import io
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .checkpoint import check_shapes
from .core import Batch, CermicConfig, CermicModel, combine_rewards, unit_rows
from .gridworld import N_ACTIONS, GridConfig, GridWorld
from .linear_mdp import PosteriorState, intrinsic_reward_exact, posterior_update, ucb_bonus
from .memory import EpisodeGraphs, MemoryConfig, Perception, build_episode_graphs
from .robust import AmbiguityParams, RunningMoments
from .rng import stream, stream_seed

VARIANTS = ("epsilon_greedy_q", "lsvi_ucb", "cermic_q", "cermic_no_calibration")
METRIC_COLUMNS = ("seed", "episode", "return", "first_success", "mean_r_int", "loss_explore",
                  "loss_ub", "loss_lb", "gamma_mean", "wall_ms")


@dataclass(frozen=True)
class RunConfig:
    variant: str = "cermic_q"
    episodes: int = 100
    seed: int = 0
    grid: GridConfig = field(default_factory=GridConfig)
    discount: float = 0.9
    q_lr: float = 0.5
    eps_start: float = 0.8
    eps_end: float = 0.01
    eps_decay_episodes: int = 100
    intrinsic_scale: float = 0.1
    bonus_mode: str = "reward"      # "reward": r_e + scale*r_i on taken steps; "optimistic": per-action bonus
    # curiosity module
    alpha: float = 0.2
    epsilon: float = 0.2
    gamma1: float = 1.0
    gamma2: float = 2.0
    c_upper: float = 1.0
    c_lower: float = -1.0
    tau_m: float = 0.99
    lr: float = 0.05
    critic_lr: float = 2.0
    updates_per_episode: int = 2
    samples: int = 8
    init_logvar: float = -3.0
    memory: str = "graph"
    use_explore: bool = True
    use_exploit: bool = True
    n_neg: int = 16
    noise_scale: float = 0.5
    # linear agent
    zeta: float = 1.0
    lam: float = 1.0
    probes: tuple = ((0, 0, 3), (4, 4, 1))
    # bookkeeping
    perception: str | None = None
    record_wall_clock: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.episodes < 1:
            raise ValueError("episodes must be at least 1")
        for name in ("q_lr", "lr", "critic_lr", "lam", "zeta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.intrinsic_scale < 0:
            raise ValueError("intrinsic_scale must be non-negative")
        if not 0 <= self.eps_end <= self.eps_start <= 1:
            raise ValueError("need 0 <= eps_end <= eps_start <= 1")
        if self.bonus_mode not in ("reward", "optimistic"):
            raise ValueError("bonus_mode must be 'reward' or 'optimistic'")
        if self.memory not in ("graph", "recurrent"):
            raise ValueError("memory must be 'graph' or 'recurrent'")
        if not 0 < self.discount <= 1:
            raise ValueError("discount must lie in (0, 1]")
        AmbiguityParams(self.gamma1, self.gamma2, self.epsilon, self.c_upper, self.c_lower)
        for x, y, a in self.probes:
            if not self.grid.inside(x, y) or not 0 <= a < N_ACTIONS:
                raise ValueError(f"probe {(x, y, a)} is invalid")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        d = dict(d)
        if "grid" in d and isinstance(d["grid"], dict):
            d["grid"] = GridConfig.from_dict(d["grid"])
        if "probes" in d:
            d["probes"] = tuple(tuple(p) for p in d["probes"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- linear policy

def policy_features(obs, grid: GridConfig) -> np.ndarray:
    """Normalized [self-position one-hot, 1] read off the observation tail."""
    obs = np.asarray(obs, dtype=float)
    cells = grid.width * grid.height
    base = np.concatenate([obs[..., -cells:], np.ones(obs.shape[:-1] + (1,))], axis=-1)
    return base / np.linalg.norm(base, axis=-1, keepdims=True)


@dataclass
class AgentPolicy:
    """Linear Q weights per agent and action, with a linear epsilon schedule."""

    variant: str
    weights: np.ndarray          # (agents, actions, features)
    eps_start: float = 0.8
    eps_end: float = 0.01
    decay_episodes: int = 100
    episodes_done: int = 0

    @property
    def epsilon(self) -> float:
        frac = min(self.episodes_done / max(self.decay_episodes, 1), 1.0)
        return self.eps_start + (self.eps_end - self.eps_start) * frac

    def q_values(self, phi) -> np.ndarray:
        return np.einsum("gaf,gf->ga", self.weights, phi)

    def act(self, phi, rng, bonus=None) -> np.ndarray:
        """Epsilon-greedy on Q plus an optional per-action bonus (G, actions); ties broken at random."""
        q = self.q_values(phi)
        if bonus is not None:
            q = q + bonus
        eps = self.epsilon
        out = np.empty(q.shape[0], dtype=int)
        explore = rng.random(q.shape[0]) < eps
        rand = rng.integers(0, q.shape[1], q.shape[0])
        tie = rng.random(q.shape[0])
        for g in range(q.shape[0]):
            best = np.flatnonzero(q[g] == q[g].max())
            out[g] = rand[g] if explore[g] else best[int(tie[g] * len(best))]
        return out


def policy_update(policy: AgentPolicy, phi, actions, rewards, terminal, lr: float, discount: float,
                  bonus=None) -> AgentPolicy:
    """One reverse sweep of one-step TD over an episode; advances the epsilon schedule.

    phi (G, T+1, F) features including the final state, actions (G, T),
    rewards (G, T), terminal (T,) marks transitions into an absorbing state.
    ``bonus`` (G, T+1, actions) is added to next-state values before the max,
    so the learned Q plus the bonus obeys the optimistic Bellman recursion.
    """
    W = policy.weights
    G, T = actions.shape
    idx = np.arange(G)
    for t in range(T - 1, -1, -1):
        q_next = np.einsum("gaf,gf->ga", W, phi[:, t + 1])
        if bonus is not None:
            q_next = q_next + bonus[:, t + 1]
        q_next = q_next.max(axis=1)
        target = rewards[:, t] + (0.0 if terminal[t] else discount) * q_next
        q_now = np.einsum("gf,gf->g", W[idx, actions[:, t]], phi[:, t])
        W[idx, actions[:, t]] += lr * (target - q_now)[:, None] * phi[:, t]
    policy.episodes_done += 1
    return policy


# ---------------------------------------------------------------- metrics

@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)
    probes: list = field(default_factory=list)   # (episode, agent, probe index, value)
    linear: bool = False

    def append(self, **row) -> None:
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])
        return buf.getvalue()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv_text())

    def first_success(self, censor: int | None = None) -> int:
        """Episode of first success, or ``censor`` (default episodes + 1) if none."""
        for r in self.rows:
            if r["return"] > 0:
                return int(r["episode"])
        return len(self.rows) + 1 if censor is None else censor

    def final_return(self, window: int = 10) -> float:
        ret = self.column("return")
        return float(ret[-window:].mean()) if ret.size else 0.0


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.10g}"


def read_metrics_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- curiosity wiring

def cermic_config(cfg: RunConfig, obs_dim: int) -> CermicConfig:
    amb = AmbiguityParams(cfg.gamma1, cfg.gamma2, cfg.epsilon, cfg.c_upper, cfg.c_lower)
    return CermicConfig(
        obs_dim=obs_dim, n_actions=N_ACTIONS, n_agents=cfg.grid.n_agents, samples=cfg.samples,
        alpha=cfg.alpha, ambiguity=amb, tau_m=cfg.tau_m, lr=cfg.lr, critic_lr=cfg.critic_lr,
        init_logvar=cfg.init_logvar, use_explore=cfg.use_explore, use_exploit=cfg.use_exploit,
        calibrate=cfg.variant == "cermic_q", memory=cfg.memory, n_neg=cfg.n_neg,
        noise_scale=cfg.noise_scale,
    )


class CuriosityLearner:
    """Per-agent curiosity modules (independent parameters, vectorized over agents)."""

    def __init__(self, cfg: RunConfig, obs_dim: int, perception_params: dict | None):
        self.run = cfg
        self.cfg = cermic_config(cfg, obs_dim)
        self.model = CermicModel(self.cfg)
        G = cfg.grid.n_agents
        self.params = self.model.init(stream(cfg.seed, "cermic-init"), G)
        self.perception = Perception(MemoryConfig(n_agents=G, obs_dim=obs_dim, d_f=self.cfg.d_f))
        fresh = self.perception.init(stream(cfg.seed, "perception-init"))
        if perception_params is None:
            perception_params = fresh
        else:
            check_shapes(fresh, perception_params)
        self.perc_params = perception_params
        self.stats = [RunningMoments(self.cfg.stats_momentum) for _ in range(G)]
        self.f_stats = [RunningMoments(self.cfg.stats_momentum) for _ in range(G)]
        self.rng = stream(cfg.seed, "cermic-train")

    def rewards(self, obs, act) -> np.ndarray:
        return self.model.intrinsic_reward(self.params, obs, act)

    def table(self, obs) -> np.ndarray:
        """Intrinsic reward for every action: obs (G, ..., O) -> (G, ..., actions)."""
        obs = np.asarray(obs, dtype=float)
        rep = np.broadcast_to(obs[..., None, :], obs.shape[:-1] + (N_ACTIONS, obs.shape[-1]))
        act = np.broadcast_to(np.arange(N_ACTIONS), obs.shape[:-1] + (N_ACTIONS,))
        return self.model.intrinsic_reward(self.params, rep, act)

    def contexts(self, obs):
        """Memory inputs for the episode, stacked over agents."""
        G, T = obs.shape[:2]
        if self.cfg.memory == "graph":
            eps = [build_episode_graphs(self.perception, self.perc_params, obs[g], g) for g in range(G)]
            return EpisodeGraphs(np.stack([e.nodes for e in eps]), np.stack([e.mask for e in eps]),
                                 np.stack([e.edges for e in eps]), np.stack([e.valid for e in eps]),
                                 np.stack([e.steps for e in eps]))
        cell = self.model.ctx.cell
        h = np.zeros((G, self.cfg.d_f))
        prev = np.zeros((G, T, self.cfg.d_f))
        for t in range(T):
            prev[:, t] = h
            h, _ = cell.forward(self.params, obs[:, t:t + 1], h[:, None])
            h = h[:, 0]
        return (obs, prev, np.ones((G, T), dtype=bool))

    def update(self, obs, act, obs_next, r_prev):
        G, T = act.shape
        ctx = self.contexts(obs)
        f, _ = self.model.context(self.params, ctx)
        unit = unit_rows(f)
        for g, rm in enumerate(self.f_stats):
            rm.update(unit[g])
        spread = np.repeat(np.sqrt([rm.var for rm in self.f_stats])[:, None], self.cfg.d_f, axis=1)
        lo, hi, critic_batch = self.model.gammas(self.params, f, r_prev, self.rng, spread)
        parts = None
        for _ in range(self.run.updates_per_episode):
            eps = self.rng.normal(size=(G, T, self.cfg.samples, self.cfg.d_latent))
            psi = self.model.psi_samples(self.params, obs, act, eps)
            for g in range(G):
                self.stats[g].update(psi[g])
            mean = np.array([s.mean for s in self.stats])
            var = np.array([s.var for s in self.stats])
            batch = Batch(obs, act, obs_next, lo, hi, ctx, eps)
            _, parts = self.model.step(self.params, batch, mean, var)
        for _ in range(self.run.updates_per_episode):
            self.model.critic_step(self.params, *critic_batch)
        w_explore = self.cfg.alpha if self.cfg.use_explore else 0.0
        return {
            "loss_explore": float(np.mean(w_explore * parts["explore"])),
            "loss_ub": float(np.mean(parts["ub"])),
            "loss_lb": float(np.mean(parts["lb"])),
            "gamma_mean": float(np.mean(lo)),
        }


class LinearCuriosity:
    """Per-agent, per-action Bayesian linear transition models over policy features."""

    def __init__(self, cfg: RunConfig, n_feat: int):
        G = cfg.grid.n_agents
        self.cfg = cfg
        self.posts = [[PosteriorState.prior(n_feat, n_feat, cfg.lam) for _ in range(N_ACTIONS)] for _ in range(G)]

    def rewards(self, phi, act) -> np.ndarray:
        G, T = act.shape
        out = np.zeros((G, T))
        for g in range(G):
            for t in range(T):
                out[g, t] = ucb_bonus(self.posts[g][act[g, t]], phi[g, t], self.cfg.zeta)
        return out

    def table(self, phi) -> np.ndarray:
        """zeta * sqrt(phi^T inv(Gram_a) phi) for every action: (G, ..., F) -> (G, ..., actions)."""
        phi = np.asarray(phi, dtype=float)
        out = np.zeros(phi.shape[:-1] + (N_ACTIONS,))
        for g, posts in enumerate(self.posts):
            for a, post in enumerate(posts):
                q = np.einsum("...i,ij,...j->...", phi[g], post.gram_inv, phi[g])
                out[g, ..., a] = self.cfg.zeta * np.sqrt(np.maximum(q, 0.0))
        return out

    def update(self, phi, act, phi_next) -> None:
        G, T = act.shape
        for g in range(G):
            for t in range(T):
                a = act[g, t]
                self.posts[g][a] = posterior_update(self.posts[g][a], phi[g, t], phi_next[g, t])

    def probe_values(self, grid: GridConfig, probes) -> np.ndarray:
        out = np.zeros((len(self.posts), len(probes)))
        cells = grid.width * grid.height
        for i, (x, y, a) in enumerate(probes):
            base = np.zeros(cells + 1)
            base[y * grid.width + x] = 1.0
            base[-1] = 1.0
            base /= np.linalg.norm(base)
            for g in range(len(self.posts)):
                out[g, i] = intrinsic_reward_exact(self.posts[g][a], base)
        return out


# ---------------------------------------------------------------- main loop

class Trainer:
    """Holds one run's world, policy and curiosity learner; ``run`` plays every episode."""

    def __init__(self, cfg: RunConfig, perception_params: dict | None = None):
        self.cfg = cfg
        self.world = GridWorld(cfg.grid)
        G = cfg.grid.n_agents
        n_feat = cfg.grid.width * cfg.grid.height + 1
        self.policy = AgentPolicy(cfg.variant, np.zeros((G, N_ACTIONS, n_feat)), cfg.eps_start, cfg.eps_end,
                                  cfg.eps_decay_episodes)
        self.act_rng = stream(cfg.seed, "policy")
        self.curiosity = None
        self.linear = None
        if cfg.variant in ("cermic_q", "cermic_no_calibration"):
            if perception_params is None and cfg.perception:
                from .checkpoint import load_params
                perception_params, _ = load_params(cfg.perception)
            self.curiosity = CuriosityLearner(cfg, cfg.grid.obs_dim, perception_params)
        elif cfg.variant == "lsvi_ucb":
            self.linear = LinearCuriosity(cfg, n_feat)
        self.log = MetricsLog(linear=self.linear is not None)
        self.first = -1
        self.episode = 0

    def bonus_table(self, obs) -> np.ndarray | None:
        """Intrinsic reward for every action at the given observations (G, ..., actions)."""
        if self.curiosity is not None:
            return self.curiosity.table(obs)
        if self.linear is not None:
            return self.linear.table(policy_features(obs, self.cfg.grid))
        return None

    def rollout(self):
        cfg = self.cfg
        state, obs = self.world.reset(stream_seed(cfg.seed, "env", self.episode) & 0x7FFFFFFF)
        obs_seq, act_seq, rew_seq = [obs], [], []
        while not state.done:
            bonus = None
            if cfg.intrinsic_scale > 0 and cfg.bonus_mode == "optimistic":
                table = self.bonus_table(obs)
                bonus = None if table is None else cfg.intrinsic_scale * table
            a = self.policy.act(policy_features(obs, cfg.grid), self.act_rng, bonus)
            state, obs, r, _ = self.world.step(state, a)
            obs_seq.append(obs)
            act_seq.append(state.last_actions.copy())
            rew_seq.append(r)
        return np.stack(obs_seq, axis=1), np.stack(act_seq, axis=1), np.asarray(rew_seq), state.success

    def run_episode(self) -> dict:
        cfg = self.cfg
        self.episode += 1
        ep = self.episode
        t0 = time.perf_counter()
        O, act, r_e, success = self.rollout()      # O (G, T+1, obs_dim), act (G, T)
        G, T = act.shape
        phi = policy_features(O, cfg.grid)
        terminal = np.zeros(T, dtype=bool)
        terminal[-1] = success

        table = self.bonus_table(O)
        if table is None:
            table = np.zeros((G, T + 1, N_ACTIONS))
        r_i = np.take_along_axis(table[:, :T], act[..., None], axis=-1)[..., 0]
        if cfg.bonus_mode == "optimistic":
            bonus = combine_rewards(0.0, table, cfg.intrinsic_scale) if cfg.intrinsic_scale > 0 else None
            rewards = np.broadcast_to(r_e, (G, T))
        else:
            bonus = None
            rewards = combine_rewards(r_e[None, :], r_i, cfg.intrinsic_scale)
        policy_update(self.policy, phi, act, rewards, terminal, cfg.q_lr, cfg.discount, bonus)
        extra = {"loss_explore": 0.0, "loss_ub": 0.0, "loss_lb": 0.0, "gamma_mean": 0.0}
        if self.curiosity is not None:
            r_prev = np.concatenate([[0.0], r_e[:-1]])
            extra = self.curiosity.update(O[:, :T], act, O[:, 1:], r_prev)
        elif self.linear is not None:
            self.linear.update(phi[:, :T], act, phi[:, 1:])
            vals = self.linear.probe_values(cfg.grid, cfg.probes)
            for g in range(G):
                for i in range(len(cfg.probes)):
                    self.log.probes.append((ep, g, i, float(vals[g, i])))
        ret = float(r_e.sum())
        if ret > 0 and self.first < 0:
            self.first = ep
        wall = (time.perf_counter() - t0) * 1000.0 if cfg.record_wall_clock else 0.0
        row = dict(seed=cfg.seed, episode=ep, first_success=self.first, mean_r_int=float(r_i.mean()),
                   wall_ms=wall, **extra)
        row["return"] = ret
        self.log.append(**row)
        return row

    def run(self) -> MetricsLog:
        while self.episode < self.cfg.episodes:
            self.run_episode()
        return self.log


def run_training(cfg: RunConfig, perception_params: dict | None = None) -> MetricsLog:
    return Trainer(cfg, perception_params).run()


def pretrain_intention_modules(grid: GridConfig, seed: int = 0, n_obs: int = 6000, epochs: int = 60,
                               d_f: int = 16):
    """Fit the shared perception nets on labeled random-walk views; returns a PretrainResult."""
    from .memory import generate_corpus, pretrain_perception
    world = GridWorld(replace(grid, starts=None))
    perception = Perception(MemoryConfig(n_agents=grid.n_agents, obs_dim=grid.obs_dim, d_f=d_f))
    corpus = generate_corpus(world, n_obs, stream(seed, "pretrain-corpus"))
    train, held = corpus.split(0.8)
    init = perception.init(stream(seed, "perception-init"))
    return pretrain_perception(perception, init, train, held, epochs, stream(seed, "pretrain-order"))


# ---------------------------------------------------------------- probes and suites

@dataclass
class ProbeReport:
    linear: bool
    monotone: bool | None
    max_increase: float
    trend: float | None
    values: list


def intrinsic_decay_probe(log: MetricsLog) -> ProbeReport:
    """Linear agents: certify non-increase of every pinned probe. Deep agents: report the trend."""
    if not log.rows:
        return ProbeReport(log.linear, None, 0.0, None, [])
    if log.linear:
        series: dict = {}
        for ep, g, i, v in log.probes:
            series.setdefault((g, i), []).append(v)
        worst = 0.0
        for vals in series.values():
            d = np.diff(vals)
            if d.size:
                worst = max(worst, float(d.max()))
        return ProbeReport(True, worst <= 0.0, worst, None, [series[k] for k in sorted(series)])
    r = log.column("mean_r_int")
    trend = float(np.polyfit(np.arange(r.size), r, 1)[0]) if r.size > 1 else 0.0
    return ProbeReport(False, None, 0.0, trend, list(r))


def _run_one(args):
    cfg, perception = args
    return run_training(cfg, perception)


def run_seeds(cfg: RunConfig, seeds, perception_params=None, jobs: int | None = None) -> list:
    """Run one config over several seeds; results are ordered by seed regardless of ``jobs``."""
    jobs = jobs or int(os.environ.get("CERMIC_LAB_JOBS", "1"))
    tasks = [(replace(cfg, seed=int(s)), perception_params) for s in seeds]
    if jobs <= 1 or len(tasks) == 1:
        return [_run_one(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_one, tasks))


ABLATIONS = (
    ("full", {}),
    ("no_explore", {"use_explore": False}),
    ("no_exploit", {"use_exploit": False}),
    ("alpha_1.0", {"alpha": 1.0}),
    ("alpha_0.5", {"alpha": 0.5}),
    ("alpha_0.2", {"alpha": 0.2}),
    ("memory_graph", {"memory": "graph"}),
    ("memory_recurrent", {"memory": "recurrent"}),
)


@dataclass
class AblationRow:
    name: str
    final_return_mean: float
    final_return_std: float
    first_success_mean: float
    first_success_std: float
    seeds: int


def ablation_suite(base: RunConfig, seeds, grid=ABLATIONS, perception_params=None, jobs=None,
                   window: int = 10, cache: dict | None = None) -> tuple[list, dict]:
    """Run every grid entry over the seeds; returns (table rows, logs by name)."""
    rows, logs = [], {}
    done: dict = {} if cache is None else cache
    for name, overrides in grid:
        cfg = replace(base, **overrides)
        key = repr(cfg)
        if key not in done:
            done[key] = run_seeds(cfg, seeds, perception_params, jobs)
        runs = done[key]
        logs[name] = runs
        fr = np.array([r.final_return(window) for r in runs])
        fs = np.array([r.first_success() for r in runs], dtype=float)
        rows.append(AblationRow(name, float(fr.mean()), float(fr.std()), float(fs.mean()), float(fs.std()), len(runs)))
    return rows, logs


def write_table(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "final_return_mean", "final_return_std", "first_success_mean",
                    "first_success_std", "seeds"])
        for r in rows:
            w.writerow([r.name, _fmt(r.final_return_mean), _fmt(r.final_return_std),
                        _fmt(r.first_success_mean), _fmt(r.first_success_std), r.seeds])
