"""The curiosity module: encoders, latent bottleneck, decoder and the combined objective.

All parameters carry a leading agent axis so several independent modules
train in one vectorized pass. Gradients are written out by hand.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .memory import EpisodeGraphs, MemoryConfig, MessagePassing, RecurrentMemory
from .mi import BilinearCritic, CalibrationHead, candidate_set, gamma_factor
from .nets import TanhMLP, gd_step, sigmoid
from .robust import AmbiguityParams, beta_from

LOGVAR_MIN = float(np.log(1e-4))
LOGVAR_MAX = float(np.log(1e4))
LOG_2PI = float(np.log(2 * np.pi))


def squash_logvar(raw):
    s = sigmoid(raw)
    return LOGVAR_MIN + (LOGVAR_MAX - LOGVAR_MIN) * s, s


def unsquash_logvar(logvar: float) -> float:
    if not LOGVAR_MIN < logvar < LOGVAR_MAX:
        raise ValueError(f"log-variance must lie in ({LOGVAR_MIN:.4g}, {LOGVAR_MAX:.4g})")
    s = (logvar - LOGVAR_MIN) / (LOGVAR_MAX - LOGVAR_MIN)
    return float(np.log(s / (1 - s)))


@dataclass(frozen=True)
class CermicConfig:
    obs_dim: int
    n_actions: int
    n_agents: int = 3
    d_state: int = 16
    d_latent: int = 8
    hidden: int = 32
    d_f: int = 16
    d_node: int = 16
    h_hidden: int = 16
    samples: int = 8
    alpha: float = 0.2
    ambiguity: AmbiguityParams = field(default_factory=AmbiguityParams)
    tau_m: float = 0.99
    lr: float = 1e-3
    critic_lr: float = 1e-3
    clip: float = 5.0
    stats_momentum: float = 0.99
    gamma_max: float = 5.0
    n_neg: int = 16
    noise_scale: float = 0.5
    noise_floor: float = 1e-3
    init_logvar: float = -3.0
    lat_init_scale: float = 0.5
    use_explore: bool = True
    use_exploit: bool = True
    calibrate: bool = True
    memory: str = "graph"

    @property
    def beta(self) -> float:
        return beta_from(self.ambiguity)


def momentum_update(params: dict, tau_m: float, online: str = "enc.", target: str = "enc_m.") -> None:
    """target <- tau_m * target + (1 - tau_m) * online, in place."""
    if not 0.0 <= tau_m <= 1.0:
        raise ValueError("tau_m must lie in [0, 1]")
    for k in list(params):
        if k.startswith(online):
            t = target + k[len(online):]
            params[t] = tau_m * params[t] + (1.0 - tau_m) * params[k]


def kl_to_standard(mean, logvar):
    """KL(N(mean, exp(logvar)) || N(0, I)) summed over the last axis."""
    return 0.5 * np.sum(np.exp(logvar) + mean**2 - 1.0 - logvar, axis=-1)


def psi_variance(mean, logvar):
    var = np.exp(logvar)
    return np.sum(0.5 * (var - 1.0) ** 2 + mean**2 * var, axis=-1)


def unit_rows(x, tiny: float = 1e-12):
    """Scale the last axis to unit length; all-zero rows stay zero."""
    x = np.asarray(x, dtype=float)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(n, tiny)


def combine_rewards(r_e, r_i, scale: float = 1.0):
    if scale < 0:
        raise ValueError("scale must be non-negative")
    return r_e + scale * r_i


@dataclass
class Batch:
    """One agent-stacked batch; leading axes (A, T)."""

    obs: np.ndarray
    act: np.ndarray
    obs_next: np.ndarray
    gamma_lo: np.ndarray
    gamma_hi: np.ndarray
    context: object          # EpisodeGraphs-like (stacked) or (obs, hidden_prev, valid)
    eps: np.ndarray          # (A, T, K, d_latent) reparameterization noise


class CermicModel:
    def __init__(self, cfg: CermicConfig):
        self.cfg = cfg
        c = cfg
        self.enc = TanhMLP("enc", c.obs_dim, c.hidden, c.d_state)
        self.enc_m = TanhMLP("enc_m", c.obs_dim, c.hidden, c.d_state)
        self.lat = TanhMLP("lat", c.d_state + c.n_actions, c.hidden, 2 * c.d_latent)
        self.dec = TanhMLP("dec", c.d_latent, c.hidden, 2 * c.d_state)
        self.head = CalibrationHead("h", c.d_f, c.h_hidden)
        self.mem_cfg = MemoryConfig(n_agents=c.n_agents, obs_dim=c.obs_dim, d_f=c.d_f, d_node=c.d_node)
        if c.memory == "graph":
            self.ctx = MessagePassing(self.mem_cfg)
        elif c.memory == "recurrent":
            self.ctx = RecurrentMemory(self.mem_cfg)
        else:
            raise ValueError(f"unknown memory type {c.memory!r}")

    # ------------------------------------------------------------ parameters
    def init(self, rng, agents: int) -> dict:
        c = self.cfg
        p: dict = {}
        self.enc.init(rng, p, agents=agents)
        self.lat.init(rng, p, out_scale=c.lat_init_scale, agents=agents)
        p["lat.l2.b"][:, c.d_latent:] = unsquash_logvar(c.init_logvar)
        self.dec.init(rng, p, agents=agents)
        p["dec.l2.b"][:, c.d_state:] = unsquash_logvar(0.0)
        self.head.init(rng, p, agents=agents)
        self.ctx.init(rng, p, agents=agents)
        p["critic.B"] = rng.normal(0.0, 0.1, (agents, 1 + c.d_f, c.d_f))
        for k in [k for k in p if k.startswith("enc.")]:
            p["enc_m." + k[4:]] = p[k].copy()
        return p

    @staticmethod
    def trainable(params: dict) -> list:
        return sorted(k for k in params if not k.startswith("enc_m.") and k != "critic.B")

    # ------------------------------------------------------------ pieces
    def encode_obs(self, params, obs, which: str = "online"):
        if np.shape(obs)[-1] != self.cfg.obs_dim:
            raise ValueError(f"observation dimension {np.shape(obs)[-1]} does not match {self.cfg.obs_dim}")
        net = self.enc if which == "online" else self.enc_m
        if which not in ("online", "momentum"):
            raise ValueError("which must be 'online' or 'momentum'")
        s, cache = net.forward(params, obs)
        return s, cache

    def latent(self, params, s, act):
        onehot = np.eye(self.cfg.n_actions)[np.asarray(act, dtype=int)]
        u = np.concatenate([s, onehot], axis=-1)
        out, cache = self.lat.forward(params, u)
        D = self.cfg.d_latent
        logvar, sq = squash_logvar(out[..., D:])
        return out[..., :D], logvar, (cache, sq)

    def decode(self, params, x):
        out, cache = self.dec.forward(params, x)
        D = self.cfg.d_state
        logvar, sq = squash_logvar(out[..., D:])
        return out[..., :D], logvar, (cache, sq)

    def intrinsic_reward(self, params, obs, act) -> np.ndarray:
        """sqrt(KL(latent posterior || N(0, I))) per transition."""
        s, _ = self.encode_obs(params, obs)
        m, lv, _ = self.latent(params, s, act)
        return np.sqrt(np.maximum(kl_to_standard(m, lv), 0.0))

    def psi_samples(self, params, obs, act, eps) -> np.ndarray:
        s, _ = self.encode_obs(params, obs)
        m, lv, _ = self.latent(params, s, act)
        x = m[..., None, :] + np.exp(0.5 * lv)[..., None, :] * eps
        return np.sum(-0.5 * lv[..., None, :] - 0.5 * eps**2 + 0.5 * x**2, axis=-1)

    # ------------------------------------------------------------ context
    def context(self, params, ctx):
        """Context vectors (A, T, d_f); zero where the memory is still cold."""
        if self.cfg.memory == "graph":
            f, cache = self.ctx.forward(params, ctx.nodes, ctx.mask, ctx.edges)
            valid = ctx.valid
        else:
            obs, hidden_prev, valid = ctx
            f, cache = self.ctx.cell.forward(params, obs, hidden_prev)
        v = np.asarray(valid, dtype=float)[..., None]
        return f * v, (cache, v)

    def context_backward(self, params, cache, df, grads):
        inner, v = cache
        df = df * v
        if self.cfg.memory == "graph":
            self.ctx.backward(params, inner, df, grads)
        else:
            self.ctx.cell.backward(params, inner, df, grads)

    # ------------------------------------------------------------ objective
    def loss(self, params, batch: Batch, stats_mean, stats_var, need_grad: bool = True):
        """Per-agent objective: upper hinge + lower hinge - alpha * log-likelihood.

        ``stats_mean``/``stats_var`` (A,) are the running moments of the
        log-ratio statistic and are treated as constants. Returns
        (loss (A,), parts, grads).
        """
        c = self.cfg
        A, T = batch.act.shape
        K = batch.eps.shape[2]
        grads: dict = {}
        s, c_enc = self.encode_obs(params, batch.obs)
        s_next, _ = self.encode_obs(params, batch.obs_next, "momentum")
        m, lv, (c_lat, sq_lat) = self.latent(params, s, batch.act)
        std = np.exp(0.5 * lv)
        x = m[:, :, None, :] + std[:, :, None, :] * batch.eps
        dm_, dlv, (c_dec, sq_dec) = self.decode(params, x)
        resid = s_next[:, :, None, :] - dm_
        inv_var = np.exp(-dlv)
        # per-dimension log-likelihood, (A, T, K)
        ll = np.mean(-0.5 * LOG_2PI - 0.5 * dlv - 0.5 * resid**2 * inv_var, axis=-1)
        explore = ll.mean(axis=(1, 2))

        var = np.exp(lv)
        mu_psi = 0.5 * np.sum(var + m**2 - 1.0 - lv, axis=-1)
        sig_psi = np.sum(0.5 * (var - 1.0) ** 2 + m**2 * var, axis=-1)
        sd = np.sqrt(stats_var)[:, None]
        mu_hat = (mu_psi - np.asarray(stats_mean)[:, None]) / sd
        sig_hat = sig_psi / np.asarray(stats_var)[:, None]
        root = np.sqrt(sig_hat)

        f, c_ctx = self.context(params, batch.context)
        if c.calibrate:
            mu_ub, c_h1 = self.head.forward(params, batch.gamma_lo, f, mu_hat)
            mu_lb, c_h2 = self.head.forward(params, batch.gamma_hi, f, mu_hat)
        else:
            mu_ub = mu_lb = mu_hat
        beta = c.beta
        a_ub = mu_ub + beta * root - c.ambiguity.c_upper
        a_lb = c.ambiguity.c_lower - mu_lb + beta * root
        ub = np.maximum(a_ub, 0.0)
        lb = np.maximum(a_lb, 0.0)
        w_exploit = 1.0 if c.use_exploit else 0.0
        w_explore = c.alpha if c.use_explore else 0.0
        loss = w_exploit * (ub.mean(axis=1) + lb.mean(axis=1)) - w_explore * explore
        parts = {
            "explore": explore,
            "ub": w_exploit * ub.mean(axis=1),
            "lb": w_exploit * lb.mean(axis=1),
            "mu_psi": mu_psi,
            "f": f,
        }
        if not need_grad:
            return loss, parts, grads

        # exploit branch
        g_ub = w_exploit * (a_ub > 0) / T
        g_lb = w_exploit * (a_lb > 0) / T
        d_mu_ub, d_mu_lb = g_ub, -g_lb
        d_root = beta * (g_ub + g_lb)
        d_sig_hat = d_root * 0.5 / np.maximum(root, 1e-300)
        df = np.zeros_like(f)
        if c.calibrate:
            df += self.head.backward(params, c_h1, d_mu_ub, grads)
            df += self.head.backward(params, c_h2, d_mu_lb, grads)
        if c.calibrate:
            self.context_backward(params, c_ctx, df, grads)
        d_mu_psi = (d_mu_ub + d_mu_lb) / sd
        d_sig_psi = d_sig_hat / np.asarray(stats_var)[:, None]
        d_m = d_mu_psi[..., None] * m + d_sig_psi[..., None] * 2.0 * m * var
        d_var = d_mu_psi[..., None] * 0.5 + d_sig_psi[..., None] * ((var - 1.0) + m**2)
        d_lv = d_var * var - 0.5 * d_mu_psi[..., None]

        # explore branch through the decoder and the reparameterized sample
        g_ll = -w_explore / (T * K * c.d_state)
        d_dm = g_ll * resid * inv_var
        d_dlv = g_ll * (-0.5 + 0.5 * resid**2 * inv_var)
        d_out = np.concatenate([d_dm, d_dlv * (LOGVAR_MAX - LOGVAR_MIN) * sq_dec * (1 - sq_dec)], axis=-1)
        d_x = self.dec.backward(params, c_dec, d_out, grads)
        d_m = d_m + d_x.sum(axis=2)
        d_lv = d_lv + np.sum(d_x * batch.eps, axis=2) * 0.5 * std

        d_lat = np.concatenate([d_m, d_lv * (LOGVAR_MAX - LOGVAR_MIN) * sq_lat * (1 - sq_lat)], axis=-1)
        d_u = self.lat.backward(params, c_lat, d_lat, grads)
        self.enc.backward(params, c_enc, d_u[..., :c.d_state], grads)
        for k in self.trainable(params):
            grads.setdefault(k, np.zeros_like(params[k]))
        return loss, parts, grads

    def step(self, params, batch: Batch, stats_mean, stats_var):
        loss, parts, grads = self.loss(params, batch, stats_mean, stats_var)
        A = batch.act.shape[0]
        gd_step(params, grads, self.cfg.lr, self.cfg.clip, keys=self.trainable(params), agents=A)
        momentum_update(params, self.cfg.tau_m)
        return loss, parts

    # ------------------------------------------------------------ critic
    def critic(self, params, a: int) -> BilinearCritic:
        return BilinearCritic(params["critic.B"][a])

    def critic_inputs(self, f, r_prev, rng, spread=None):
        """Context, positives and negatives for every agent, all on the unit sphere.

        Negatives are noisy copies of the positive; the noise is
        ``noise_scale`` times ``spread`` (A, D), the scale of the unit context
        entries (the batch std per dimension when omitted), floored at
        ``noise_floor``. The
        critic is bilinear, so directions are compared rather than raw
        vectors; without the projection a zero-mean perturbation leaves the
        expected score unchanged and nothing can be learned.
        """
        A, T, D = f.shape
        unit = unit_rows(f)
        prev = np.concatenate([np.zeros((A, 1, D)), unit[:, :-1]], axis=1)
        z = np.concatenate([np.broadcast_to(np.asarray(r_prev, float)[None, :, None], (A, T, 1)), prev], axis=-1)
        spread = unit.std(axis=1) if spread is None else np.asarray(spread, dtype=float)
        spread = np.maximum(spread, self.cfg.noise_floor)[:, None, None, :]
        noise = self.cfg.noise_scale * spread * rng.normal(size=(A, T, self.cfg.n_neg, D))
        neg = unit_rows(unit[:, :, None, :] + noise)
        return z, unit, neg

    def gammas(self, params, f, r_prev, rng, spread=None):
        """Per-transition reliability (lo, hi) plus the critic batch used to get them."""
        z, pos, neg = self.critic_inputs(f, r_prev, rng, spread)
        A = f.shape[0]
        lo, hi = np.zeros(f.shape[:2]), np.zeros(f.shape[:2])
        for a in range(A):
            lo[a], hi[a] = gamma_factor(z[a][:, 0], z[a][:, 1:], pos[a], self.critic(params, a), neg[a],
                                        self.cfg.gamma_max)
        return lo, hi, (z, pos, neg)

    def critic_step(self, params, z, pos, neg) -> np.ndarray:
        losses = np.zeros(pos.shape[0])
        for a in range(pos.shape[0]):
            cr = self.critic(params, a)
            losses[a], g = cr.loss_and_grad(z[a], candidate_set(pos[a], neg[a]))
            params["critic.B"][a] -= self.cfg.critic_lr * g
        return losses


def explore_loss(model: CermicModel, params, batch: Batch) -> np.ndarray:
    """Mean per-dimension decoder log-likelihood of the next embedding, per agent."""
    if batch.act.size == 0:
        raise ValueError("empty batch")
    cfg = model.cfg
    quiet = replace(cfg, use_exploit=False, alpha=1.0, calibrate=False)
    tmp = CermicModel.__new__(CermicModel)
    tmp.__dict__.update(model.__dict__)
    tmp.cfg = quiet
    A = batch.act.shape[0]
    _, parts, _ = tmp.loss(params, batch, np.zeros(A), np.ones(A), need_grad=False)
    return parts["explore"]


def intrinsic_reward_approx(mean, var) -> float:
    """sqrt of KL(N(mean, var) || N(0, I)) for a single diagonal Gaussian."""
    mean, var = np.asarray(mean, dtype=float), np.asarray(var, dtype=float)
    return float(np.sqrt(max(0.5 * np.sum(var + mean**2 - 1.0 - np.log(var)), 0.0)))


def total_loss(model: CermicModel, params, batch: Batch, stats_mean, stats_var):
    return model.loss(params, batch, stats_mean, stats_var)
