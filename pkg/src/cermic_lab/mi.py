"""Contrastive mutual-information estimates, the reliability factor and the calibrated mean."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, logsumexp

from .nets import TanhMLP


def _log_softmax(logits):
    return log_softmax(logits, axis=-1)


class BilinearCritic:
    """score(z, f) = z^T B f, normalized by softmax over each candidate set.

    Candidate index 0 is always the positive.
    """

    def __init__(self, B: np.ndarray):
        self.B = np.asarray(B, dtype=float)

    @classmethod
    def init(cls, rng, dz: int, df: int, scale: float = 0.1) -> "BilinearCritic":
        return cls(rng.normal(0.0, scale, (dz, df)))

    def logits(self, z, cands) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        cands = np.asarray(cands, dtype=float)
        if cands.ndim == 2:
            cands = cands[None]
        if z.shape[-1] != self.B.shape[0] or cands.shape[-1] != self.B.shape[1]:
            raise ValueError("context or candidate dimension does not match the critic")
        return np.einsum("bi,ij,bkj->bk", z, self.B, cands)

    def scores(self, z, cands) -> np.ndarray:
        return np.exp(_log_softmax(self.logits(z, cands)))

    def loss_and_grad(self, z, cands) -> tuple[float, np.ndarray]:
        """Negative mean log-score of the positive and its gradient w.r.t. B."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        cands = np.asarray(cands, dtype=float)
        logits = self.logits(z, cands)
        logp = _log_softmax(logits)
        p = np.exp(logp)
        dlogits = p.copy()
        dlogits[:, 0] -= 1.0
        dlogits /= z.shape[0]
        grad = np.einsum("bi,bk,bkj->ij", z, dlogits, cands)
        return float(-logp[:, 0].mean()), grad


def candidate_set(f_pos, negatives) -> np.ndarray:
    """Stack positives (B, df) and negatives (B, N, df) into (B, N + 1, df)."""
    f_pos = np.atleast_2d(np.asarray(f_pos, dtype=float))
    negatives = np.asarray(negatives, dtype=float)
    if negatives.ndim == 2:
        negatives = negatives[None]
    if negatives.shape[1] < 1:
        raise ValueError("need at least one negative per pair")
    return np.concatenate([f_pos[:, None, :], negatives], axis=1)


def pointwise_lower(critic: BilinearCritic, z, f_pos, negatives) -> np.ndarray:
    """log score of the positive, per pair."""
    cands = candidate_set(f_pos, negatives)
    return _log_softmax(critic.logits(z, cands))[:, 0]


def pointwise_upper(critic: BilinearCritic, z, f_pos, negatives) -> np.ndarray:
    """log N - log softmax(1 - score)_positive, per pair."""
    cands = candidate_set(f_pos, negatives)
    n_neg = cands.shape[1] - 1
    c = critic.scores(z, cands)
    return np.log(n_neg) - _log_softmax(1.0 - c)[:, 0]


def infonce_lower(critic: BilinearCritic, z, f_pos, negatives) -> float:
    """Mean log positive score; adding log N gives a lower estimate of the MI."""
    if np.size(f_pos) == 0:
        raise ValueError("empty batch")
    return float(pointwise_lower(critic, z, f_pos, negatives).mean())


def infonce_upper(critic: BilinearCritic, z, f_pos, negatives) -> float:
    if np.size(f_pos) == 0:
        raise ValueError("empty batch")
    return float(pointwise_upper(critic, z, f_pos, negatives).mean())


# ---------------------------------------------------------------- discrete oracle

@dataclass(frozen=True)
class DiscreteJoint:
    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table, dtype=float)
        if t.ndim != 2 or np.any(t < 0) or abs(t.sum() - 1.0) > 1e-12:
            raise ValueError("joint must be a non-negative 2-D table summing to 1")
        object.__setattr__(self, "table", t)

    def sample(self, rng, n: int) -> tuple[np.ndarray, np.ndarray]:
        flat = rng.choice(self.table.size, size=n, p=self.table.ravel())
        return np.unravel_index(flat, self.table.shape)

    def sample_marginal_f(self, rng, shape) -> np.ndarray:
        return rng.choice(self.table.shape[1], size=shape, p=self.table.sum(axis=0))


def exact_mi_discrete(joint: DiscreteJoint) -> float:
    p = joint.table
    pz = p.sum(axis=1, keepdims=True)
    pf = p.sum(axis=0, keepdims=True)
    mask = p > 0
    return max(float(np.sum(p[mask] * np.log(p[mask] / (pz @ pf)[mask]))), 0.0)


def optimal_critic_lower(joint: DiscreteJoint, n_neg: int) -> float:
    """Exact expected lower estimate (plus log N) under the density-ratio critic.

    Enumerates the positive pair and the count of each negative symbol via the
    multinomial distribution; used as an oracle for trained critics.
    """
    from itertools import product
    from scipy.stats import multinomial

    p = joint.table
    pz, pf = p.sum(axis=1), p.sum(axis=0)
    support = np.flatnonzero(pf > 0)
    pf_s = pf[support]
    counts = [c for c in product(range(n_neg + 1), repeat=len(support)) if sum(c) == n_neg]
    weights = np.array([multinomial.pmf(c, n_neg, pf_s) for c in counts])
    counts = np.array(counts, dtype=float)
    total = 0.0
    for zi in range(p.shape[0]):
        if pz[zi] == 0:
            continue
        ratio = p[zi, support] / (pz[zi] * pf_s)
        neg_sum = counts @ ratio
        for fj_idx, fj in enumerate(support):
            if p[zi, fj] == 0:
                continue
            val = np.log(ratio[fj_idx]) - np.log(ratio[fj_idx] + neg_sum)
            total += p[zi, fj] * float(weights @ val)
    return total + np.log(n_neg)


def fit_discrete_critic(joint: DiscreteJoint, rng, n_neg: int = 16, steps: int = 2000, batch: int = 256,
                        lr: float = 0.5) -> BilinearCritic:
    """Train a critic on one-hot embeddings of a discrete joint."""
    nz, nf = joint.table.shape
    critic = BilinearCritic(np.zeros((nz, nf)))
    ez, ef = np.eye(nz), np.eye(nf)
    for _ in range(steps):
        zi, fi = joint.sample(rng, batch)
        neg = joint.sample_marginal_f(rng, (batch, n_neg))
        _, g = critic.loss_and_grad(ez[zi], candidate_set(ef[fi], ef[neg]))
        critic.B -= lr * g
    return critic


# ---------------------------------------------------------------- calibration

def negative_sampler(f_now, count: int, noise_scale: float, rng) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be at least 1")
    f_now = np.asarray(f_now, dtype=float)
    if noise_scale == 0:
        warnings.warn("noise_scale 0 makes every negative equal the positive", RuntimeWarning, stacklevel=2)
    return f_now + noise_scale * rng.normal(size=(count,) + f_now.shape)


def gamma_factor(r_prev, f_prev, f_now, critic: BilinearCritic, negatives,
                 gamma_max: float = 5.0) -> tuple[np.ndarray, np.ndarray]:
    """Reliability of the inferred context, one value per transition.

    Returns (from_lower, from_upper), both clamped to [0, gamma_max]. The first
    is paired with the upper hinge loss and the second with the lower one.
    """
    r_prev = np.atleast_1d(np.asarray(r_prev, dtype=float))
    f_prev = np.atleast_2d(np.asarray(f_prev, dtype=float))
    z = np.concatenate([r_prev[:, None], f_prev], axis=1)
    negatives = np.asarray(negatives, dtype=float)
    if negatives.ndim == 2:
        negatives = negatives[None]
    n_neg = negatives.shape[1]
    lo = pointwise_lower(critic, z, f_now, negatives) + np.log(n_neg)
    hi = pointwise_upper(critic, z, f_now, negatives)
    return np.clip(lo, 0.0, gamma_max), np.clip(hi, 0.0, gamma_max)


class CalibrationHead:
    """mu_cal = mu + W2 tanh(W1 (gamma f)); bias-free so zero input is a no-op."""

    def __init__(self, name: str, df: int, hidden: int = 16):
        self.net = TanhMLP(name, df, hidden, 1, bias=False)

    def init(self, rng, params: dict, out_scale: float = 0.1, agents: int | None = None) -> None:
        self.net.init(rng, params, out_scale, agents=agents)

    def forward(self, params, gamma, f, mu_psi):
        gamma = np.asarray(gamma, dtype=float)
        f = np.asarray(f, dtype=float)
        if f.shape[-1] != self.net.n_in:
            raise ValueError(f"context dimension {f.shape[-1]} does not match {self.net.n_in}")
        u = gamma[..., None] * f
        g, cache = self.net.forward(params, u)
        return np.asarray(mu_psi) + g[..., 0], (gamma, cache)

    def backward(self, params, cache, dmu_cal, grads):
        """Returns the gradient w.r.t. f; mu_psi receives dmu_cal unchanged."""
        gamma, net_cache = cache
        du = self.net.backward(params, net_cache, np.asarray(dmu_cal)[..., None], grads)
        return du * gamma[..., None]


def calibrated_mean(gamma, f, mu_psi, h_params: dict, head: CalibrationHead | None = None):
    if head is None:
        df = h_params["h.l1.W"].shape[1]
        hidden = h_params["h.l1.W"].shape[0]
        head = CalibrationHead("h", df, hidden)
    out, _ = head.forward(h_params, gamma, f, mu_psi)
    return out
