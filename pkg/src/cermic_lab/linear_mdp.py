"""Bayesian linear transition model, its surprise reward and the UCB comparison.

The transition model is s' = W eta(s, a) + noise with unit-variance Gaussian
noise and a zero-mean Gaussian prior of precision ``lam`` on every row of W.
Every row shares the same Gram matrix, so the posterior over vec(W) has
precision I_c (x) Gram.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol

import numpy as np
from scipy.optimize import brentq

from .numerics import (
    FullGaussian,
    kl_full_gaussian,
    kron_identity_feature,
    logdet_pd,
    sherman_morrison_update,
)

RESOLVE_EVERY = 256


def _log_inequality_limit() -> float:
    # largest x with x/2 <= log(1 + x)
    return brentq(lambda x: np.log1p(x) - 0.5 * x, 1.0, 10.0, xtol=1e-14)


Q_VALID_MAX = _log_inequality_limit()


@dataclass
class PosteriorState:
    """Gram matrix, its inverse, ridge mean and the sufficient statistic.

    ``target_stat`` holds sum s' eta^T so the mean can be re-solved exactly.
    """

    gram: np.ndarray
    gram_inv: np.ndarray
    mean: np.ndarray
    target_stat: np.ndarray
    m: int = 0
    lam: float = 1.0

    @classmethod
    def prior(cls, d: int, c: int, lam: float = 1.0) -> "PosteriorState":
        if lam <= 0:
            raise ValueError("lam must be positive")
        return cls(
            gram=lam * np.eye(d),
            gram_inv=np.eye(d) / lam,
            mean=np.zeros((c, d)),
            target_stat=np.zeros((c, d)),
            m=0,
            lam=float(lam),
        )

    @property
    def d(self) -> int:
        return self.gram.shape[0]

    @property
    def c(self) -> int:
        return self.mean.shape[0]

    def copy(self) -> "PosteriorState":
        return PosteriorState(
            self.gram.copy(), self.gram_inv.copy(), self.mean.copy(),
            self.target_stat.copy(), self.m, self.lam,
        )

    def quad(self, eta) -> float:
        """eta^T Gram^-1 eta."""
        eta = self._check(eta)
        return max(float(eta @ self.gram_inv @ eta), 0.0)

    def _check(self, eta) -> np.ndarray:
        eta = np.asarray(eta, dtype=float).reshape(-1)
        if eta.size != self.d:
            raise ValueError(f"feature dimension {eta.size} does not match posterior dimension {self.d}")
        return eta

    def batch_solve(self) -> np.ndarray:
        return np.linalg.solve(self.gram, self.target_stat.T).T

    def as_gaussian(self) -> FullGaussian:
        """Posterior over vec(W) (row-major) as a dense Gaussian."""
        c = self.c
        cov = np.kron(np.eye(c), self.gram_inv)
        cov = 0.5 * (cov + cov.T)
        return FullGaussian(self.mean.reshape(-1), cov)


def posterior_update(post: PosteriorState, eta, s_next=None) -> PosteriorState:
    """Absorb one transition (eta, s_next); returns a new state.

    ``s_next`` may be omitted when only the Gram matrix matters, in which case
    the observation is taken to equal the current prediction and the mean is
    left unchanged.
    """
    eta = post._check(eta)
    if s_next is None:
        s_next = post.mean @ eta
    s_next = np.asarray(s_next, dtype=float).reshape(-1)
    if s_next.size != post.c:
        raise ValueError(f"next-state dimension {s_next.size} does not match c={post.c}")
    new = post.copy()
    new.gram = post.gram + np.outer(eta, eta)
    new.gram_inv = sherman_morrison_update(post.gram_inv, eta)
    new.target_stat = post.target_stat + np.outer(s_next, eta)
    new.m = post.m + 1
    if new.m % RESOLVE_EVERY == 0:
        new.gram_inv = np.linalg.inv(new.gram)
        new.gram_inv = 0.5 * (new.gram_inv + new.gram_inv.T)
        new.mean = new.batch_solve()
    else:
        gain = new.gram_inv @ eta
        new.mean = post.mean + np.outer(s_next - post.mean @ eta, gain)
    return new


def posterior_batch(d: int, c: int, lam: float, etas, targets) -> PosteriorState:
    """Posterior from a whole log at once (order-free reference)."""
    etas = np.asarray(etas, dtype=float).reshape(-1, d)
    targets = np.asarray(targets, dtype=float).reshape(-1, c)
    post = PosteriorState.prior(d, c, lam)
    post.gram = lam * np.eye(d) + etas.T @ etas
    post.gram_inv = np.linalg.inv(post.gram)
    post.target_stat = targets.T @ etas
    post.mean = post.batch_solve()
    post.m = etas.shape[0]
    return post


def kl_posterior_update(post: PosteriorState, eta) -> float:
    """Information gained about W from one transition at eta.

    Equals (c/2) log(1 + eta^T Gram^-1 eta): the expected KL between the updated
    and current posteriors over the predictive distribution of s'.
    """
    return 0.5 * post.c * float(np.log1p(post.quad(eta)))


def kl_posterior_update_dense(post: PosteriorState, eta) -> tuple[float, float]:
    """Two independent dense evaluations of :func:`kl_posterior_update`.

    Works on the explicit cd x cd Kronecker precisions and never uses the
    determinant lemma. Returns (entropy_drop, expected_kl):

    * entropy_drop: half the log-determinant difference of the covariances.
    * expected_kl: KL between zero-mean posteriors plus the expected
      Mahalanobis term of the mean shift, averaged over the predictive s'.
    """
    eta = post._check(eta)
    c = post.c
    big_eta = kron_identity_feature(eta, c)
    prec_old = np.kron(np.eye(c), post.gram)
    prec_new = prec_old + big_eta @ big_eta.T
    cov_old = np.linalg.inv(prec_old)
    cov_new = np.linalg.inv(prec_new)
    cov_old = 0.5 * (cov_old + cov_old.T)
    cov_new = 0.5 * (cov_new + cov_new.T)
    entropy_drop = 0.5 * (logdet_pd(cov_old) - logdet_pd(cov_new))

    zeros = np.zeros(c * post.d)
    shape_part = kl_full_gaussian(FullGaussian(zeros, cov_new), FullGaussian(zeros, cov_old))
    # mean shift = K (s' - prediction), prediction error covariance S
    gain = cov_new @ big_eta
    pred_cov = np.eye(c) + big_eta.T @ cov_old @ big_eta
    shift_cov = gain @ pred_cov @ gain.T
    expected_kl = shape_part + 0.5 * float(np.trace(prec_old @ shift_cov))
    return float(entropy_drop), float(expected_kl)


def realized_kl(post: PosteriorState, eta, s_next) -> float:
    """KL(updated || current) for one concrete s' (its mean over s' is the closed form)."""
    new = posterior_update(post, eta, s_next)
    return kl_full_gaussian(new.as_gaussian(), post.as_gaussian())


def intrinsic_reward_exact(post: PosteriorState, eta) -> float:
    return float(np.sqrt(kl_posterior_update(post, eta)))


def ucb_bonus(post: PosteriorState, eta, zeta: float = 1.0) -> float:
    if zeta <= 0:
        raise ValueError("zeta must be positive")
    return zeta * float(np.sqrt(post.quad(eta)))


def sandwich_rho(c: int, zeta: float) -> float:
    return float(np.sqrt(c / 4.0) / zeta)


# ---------------------------------------------------------------- certification

@dataclass
class Theorem1Report:
    rows: list = field(default_factory=list)
    tolerance: float = 1e-9

    @property
    def count(self) -> int:
        return len(self.rows)

    @property
    def violations(self) -> int:
        return sum(1 for r in self.rows if r[4] < -self.tolerance or r[5] < -self.tolerance)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["instance_id", "q", "r_exact", "r_ucb", "lower_slack", "upper_slack"])
            for row in self.rows:
                w.writerow([row[0]] + [f"{v:.17g}" for v in row[1:]])


@dataclass
class SandwichInstance:
    post: PosteriorState
    eta: np.ndarray
    zeta: float = 1.0


def random_instances(rng: np.random.Generator, n: int, max_d: int = 8, max_c: int = 4,
                     max_updates: int = 50) -> Iterable[SandwichInstance]:
    """Instances with lam >= max ||eta||^2, so q <= 1."""
    for _ in range(n):
        d = int(rng.integers(1, max_d + 1))
        c = int(rng.integers(1, max_c + 1))
        k = int(rng.integers(0, max_updates + 1))
        scale = float(rng.uniform(0.1, 3.0))
        feats = rng.normal(size=(k + 1, d)) * scale
        lam = float(np.max(np.sum(feats**2, axis=1))) * float(rng.uniform(1.0, 3.0))
        lam = max(lam, 1e-12)
        post = PosteriorState.prior(d, c, lam)
        for eta in feats[:k]:
            post = posterior_update(post, eta, rng.normal(size=c))
        zeta = float(rng.uniform(0.1, 5.0))
        yield SandwichInstance(post, feats[k], zeta)


def verify_theorem1(instances: Iterable[SandwichInstance], tolerance: float = 1e-9) -> Theorem1Report:
    """Check rho*r_ucb <= r_exact <= sqrt(2)*rho*r_ucb on every instance.

    Raises ValueError for an instance with q beyond the range where the
    underlying log inequality holds.
    """
    report = Theorem1Report(tolerance=tolerance)
    for i, inst in enumerate(instances):
        q = inst.post.quad(inst.eta)
        if q > Q_VALID_MAX:
            raise ValueError(f"instance {i}: q={q:.4f} exceeds {Q_VALID_MAX:.4f}")
        r_exact = intrinsic_reward_exact(inst.post, inst.eta)
        r_ucb = ucb_bonus(inst.post, inst.eta, inst.zeta)
        rho = sandwich_rho(inst.post.c, inst.zeta)
        report.rows.append((i, q, r_exact, r_ucb, r_exact - rho * r_ucb,
                            np.sqrt(2.0) * rho * r_ucb - r_exact))
    return report


def sandwich_lower_slack(q) -> np.ndarray:
    """Lower-bound slack per unit sqrt(c/4) as a function of q.

    The upper side holds for every q since log(1 + q) <= q; the lower side
    needs q/2 <= log(1 + q), so negative values appear exactly for q above
    ``Q_VALID_MAX``.
    """
    q = np.asarray(q, dtype=float)
    return np.sqrt(2.0 * np.log1p(q)) - np.sqrt(q)


# ---------------------------------------------------------------- LSVI-UCB

class EpisodicEnv(Protocol):
    n_actions: int
    horizon: int
    dim: int

    def reset(self, rng: np.random.Generator): ...

    def step(self, state, action: int): ...

    def features(self, state, action: int) -> np.ndarray: ...


@dataclass
class LsviResult:
    weights: np.ndarray  # (H, d)
    gram_inv: np.ndarray  # (H, d, d)
    returns: np.ndarray
    zeta: float
    env: object
    probe_bonus: list = field(default_factory=list)

    def q_value(self, h: int, state, action: int, optimistic: bool = False) -> float:
        eta = np.asarray(self.env.features(state, action), dtype=float)
        v = float(self.weights[h] @ eta)
        if optimistic:
            v += self.zeta * float(np.sqrt(max(eta @ self.gram_inv[h] @ eta, 0.0)))
        return min(v, float(self.env.horizon)) if optimistic else v

    def greedy(self, h: int, state) -> int:
        vals = [self.q_value(h, state, a, optimistic=True) for a in range(self.env.n_actions)]
        return int(np.argmax(vals))


def lsvi_ucb_learner(env: EpisodicEnv, episodes: int, zeta: float = 1.0, lam: float = 1.0,
                     rng: np.random.Generator | None = None,
                     probe: tuple | None = None) -> LsviResult:
    """Finite-horizon least-squares value iteration with an optimistic bonus.

    ``probe`` = (h, state, action) records the bonus at that pair after every
    episode.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    H, A, d = env.horizon, env.n_actions, env.dim
    feats_sa = [[] for _ in range(H)]      # eta of taken (x_h, a_h)
    rewards = [[] for _ in range(H)]
    next_states = [[] for _ in range(H)]   # x_{h+1} or None at terminal
    weights = np.zeros((H, d))
    gram_inv = np.stack([np.eye(d) / lam for _ in range(H)])
    returns = np.zeros(episodes)
    result = LsviResult(weights, gram_inv, returns, zeta, env)

    def _check(eta):
        eta = np.asarray(eta, dtype=float)
        if eta.shape != (d,):
            raise ValueError(f"feature dimension {eta.shape} does not match {d}")
        return eta

    for k in range(episodes):
        # backward pass over all data collected so far
        for h in range(H - 1, -1, -1):
            if not feats_sa[h]:
                continue
            phi = np.asarray(feats_sa[h])
            gram = lam * np.eye(d) + phi.T @ phi
            ginv = np.linalg.inv(gram)
            targets = np.asarray(rewards[h], dtype=float)
            if h + 1 < H:
                nxt = np.zeros(len(targets))
                for i, x in enumerate(next_states[h]):
                    if x is not None:
                        nxt[i] = max(result.q_value(h + 1, x, a, optimistic=True) for a in range(A))
                targets = targets + nxt
            weights[h] = ginv @ (phi.T @ targets)
            gram_inv[h] = 0.5 * (ginv + ginv.T)
        # roll out greedily
        x = env.reset(rng)
        total = 0.0
        for h in range(H):
            a = result.greedy(h, x)
            eta = _check(env.features(x, a))
            x_next, r, done = env.step(x, a)
            feats_sa[h].append(eta)
            rewards[h].append(float(r))
            next_states[h].append(None if done else x_next)
            total += float(r)
            x = x_next
            if done:
                break
        returns[k] = total
        if probe is not None:
            ph, ps, pa = probe
            eta = _check(env.features(ps, pa))
            g = lam * np.eye(d) + (np.asarray(feats_sa[ph]).T @ np.asarray(feats_sa[ph]) if feats_sa[ph] else 0.0)
            result.probe_bonus.append(zeta * float(np.sqrt(eta @ np.linalg.solve(g, eta))))
    return result


def value_iteration(transition: Callable, reward: Callable, n_states: int, n_actions: int,
                    horizon: int) -> np.ndarray:
    """Exact finite-horizon Q for a deterministic tabular MDP; shape (H, S, A)."""
    q = np.zeros((horizon, n_states, n_actions))
    for h in range(horizon - 1, -1, -1):
        for s in range(n_states):
            for a in range(n_actions):
                v = reward(s, a)
                if h + 1 < horizon:
                    v += q[h + 1, transition(s, a)].max()
                q[h, s, a] = v
    return q
