"""Log-ratio statistic moments, moment-ambiguity chance constraints and the hinge losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import DiagGaussian


@dataclass(frozen=True)
class PsiStats:
    mu: float
    sigma2: float
    normalized: bool = False

    def __post_init__(self):
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be non-negative")


@dataclass(frozen=True)
class AmbiguityParams:
    gamma1: float = 1.0
    gamma2: float = 2.0
    epsilon: float = 0.2
    c_upper: float = 1.0
    c_lower: float = -1.0

    def __post_init__(self):
        if not self.gamma1 > 0:
            raise ValueError("gamma1 must be positive")
        if not self.gamma2 > max(self.gamma1, 1.0):
            raise ValueError("gamma2 must exceed max(gamma1, 1)")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        if not self.c_lower < self.c_upper:
            raise ValueError("c_lower must be below c_upper")


def psi_sample(x, encoder: DiagGaussian) -> np.ndarray:
    """log p(x) - log N(x; 0, I) for one point or a batch of points."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != encoder.dim:
        raise ValueError(f"point dimension {x.shape[-1]} does not match encoder dimension {encoder.dim}")
    z2 = (x - encoder.mean) ** 2 / encoder.var
    return np.sum(-0.5 * np.log(encoder.var) - 0.5 * z2 + 0.5 * x**2, axis=-1)


def psi_moments(encoder: DiagGaussian) -> PsiStats:
    """Mean and variance of the log-ratio under x ~ encoder, in closed form.

    With x = m + s z the statistic is a quadratic in z:
    sum(-log s + m^2/2 + m s z + (s^2 - 1) z^2 / 2).
    """
    m, v = encoder.mean, encoder.var
    mu = 0.5 * np.sum(v + m**2 - 1.0 - np.log(v))
    sigma2 = np.sum(0.5 * (v - 1.0) ** 2 + m**2 * v)
    return PsiStats(float(mu), float(sigma2))


def beta_from(params: AmbiguityParams) -> float:
    g1, g2, eps = params.gamma1, params.gamma2, params.epsilon
    if not 0.0 < eps < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    if eps >= g1 / g2:
        return float(np.sqrt(g1) + np.sqrt((1.0 - eps) / eps * (g2 - g1)))
    return float(np.sqrt(g2 / eps))


def exploit_loss_ub(mu_cal: float, sigma2: float, beta: float, c_upper: float) -> float:
    if sigma2 < 0:
        raise ValueError("sigma2 must be non-negative")
    return max(0.0, mu_cal + beta * np.sqrt(sigma2) - c_upper)


def exploit_loss_lb(mu_cal: float, sigma2: float, beta: float, c_lower: float) -> float:
    """Hinge for P(statistic >= c_lower) >= 1 - eps; mirrors the upper hinge under (mu, c) -> (-mu, -c)."""
    if sigma2 < 0:
        raise ValueError("sigma2 must be non-negative")
    return max(0.0, c_lower - mu_cal + beta * np.sqrt(sigma2))


def _standard_gap(b: float, sd: float, r1: float) -> float:
    # rounding in b / sd must not turn the exact feasibility boundary k = r1 into infeasibility
    k = b / sd
    return r1 if abs(k - r1) <= 1e-12 * max(1.0, r1) else k


def worst_case_prob(b: float, sigma2: float, gamma1: float, gamma2: float) -> float | None:
    """Smallest P(statistic <= threshold) over the moment-ambiguity set.

    ``b`` is the gap between threshold and nominal mean. Returns None when
    ``b / sqrt(sigma2) < sqrt(gamma1)``, where no positive guarantee exists.
    """
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    r1 = np.sqrt(gamma1)
    k = _standard_gap(b, np.sqrt(sigma2), r1)
    if k < r1:
        return None
    if k <= gamma2 / r1:
        gap = (k - r1) ** 2
        return float(gap / ((gamma2 - gamma1) + gap))
    return float((k * k - gamma2) / (k * k))


@dataclass(frozen=True)
class TwoPointDistribution:
    values: tuple
    p: float

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")

    @property
    def mean(self) -> float:
        return self.p * self.values[0] + (1 - self.p) * self.values[1]

    @property
    def var(self) -> float:
        m = self.mean
        return self.p * (self.values[0] - m) ** 2 + (1 - self.p) * (self.values[1] - m) ** 2

    def prob_le(self, c: float) -> float:
        return (self.p if self.values[0] <= c else 0.0) + ((1 - self.p) if self.values[1] <= c else 0.0)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.where(rng.random(n) < self.p, self.values[0], self.values[1])


def cantelli_extreme(mu: float, sigma2: float, c_upper: float, gamma1: float, gamma2: float,
                     nudge: float = 1e-10) -> TwoPointDistribution:
    """The ambiguity-set member that (up to ``nudge``) minimizes P(X <= c_upper).

    The shifted mean is mu + u sqrt(sigma2) with u = min(sqrt(gamma1), gamma2/k);
    the remaining second-moment budget becomes the variance, and the mass is
    split as in the equality case of the one-sided Chebyshev bound.
    """
    sd = np.sqrt(sigma2)
    k = _standard_gap(c_upper - mu, sd, np.sqrt(gamma1))
    if k < np.sqrt(gamma1):
        raise ValueError("constraint infeasible for this ambiguity set")
    u = min(np.sqrt(gamma1), gamma2 / k)
    mean = mu + u * sd
    var = (gamma2 - u * u) * sigma2
    t = (c_upper - mean) + nudge
    p_hi = var / (var + t * t)
    return TwoPointDistribution((mean + t, mean - var / t), p_hi)


class RunningMoments:
    """Bias-corrected exponential moving mean and variance.

    Each call to :meth:`update` folds one batch (its mean and mean square)
    into the averages.
    """

    def __init__(self, momentum: float = 0.99, var_floor: float = 1e-6):
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        self.momentum = momentum
        self.var_floor = var_floor
        self._m1 = 0.0
        self._m2 = 0.0
        self._weight = 0.0

    def update(self, values) -> None:
        values = np.asarray(values, dtype=float).reshape(-1)
        if values.size == 0:
            return
        k = self.momentum
        self._m1 = k * self._m1 + (1 - k) * float(values.mean())
        self._m2 = k * self._m2 + (1 - k) * float(np.mean(values**2))
        self._weight = k * self._weight + (1 - k)

    @property
    def ready(self) -> bool:
        return self._weight > 0

    @property
    def mean(self) -> float:
        return self._m1 / self._weight if self._weight else 0.0

    @property
    def var(self) -> float:
        if not self._weight:
            return 1.0
        return max(self._m2 / self._weight - self.mean**2, self.var_floor)

    def normalize(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.mean) / np.sqrt(self.var)

    def state(self) -> dict:
        return {"m1": self._m1, "m2": self._m2, "weight": self._weight}


def normalize_psi(stream, chunk: int = 100, momentum: float = 0.99,
                  var_floor: float = 1e-6) -> tuple[np.ndarray, RunningMoments]:
    """Z-score a stream chunk by chunk; each chunk uses stats that include it."""
    stream = np.asarray(stream, dtype=float).reshape(-1)
    stats = RunningMoments(momentum, var_floor)
    out = np.empty_like(stream)
    for start in range(0, stream.size, chunk):
        block = stream[start:start + chunk]
        stats.update(block)
        out[start:start + chunk] = stats.normalize(block)
    return out, stats
