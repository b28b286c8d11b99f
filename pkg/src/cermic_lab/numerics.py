"""Dense Gaussian calculus and the structural identities used by the linear-MDP analysis."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError


@dataclass(frozen=True)
class DiagGaussian:
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        var = np.atleast_1d(np.asarray(self.var, dtype=float))
        if mean.shape != var.shape:
            raise ValueError(f"mean/var shape mismatch: {mean.shape} vs {var.shape}")
        if not np.all(var > 0):
            raise ValueError("variances must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @classmethod
    def standard(cls, dim: int) -> "DiagGaussian":
        return cls(np.zeros(dim), np.ones(dim))

    def logpdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        z = (x - self.mean) ** 2 / self.var
        return -0.5 * np.sum(np.log(2 * np.pi * self.var) + z, axis=-1)


@dataclass(frozen=True)
class FullGaussian:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean of size {mean.size}")
        if not np.allclose(cov, cov.T, atol=1e-10, rtol=0.0):
            raise ValueError("covariance is not symmetric")
        _chol(cov)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


def _chol(a: np.ndarray):
    try:
        return cho_factor(a, lower=True)
    except LinAlgError as exc:
        raise ValueError("matrix is not positive-definite") from exc


def logdet_pd(a: np.ndarray) -> float:
    """log det of a symmetric positive-definite matrix via Cholesky."""
    c, _ = _chol(np.atleast_2d(a))
    return float(2.0 * np.sum(np.log(np.diag(c))))


def kl_diag_gaussian(p: DiagGaussian, q: DiagGaussian) -> float:
    """KL(p || q) for diagonal Gaussians."""
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    ratio = p.var / q.var
    kl = 0.5 * np.sum(ratio + (p.mean - q.mean) ** 2 / q.var - 1.0 - np.log(ratio))
    return max(float(kl), 0.0)


def kl_full_gaussian(p: FullGaussian, q: FullGaussian) -> float:
    """KL(p || q) between full-covariance Gaussians.

    Raises ValueError if either covariance is not positive-definite.
    """
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    cq = _chol(q.cov)
    diff = p.mean - q.mean
    trace = np.trace(cho_solve(cq, p.cov))
    maha = float(diff @ cho_solve(cq, diff))
    kl = 0.5 * (trace - p.dim + maha + logdet_pd(q.cov) - logdet_pd(p.cov))
    return max(float(kl), 0.0)


def vec_row_major(w) -> np.ndarray:
    """Stack the rows of a c x d matrix: [w11..w1d, w21..w2d, ...]."""
    return np.asarray(w, dtype=float).reshape(-1).copy()


def unvec_row_major(v, c: int, d: int) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.size != c * d:
        raise ValueError(f"cannot reshape vector of size {v.size} to {c}x{d}")
    return v.reshape(c, d).copy()


def kron_identity_feature(eta, c: int) -> np.ndarray:
    """I_c (x) eta as a (c*d) x c block-diagonal matrix.

    With the row-major vec above, vec(W)^T @ result == (W @ eta)^T.
    """
    if c < 1:
        raise ValueError("c must be a positive integer")
    eta = np.asarray(eta, dtype=float).reshape(-1, 1)
    return np.kron(np.eye(c), eta)


def sherman_morrison_update(a_inv: np.ndarray, eta) -> np.ndarray:
    """Return (A + eta eta^T)^-1 given a symmetric A^-1."""
    eta = np.asarray(eta, dtype=float)
    u = a_inv @ eta
    denom = 1.0 + float(eta @ u)
    out = a_inv - np.outer(u, u) / denom
    # keep exact symmetry; drift otherwise accumulates over thousands of updates
    return 0.5 * (out + out.T)


def matrix_determinant_lemma(lam: np.ndarray, eta) -> float:
    """log det(Lam + eta eta^T) - log det(Lam) = log(1 + eta^T Lam^-1 eta)."""
    eta = np.asarray(eta, dtype=float)
    c = _chol(np.atleast_2d(lam))
    q = float(eta @ cho_solve(c, eta))
    return float(np.log1p(q))
