"""Tiny layer library with hand-written backward passes.

Parameters live in a flat ``dict[str, ndarray]``; layers are stateless
descriptors that read and write entries under their own name prefix. Every
``backward`` accumulates into a gradient dict with the same keys.
"""
from __future__ import annotations

from typing import Callable

import numpy as np


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def zeros_like_params(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def _acc(grads: dict, key: str, value: np.ndarray) -> None:
    if key in grads:
        grads[key] += value
    else:
        grads[key] = value.copy()


def mm(x, W):
    """x @ W^T on the last axis; a 3-D W carries a leading per-agent axis that x shares."""
    if W.ndim == 2:
        return x @ W.T
    A = W.shape[0]
    xr = x.reshape(A, -1, x.shape[-1])
    return (xr @ W.transpose(0, 2, 1)).reshape(x.shape[:-1] + (W.shape[1],))


def mm_back(x, dy, W):
    """Gradients (dW, dx) of :func:`mm`."""
    if W.ndim == 2:
        dW = dy.reshape(-1, W.shape[0]).T @ x.reshape(-1, W.shape[1])
        return dW, dy @ W
    A = W.shape[0]
    xr = x.reshape(A, -1, W.shape[2])
    dyr = dy.reshape(A, -1, W.shape[1])
    return dyr.transpose(0, 2, 1) @ xr, (dyr @ W).reshape(x.shape)


def add_bias(y, b):
    if b.ndim == 1:
        return y + b
    return y + b.reshape((b.shape[0],) + (1,) * (y.ndim - 2) + (b.shape[1],))


def bias_back(dy, b):
    if b.ndim == 1:
        return dy.reshape(-1, b.shape[0]).sum(axis=0)
    return dy.reshape(b.shape[0], -1, b.shape[1]).sum(axis=1)


def _shape(agents, *dims):
    return dims if agents is None else (agents,) + dims


class Linear:
    def __init__(self, name: str, n_in: int, n_out: int, bias: bool = True):
        self.name, self.n_in, self.n_out, self.bias = name, n_in, n_out, bias

    def init(self, rng, params: dict, scale: float = 1.0, agents: int | None = None) -> None:
        params[self.name + ".W"] = rng.normal(0.0, scale / np.sqrt(self.n_in), _shape(agents, self.n_out, self.n_in))
        if self.bias:
            params[self.name + ".b"] = np.zeros(_shape(agents, self.n_out))

    def forward(self, params, x):
        y = mm(x, params[self.name + ".W"])
        if self.bias:
            y = add_bias(y, params[self.name + ".b"])
        return y

    def backward(self, params, x, dy, grads):
        W = params[self.name + ".W"]
        dW, dx = mm_back(x, dy, W)
        _acc(grads, self.name + ".W", dW)
        if self.bias:
            _acc(grads, self.name + ".b", bias_back(dy, params[self.name + ".b"]))
        return dx


class TanhMLP:
    """x -> W2 tanh(W1 x + b1) + b2 on the last axis."""

    def __init__(self, name: str, n_in: int, n_hidden: int, n_out: int, bias: bool = True):
        self.name = name
        self.l1 = Linear(name + ".l1", n_in, n_hidden, bias)
        self.l2 = Linear(name + ".l2", n_hidden, n_out, bias)
        self.n_in, self.n_hidden, self.n_out = n_in, n_hidden, n_out

    def init(self, rng, params: dict, out_scale: float = 1.0, agents: int | None = None) -> None:
        self.l1.init(rng, params, agents=agents)
        self.l2.init(rng, params, out_scale, agents=agents)

    def forward(self, params, x):
        h = np.tanh(self.l1.forward(params, x))
        return self.l2.forward(params, h), (x, h)

    def backward(self, params, cache, dy, grads):
        x, h = cache
        dh = self.l2.backward(params, h, dy, grads)
        return self.l1.backward(params, x, dh * (1.0 - h * h), grads)


class GRUCell:
    """Gated recurrent update h' = (1 - z) n + z h."""

    def __init__(self, name: str, n_in: int, n_hidden: int):
        self.name, self.n_in, self.n_hidden = name, n_in, n_hidden

    def init(self, rng, params: dict, zero_gates: bool = False, agents: int | None = None) -> None:
        n, H = self.n_in, self.n_hidden
        s = 0.0 if zero_gates else 1.0
        for g in ("z", "r", "n"):
            params[f"{self.name}.W{g}"] = rng.normal(0, s / np.sqrt(n), _shape(agents, H, n))
            params[f"{self.name}.U{g}"] = rng.normal(0, s / np.sqrt(H), _shape(agents, H, H))
            params[f"{self.name}.b{g}"] = np.zeros(_shape(agents, H))

    def forward(self, params, x, h):
        p = lambda k: params[f"{self.name}.{k}"]
        z = sigmoid(add_bias(mm(x, p("Wz")) + mm(h, p("Uz")), p("bz")))
        r = sigmoid(add_bias(mm(x, p("Wr")) + mm(h, p("Ur")), p("br")))
        uh = mm(h, p("Un"))
        n = np.tanh(add_bias(mm(x, p("Wn")) + r * uh, p("bn")))
        h_new = (1.0 - z) * n + z * h
        return h_new, (x, h, z, r, n, uh)

    def backward(self, params, cache, dh_new, grads):
        """Returns (dx, dh) and accumulates parameter gradients."""
        p = lambda k: params[f"{self.name}.{k}"]
        x, h, z, r, n, uh = cache
        da_n = dh_new * (1.0 - z) * (1.0 - n * n)
        da_z = dh_new * (h - n) * z * (1.0 - z)
        da_r = da_n * uh * r * (1.0 - r)
        duh = da_n * r
        dh = dh_new * z
        dx = 0.0
        for g, da in (("z", da_z), ("r", da_r), ("n", da_n)):
            dW, dxg = mm_back(x, da, p(f"W{g}"))
            _acc(grads, f"{self.name}.W{g}", dW)
            _acc(grads, f"{self.name}.b{g}", bias_back(da, p(f"b{g}")))
            dx = dx + dxg
            if g != "n":
                dU, dhg = mm_back(h, da, p(f"U{g}"))
                _acc(grads, f"{self.name}.U{g}", dU)
                dh = dh + dhg
        dU, dhg = mm_back(h, duh, p("Un"))
        _acc(grads, f"{self.name}.Un", dU)
        return dx, dh + dhg


# ---------------------------------------------------------------- optimization

def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def gd_step(params: dict, grads: dict, lr: float, clip: float | None = 5.0, keys=None,
            agents: int | None = None):
    """Plain gradient descent with global-norm clipping; returns the pre-clip norm.

    With ``agents`` set, every tensor has a leading agent axis and each agent
    is clipped by its own norm (independent optimizers).
    """
    keys = [k for k in (grads if keys is None else keys) if k in grads]
    if agents is None:
        norm = float(np.sqrt(sum(float(np.sum(grads[k] ** 2)) for k in keys)))
        scale = lr * (clip / norm if clip is not None and norm > clip else 1.0)
        for k in keys:
            params[k] -= scale * grads[k]
        return norm
    sq = np.zeros(agents)
    for k in keys:
        sq += np.sum(grads[k].reshape(agents, -1) ** 2, axis=1)
    norm = np.sqrt(sq)
    scale = np.full(agents, lr)
    if clip is not None:
        scale = np.where(norm > clip, lr * clip / np.maximum(norm, 1e-300), lr)
    for k in keys:
        params[k] -= scale.reshape((agents,) + (1,) * (grads[k].ndim - 1)) * grads[k]
    return norm


# ---------------------------------------------------------------- gradient checking

def finite_difference(f: Callable[[], float], params: dict, keys=None, h: float = 1e-6) -> dict:
    """Central differences of the scalar ``f()`` w.r.t. the given entries (modified in place, restored)."""
    out = {}
    for k in (params if keys is None else keys):
        arr = params[k]
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        out[k] = g
    return out


def relative_error(analytic: dict, numeric: dict) -> float:
    """Global ||a - n|| / max(||a|| + ||n||, tiny) over all shared keys."""
    keys = sorted(numeric)
    a = np.concatenate([np.ravel(analytic.get(k, np.zeros_like(numeric[k]))) for k in keys])
    n = np.concatenate([np.ravel(numeric[k]) for k in keys])
    denom = max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def flatten(params: dict) -> np.ndarray:
    return np.concatenate([np.ravel(params[k]) for k in sorted(params)])
