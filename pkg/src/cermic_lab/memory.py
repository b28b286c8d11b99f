"""Peer-intention memory.

Perception (shared by all agents and only trained offline):
  * detector: obs -> presence probability per agent id
  * node encoder: obs -> one embedding per agent id, with a linear readout to
    that agent's true latent (normalized position, last-action one-hot)
  * edge encoder: obs -> offset of every agent id relative to the observer

Online (per agent, trained with the curiosity objective):
  * message passing over the graph built from the above, pooled into the
    context vector ``f``
  * a gated recurrent alternative that ignores the graph
"""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .nets import GRUCell, Linear, TanhMLP, gd_step, sigmoid

EDGE_DIM = 4


@dataclass(frozen=True)
class MemoryConfig:
    n_agents: int
    obs_dim: int
    d_node: int = 16
    d_f: int = 16
    rounds: int = 2
    queue: int = 8
    tau_det: float = 0.5
    hidden: int = 32
    latent_dim: int = 7
    offset_scale: float = 2.0

    @property
    def d_edge(self) -> int:
        return EDGE_DIM


# ---------------------------------------------------------------- perception

class Perception:
    def __init__(self, cfg: MemoryConfig):
        self.cfg = cfg
        N = cfg.n_agents
        self.det = TanhMLP("det", cfg.obs_dim, cfg.hidden, N)
        self.node = TanhMLP("node", cfg.obs_dim, cfg.hidden, N * cfg.d_node)
        self.read = Linear("node_read", cfg.d_node, cfg.latent_dim)
        self.edge = TanhMLP("edge", cfg.obs_dim, cfg.hidden, N * 2)

    def init(self, rng) -> dict:
        params: dict = {}
        self.det.init(rng, params)
        self.node.init(rng, params)
        self.read.init(rng, params)
        self.edge.init(rng, params)
        return params

    def forward(self, params, obs):
        """Returns (probs (B, N), node feats (B, N, d_node), offsets (B, N, 2), cache)."""
        obs = np.atleast_2d(obs)
        if obs.shape[-1] != self.cfg.obs_dim:
            raise ValueError(f"observation dimension {obs.shape[-1]} does not match {self.cfg.obs_dim}")
        B, N = obs.shape[0], self.cfg.n_agents
        logits, c_det = self.det.forward(params, obs)
        zn, c_node = self.node.forward(params, obs)
        off, c_edge = self.edge.forward(params, obs)
        return (sigmoid(logits), zn.reshape(B, N, self.cfg.d_node), off.reshape(B, N, 2),
                (logits, c_det, c_node, c_edge))

    def loss(self, params, obs, labels, latents, offsets, observer):
        """Pretraining objective and gradients.

        labels (B, N) presence, latents (B, N, latent_dim) true latents,
        offsets (B, N, 2) true offsets, observer (B,) observer ids. Edge loss
        is averaged over visible peers.
        """
        B, N = labels.shape
        probs, zn, off, (logits, c_det, c_node, c_edge) = self.forward(params, obs)
        grads: dict = {}
        # detector: binary cross-entropy from logits, summed over ids
        det = float(np.mean(np.sum(np.logaddexp(0.0, logits) - labels * logits, axis=1)))
        self.det.backward(params, c_det, (probs - labels) / B, grads)
        # node: gated squared error of the readout
        pred = self.read.forward(params, zn)
        diff = pred - latents
        nl = float(np.mean(np.sum(labels * np.sum(diff**2, axis=-1), axis=1)))
        dpred = 2.0 * labels[..., None] * diff / B
        dzn = self.read.backward(params, zn, dpred, grads)
        self.node.backward(params, c_node, dzn.reshape(B, -1), grads)
        # edge: squared error on visible peers
        peer = labels.copy()
        peer[np.arange(B), observer] = 0.0
        count = max(float(peer.sum()), 1.0)
        ediff = off - offsets
        el = float(np.sum(peer[..., None] * ediff**2) / (2.0 * count))
        doff = peer[..., None] * ediff / count
        self.edge.backward(params, c_edge, doff.reshape(B, -1), grads)
        return det + nl + el, {"detector": det, "node": nl, "edge": el}, grads


@dataclass(frozen=True)
class DetectorOutput:
    p: np.ndarray
    tau: float = 0.5

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if np.any((p < 0) | (p > 1)):
            raise ValueError("probabilities must lie in [0, 1]")
        object.__setattr__(self, "p", p)

    def detected(self) -> np.ndarray:
        return self.p >= self.tau


def detect_agents(perception: Perception, params, obs) -> DetectorOutput:
    probs, _, _, _ = perception.forward(params, obs)
    return DetectorOutput(probs[0] if np.ndim(obs) == 1 else probs, perception.cfg.tau_det)


def detector_loss(p, y, clip: float = 1e-7) -> float:
    p = np.asarray(p.p if isinstance(p, DetectorOutput) else p, dtype=float)
    y = np.asarray(y, dtype=float)
    if p.shape != y.shape:
        raise ValueError("probabilities and labels differ in length")
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    p = np.clip(p, clip, 1.0 - clip)
    return float(-np.sum(y * np.log(p) + (1 - y) * np.log1p(-p)))


def node_loss(pred, true, gates) -> float:
    pred, true = np.asarray(pred, dtype=float), np.asarray(true, dtype=float)
    gates = np.asarray(gates, dtype=float)
    if pred.shape != true.shape or gates.shape != pred.shape[:-1]:
        raise ValueError("prediction, target and gate shapes disagree")
    return float(np.sum(gates * np.sum((pred - true) ** 2, axis=-1)))


def edge_loss(pred, true) -> float:
    pred, true = np.asarray(pred, dtype=float), np.asarray(true, dtype=float)
    if pred.shape != true.shape or pred.shape[-1] != 2:
        raise ValueError("edge predictions and targets must both be (..., 2)")
    return float(np.mean((pred - true) ** 2))


# ---------------------------------------------------------------- graph + queue

@dataclass
class IntentionGraph:
    ids: tuple
    nodes: np.ndarray      # (n, d_node)
    offsets: np.ndarray    # (n, 2) relative to the observer
    step: int = 0

    @property
    def edges(self) -> np.ndarray:
        return edge_features(self.offsets)

    def index(self, agent_id: int) -> int | None:
        return self.ids.index(agent_id) if agent_id in self.ids else None


def edge_features(offsets, scale: float = 1.0) -> np.ndarray:
    """e_ij = [d, |d|, 1] with d = offset_j - offset_i; position part is antisymmetric."""
    offsets = np.asarray(offsets, dtype=float) / scale
    d = offsets[..., None, :, :] - offsets[..., :, None, :]
    dist = np.sqrt(np.sum(d * d, axis=-1, keepdims=True))
    return np.concatenate([d, dist, np.ones_like(dist)], axis=-1)


class MemoryQueue(deque):
    def __init__(self, capacity: int = 8):
        super().__init__(maxlen=capacity)


def attend(query: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Single-head scaled dot-product attention; values are the keys themselves."""
    scores = keys @ query / np.sqrt(query.size)
    w = np.exp(scores - scores.max())
    w /= w.sum()
    return w @ keys


def update_graph(queue: MemoryQueue, self_id: int, node_feats, offsets, detections: DetectorOutput
                 ) -> IntentionGraph | None:
    """Advance the memory by one observation.

    node_feats (N, d_node) and offsets (N, 2) are this step's perception
    outputs. Returns the current graph, or None while nothing was ever
    detected and the queue is empty.
    """
    node_feats = np.asarray(node_feats, dtype=float)
    peers = [j for j in np.flatnonzero(detections.detected()) if j != self_id]

    def blended(j):
        hist = [g.nodes[g.index(j)] for g in queue if j in g.ids]
        return attend(node_feats[j], np.array(hist + [node_feats[j]]))

    if not peers:
        if not queue:
            return None
        last = queue[-1]
        nodes = last.nodes.copy()
        k = last.index(self_id)
        nodes[k] = blended(self_id)
        return IntentionGraph(last.ids, nodes, last.offsets.copy(), last.step)
    ids = tuple(sorted([self_id] + [int(j) for j in peers]))
    nodes = np.array([blended(j) for j in ids])
    offs = np.array([np.zeros(2) if j == self_id else np.asarray(offsets[j], dtype=float) for j in ids])
    step = queue[-1].step + 1 if queue else 1
    graph = IntentionGraph(ids, nodes, offs, step)
    queue.append(graph)
    return graph


def pad_graph(graph: IntentionGraph | None, n_agents: int, d_node: int):
    """Dense (nodes, mask, offsets) arrays indexed by agent id."""
    nodes = np.zeros((n_agents, d_node))
    mask = np.zeros(n_agents)
    offs = np.zeros((n_agents, 2))
    if graph is not None:
        idx = list(graph.ids)
        nodes[idx] = graph.nodes
        mask[idx] = 1.0
        offs[idx] = graph.offsets
    return nodes, mask, offs


# ---------------------------------------------------------------- message passing

class MessagePassing:
    """L rounds of h_i <- tanh(W [h_i, mean_j h_j, mean_j e_ij]) then a pooled linear readout.

    Works on padded batches: nodes (..., N, D), mask (..., N), edges (..., N, N, E).
    A leading agent axis on the weights is supported as for :mod:`nets`.
    """

    def __init__(self, cfg: MemoryConfig, name: str = "mp"):
        self.cfg, self.name = cfg, name
        D, E = cfg.d_node, cfg.d_edge
        self.layers = [Linear(f"{name}.round{l}", 2 * D + E, D, bias=False) for l in range(cfg.rounds)]
        self.out = Linear(f"{name}.out", D, cfg.d_f, bias=False)

    def init(self, rng, params: dict, agents: int | None = None) -> None:
        for layer in self.layers:
            layer.init(rng, params, agents=agents)
        self.out.init(rng, params, agents=agents)

    def forward(self, params, nodes, mask, edges):
        mask = np.asarray(mask, dtype=float)
        N = mask.shape[-1]
        adj = mask[..., :, None] * mask[..., None, :] * (1.0 - np.eye(N))
        deg = adj.sum(axis=-1, keepdims=True)
        wn = adj / np.maximum(deg, 1.0)
        msg_e = np.einsum("...ij,...ijk->...ik", wn, edges)
        h = nodes * mask[..., None]
        caches = []
        for layer in self.layers:
            x = np.concatenate([h, wn @ h, msg_e], axis=-1)
            h = np.tanh(layer.forward(params, x)) * mask[..., None]
            caches.append((x, h))
        count = np.maximum(mask.sum(axis=-1, keepdims=True), 1.0)
        pooled = h.sum(axis=-2) / count
        f = self.out.forward(params, pooled)
        return f, (mask, wn, count, pooled, caches)

    def backward(self, params, cache, df, grads):
        """Accumulates parameter gradients; returns the gradient w.r.t. the input nodes."""
        mask, wn, count, pooled, caches = cache
        D = self.cfg.d_node
        dpooled = self.out.backward(params, pooled, df, grads)
        dh = np.repeat((dpooled / count)[..., None, :], mask.shape[-1], axis=-2) * mask[..., None]
        for layer, (x, h) in zip(reversed(self.layers), reversed(caches)):
            da = dh * (1.0 - h * h) * mask[..., None]
            dx = layer.backward(params, x, da, grads)
            dh = (dx[..., :D] + np.swapaxes(wn, -1, -2) @ dx[..., D:2 * D]) * mask[..., None]
        return dh


def context_feature(graph: IntentionGraph, mp: MessagePassing, params) -> np.ndarray:
    if graph is None or len(graph.ids) == 0:
        raise ValueError("graph has no nodes")
    mask = np.ones(len(graph.ids))
    f, _ = mp.forward(params, graph.nodes, mask, edge_features(graph.offsets, mp.cfg.offset_scale))
    return f


# ---------------------------------------------------------------- recurrent variant

class RecurrentMemory:
    def __init__(self, cfg: MemoryConfig, name: str = "gru"):
        self.cfg = cfg
        self.cell = GRUCell(name, cfg.obs_dim, cfg.d_f)

    def init(self, rng, params: dict, agents: int | None = None, zero_gates: bool = False) -> None:
        self.cell.init(rng, params, zero_gates=zero_gates, agents=agents)

    def step(self, params, hidden, obs):
        h_new, _ = self.cell.forward(params, obs, hidden)
        return h_new, h_new


def recurrent_memory_variant(memory: RecurrentMemory, params, hidden, obs):
    return memory.step(params, hidden, obs)


# ---------------------------------------------------------------- episode batching

@dataclass
class EpisodeGraphs:
    """Padded per-step graphs for one agent over an episode."""

    nodes: np.ndarray   # (T, N, D)
    mask: np.ndarray    # (T, N)
    edges: np.ndarray   # (T, N, N, E)
    valid: np.ndarray   # (T,) False while in cold start
    steps: np.ndarray   # (T,) graph step index


def build_episode_graphs(perception: Perception, perc_params, obs, self_id: int) -> EpisodeGraphs:
    cfg = perception.cfg
    probs, zn, off, _ = perception.forward(perc_params, obs)
    T, N = probs.shape
    queue = MemoryQueue(cfg.queue)
    nodes = np.zeros((T, N, cfg.d_node))
    mask = np.zeros((T, N))
    offs = np.zeros((T, N, 2))
    valid = np.zeros(T, dtype=bool)
    steps = np.zeros(T, dtype=int)
    for t in range(T):
        g = update_graph(queue, self_id, zn[t], off[t], DetectorOutput(probs[t], cfg.tau_det))
        if g is not None:
            nodes[t], mask[t], offs[t] = pad_graph(g, N, cfg.d_node)
            valid[t] = True
            steps[t] = g.step
    return EpisodeGraphs(nodes, mask, edge_features(offs, cfg.offset_scale), valid, steps)


# ---------------------------------------------------------------- pretraining corpus

@dataclass
class Corpus:
    obs: np.ndarray
    observer: np.ndarray
    labels: np.ndarray
    latents: np.ndarray
    offsets: np.ndarray

    def __len__(self):
        return self.obs.shape[0]

    def split(self, frac: float = 0.8):
        k = int(len(self) * frac)
        a = Corpus(self.obs[:k], self.observer[:k], self.labels[:k], self.latents[:k], self.offsets[:k])
        b = Corpus(self.obs[k:], self.observer[k:], self.labels[k:], self.latents[k:], self.offsets[k:])
        return a, b

    def to_csv(self, path) -> None:
        """One row per observation: obs_*, observer, label_*, latent_<agent>_<k>, rel_<agent>_{x,y}."""
        N, L = self.labels.shape[1], self.latents.shape[2]
        head = [f"obs_{i}" for i in range(self.obs.shape[1])] + ["observer"]
        head += [f"label_{j}" for j in range(N)]
        head += [f"latent_{j}_{k}" for j in range(N) for k in range(L)]
        head += [f"rel_{j}_{ax}" for j in range(N) for ax in ("x", "y")]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(head)
            for i in range(len(self)):
                row = [f"{v:.17g}" for v in self.obs[i]] + [str(int(self.observer[i]))]
                row += [f"{v:.17g}" for v in self.labels[i]]
                row += [f"{v:.17g}" for v in self.latents[i].ravel()]
                row += [f"{v:.17g}" for v in self.offsets[i].ravel()]
                w.writerow(row)


def generate_corpus(world, n_obs: int, rng) -> Corpus:
    """Random-walk rollouts from random starts, every agent's view labeled by the simulator."""
    obs, observer, labels, latents, offsets = [], [], [], [], []
    from .gridworld import N_ACTIONS
    while len(obs) < n_obs:
        state, o = world.reset(int(rng.integers(0, 2**31)))
        while True:
            lab, lat, off = world.oracle_labels(state)
            for i in range(o.shape[0]):
                obs.append(o[i])
                observer.append(i)
                labels.append(lab[i])
                latents.append(lat)
                offsets.append(off[i])
            if state.done or len(obs) >= n_obs:
                break
            state, o, _, _ = world.step(state, rng.integers(0, N_ACTIONS, o.shape[0]))
    k = n_obs
    return Corpus(np.array(obs[:k]), np.array(observer[:k]), np.array(labels[:k]),
                  np.array(latents[:k]), np.array(offsets[:k]))


@dataclass
class PretrainResult:
    params: dict
    history: list = field(default_factory=list)
    heldout: dict = field(default_factory=dict)


def pretrain_perception(perception: Perception, params, train: Corpus, heldout: Corpus, epochs: int,
                        rng, lr: float = 0.3, batch: int = 64, clip: float = 5.0) -> PretrainResult:
    params = {k: v.copy() for k, v in params.items()}
    history = []
    n = len(train)
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch):
            idx = order[s:s + batch]
            _, parts, grads = perception.loss(params, train.obs[idx], train.labels[idx], train.latents[idx],
                                              train.offsets[idx], train.observer[idx])
            gd_step(params, grads, lr, clip)
        _, parts, _ = perception.loss(params, heldout.obs, heldout.labels, heldout.latents,
                                      heldout.offsets, heldout.observer)
        history.append(parts)
    if history:
        held = history[-1]
    else:
        _, held, _ = perception.loss(params, heldout.obs, heldout.labels, heldout.latents,
                                     heldout.offsets, heldout.observer)
    return PretrainResult(params, history, held)
