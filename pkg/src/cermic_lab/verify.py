"""Property suites behind ``cermic-lab verify``; each writes one CSV report."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Batch, CermicConfig, CermicModel
from .linear_mdp import (
    kl_posterior_update,
    kl_posterior_update_dense,
    random_instances,
    verify_theorem1,
)
from .memory import EpisodeGraphs, MemoryConfig, MessagePassing, Perception, edge_features
from .mi import (
    BilinearCritic,
    CalibrationHead,
    DiscreteJoint,
    candidate_set,
    exact_mi_discrete,
    fit_discrete_critic,
    optimal_critic_lower,
    pointwise_lower,
    pointwise_upper,
)
from .nets import GRUCell, finite_difference, relative_error
from .robust import AmbiguityParams, beta_from, cantelli_extreme, worst_case_prob
from .rng import stream

SUITES = ("theorem1", "kron_kl", "robust", "infonce", "gradients")


@dataclass
class SuiteResult:
    name: str
    passed: bool
    header: list
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    seconds: float = 0.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header)
            for row in self.rows:
                w.writerow([_cell(v) for v in row])

    def line(self) -> str:
        info = ", ".join(f"{k}={_cell(v)}" for k, v in self.summary.items())
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {info}"


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


# ---------------------------------------------------------------- linear oracle

def suite_theorem1(seed: int = 0, n: int = 1000, tolerance: float = 1e-9) -> SuiteResult:
    report = verify_theorem1(random_instances(stream(seed, "theorem1"), n), tolerance)
    rows = [list(r) for r in report.rows]
    return SuiteResult("theorem1", report.violations == 0,
                       ["instance_id", "q", "r_exact", "r_ucb", "lower_slack", "upper_slack"], rows,
                       {"instances": report.count, "violations": report.violations,
                        "max_q": max(r[1] for r in rows)})


def suite_kron_kl(seed: int = 0, n: int = 500, tolerance: float = 1e-8) -> SuiteResult:
    rows = []
    worst = 0.0
    for i, inst in enumerate(random_instances(stream(seed, "kron_kl"), n)):
        closed = kl_posterior_update(inst.post, inst.eta)
        drop, expected = kl_posterior_update_dense(inst.post, inst.eta)
        diff = max(abs(closed - drop), abs(closed - expected))
        worst = max(worst, diff)
        rows.append([i, inst.post.d, inst.post.c, closed, drop, expected, diff])
    return SuiteResult("kron_kl", worst <= tolerance,
                       ["instance_id", "d", "c", "closed_form", "entropy_drop", "expected_kl", "max_abs_diff"],
                       rows, {"instances": n, "max_abs_diff": worst})


# ---------------------------------------------------------------- robust constraint

def _feasible_sampler(family: str, mean: float, var: float, rng):
    sd = np.sqrt(var)
    if family == "normal":
        return lambda n: rng.normal(mean, sd, n)
    if family == "uniform":
        h = sd * np.sqrt(3.0)
        return lambda n: rng.uniform(mean - h, mean + h, n)
    if family == "laplace":
        return lambda n: rng.laplace(mean, sd / np.sqrt(2.0), n)
    if family == "skewed":
        # two-point with mass 0.9 / 0.1, shifted and scaled to (mean, var)
        a, b, p = -1.0 / 3.0, 3.0, 0.9
        return lambda n: mean + sd * np.where(rng.random(n) < p, a, b)
    raise ValueError(family)


def suite_robust(seed: int = 0, n_dist: int = 50, draws: int = 1_000_000, n_tight: int = 20,
                 tolerance: float = 1e-6) -> SuiteResult:
    rows = []
    ok = True
    # hand-computed branch values
    for eps, expected in ((0.5, 2.0), (0.25, float(np.sqrt(8.0))), (0.2, float(np.sqrt(10.0)))):
        beta = beta_from(AmbiguityParams(1.0, 2.0, eps))
        ok &= beta == expected
        rows.append(["beta", f"gamma1=1;gamma2=2;eps={eps}", beta, expected, beta - expected])

    # empirical violation rates for moment-feasible distributions with a zero upper hinge
    rng = stream(seed, "robust-chance")
    amb = AmbiguityParams()
    beta = beta_from(amb)
    families = ("normal", "uniform", "laplace", "skewed", "extreme")
    se = np.sqrt(amb.epsilon * (1 - amb.epsilon) / draws)
    bound = amb.epsilon + 4.0 * se
    for i in range(n_dist):
        sigma2 = float(rng.uniform(0.1, 2.0))
        mu = amb.c_upper - beta * np.sqrt(sigma2) - float(rng.uniform(0.0, 0.5)) * (i % 2)
        fam = families[i % len(families)]
        if fam == "extreme":
            dist = cantelli_extreme(mu, sigma2, amb.c_upper, amb.gamma1, amb.gamma2)
            sample = lambda n, d=dist: d.sample(rng, n)
            desc_mean, desc_var = dist.mean, dist.var
        else:
            shift = float(rng.uniform(-1, 1)) * np.sqrt(amb.gamma1 * sigma2)
            var = float(rng.uniform(0.05, 1.0)) * (amb.gamma2 * sigma2 - shift**2)
            sample = _feasible_sampler(fam, mu + shift, var, rng)
            desc_mean, desc_var = mu + shift, var
        x = sample(draws)
        p_exceed = float(np.mean(x > amb.c_upper))
        ok &= p_exceed <= bound
        rows.append(["chance", f"family={fam};mu={mu:.6g};sigma2={sigma2:.6g};mean={desc_mean:.6g};var={desc_var:.6g}",
                     p_exceed, bound, bound - p_exceed])

    # two-point extremes attain the worst-case probability
    rng = stream(seed, "robust-tight")
    worst_tight = 0.0
    for i in range(n_tight):
        g1 = float(rng.uniform(0.2, 2.0))
        g2 = g1 + float(rng.uniform(0.1, 3.0))
        sigma2 = float(rng.uniform(0.1, 3.0))
        # alternate between the two feasible branches
        lo, hi = np.sqrt(g1), g2 / np.sqrt(g1)
        k = float(rng.uniform(lo, hi)) if i % 2 == 0 else float(rng.uniform(hi, hi + 3.0))
        mu = 0.0
        c_up = mu + k * np.sqrt(sigma2)
        dist = cantelli_extreme(mu, sigma2, c_up, g1, g2)
        p = dist.prob_le(c_up)
        oracle = worst_case_prob(c_up - mu, sigma2, g1, g2)
        d = abs(p - oracle)
        worst_tight = max(worst_tight, d)
        rows.append(["tightness", f"gamma1={g1:.6g};gamma2={g2:.6g};sigma2={sigma2:.6g};k={k:.6g}", p, oracle, p - oracle])
    ok &= worst_tight <= tolerance
    return SuiteResult("robust", bool(ok), ["branch", "input", "value", "oracle", "delta"], rows,
                       {"distributions": n_dist, "draws": draws, "chance_bound": bound,
                        "max_tightness_delta": worst_tight})


# ---------------------------------------------------------------- contrastive MI

def discrete_joints(rng, count: int = 20) -> list:
    joints = [DiscreteJoint(np.array([[0.5, 0.0], [0.0, 0.5]])),
              DiscreteJoint(np.array([[0.4, 0.1], [0.1, 0.4]])),
              DiscreteJoint(np.full((2, 3), 1 / 6))]
    while len(joints) < count:
        nz, nf = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        t = rng.dirichlet(np.full(nz * nf, 0.5)).reshape(nz, nf)
        t = t / t.sum()
        joints.append(DiscreteJoint(t))
    return joints


def suite_infonce(seed: int = 0, n_joints: int = 20, n_neg: int = 16, steps: int = 600,
                  eval_pairs: int = 20000, band: float = 4.0) -> SuiteResult:
    rng = stream(seed, "infonce")
    rows = []
    ok = True
    for i, joint in enumerate(discrete_joints(rng, n_joints)):
        critic = fit_discrete_critic(joint, rng, n_neg=n_neg, steps=steps)
        nz, nf = joint.table.shape
        zi, fi = joint.sample(rng, eval_pairs)
        neg = joint.sample_marginal_f(rng, (eval_pairs, n_neg))
        ez, ef = np.eye(nz), np.eye(nf)
        lo = pointwise_lower(critic, ez[zi], ef[fi], ef[neg]) + np.log(n_neg)
        up = pointwise_upper(critic, ez[zi], ef[fi], ef[neg])
        mi = exact_mi_discrete(joint)
        lo_mean, lo_se = float(lo.mean()), float(lo.std(ddof=1) / np.sqrt(eval_pairs))
        up_mean, up_se = float(up.mean()), float(up.std(ddof=1) / np.sqrt(eval_pairs))
        lower_ok = lo_mean <= mi + band * lo_se
        upper_ok = up_mean >= mi - band * up_se
        ok &= lower_ok and upper_ok
        rows.append([i, nz, nf, mi, optimal_critic_lower(joint, n_neg), lo_mean, lo_se, up_mean, up_se,
                     lower_ok, upper_ok])
    return SuiteResult("infonce", bool(ok),
                       ["joint_id", "nz", "nf", "exact_mi", "optimal_lower", "lower", "lower_se", "upper",
                        "upper_se", "lower_ok", "upper_ok"], rows,
                       {"joints": n_joints, "negatives": n_neg,
                        "lower_violations": sum(not r[9] for r in rows),
                        "upper_violations": sum(not r[10] for r in rows)})


# ---------------------------------------------------------------- gradients

def _perturb(params, rng, scale=0.3):
    for k in params:
        params[k] = params[k] + scale * rng.normal(size=params[k].shape)


def grad_case_cermic(rng, memory: str, agents: int = 2, T: int = 3):
    O, N = 6, 3
    cfg = CermicConfig(obs_dim=O, n_actions=3, n_agents=N, d_state=3, d_latent=2, hidden=4, d_f=3,
                       d_node=3, h_hidden=3, samples=2, memory=memory, init_logvar=0.3)
    model = CermicModel(cfg)
    params = model.init(rng, agents)
    _perturb(params, rng)
    A = agents
    obs, obs_next = rng.normal(size=(A, T, O)), rng.normal(size=(A, T, O))
    act = rng.integers(0, 3, (A, T))
    if memory == "graph":
        mask = (rng.random((A, T, N)) < 0.7).astype(float)
        mask[..., 0] = 1.0
        ctx = EpisodeGraphs(rng.normal(size=(A, T, N, 3)), mask, edge_features(rng.normal(size=(A, T, N, 2))),
                            np.ones((A, T), bool), np.ones((A, T), int))
    else:
        ctx = (rng.normal(size=(A, T, O)), 0.5 * rng.normal(size=(A, T, 3)), np.ones((A, T), bool))
    batch = Batch(obs, act, obs_next, rng.uniform(0, 5, (A, T)), rng.uniform(0, 5, (A, T)), ctx,
                  rng.normal(size=(A, T, 2, 2)))
    mean, var = rng.normal(size=A), rng.uniform(0.5, 2.0, size=A)
    _, _, grads = model.loss(params, batch, mean, var)
    keys = model.trainable(params)
    num = finite_difference(lambda: float(model.loss(params, batch, mean, var, need_grad=False)[0].sum()),
                            params, keys)
    return relative_error(grads, num)


def grad_case_calibration(rng):
    df, hidden, B = int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
    head = CalibrationHead("h", df, hidden)
    params: dict = {}
    head.init(rng, params, out_scale=1.0)
    gamma, f, mu = rng.uniform(0, 5, B), rng.normal(size=(B, df)), rng.normal(size=B)
    w = rng.normal(size=B)
    out, cache = head.forward(params, gamma, f, mu)
    grads: dict = {}
    dfeat = head.backward(params, cache, w, grads)
    num = finite_difference(lambda: float(w @ head.forward(params, gamma, f, mu)[0]), params)
    fbox = {"f": f}
    num_f = finite_difference(lambda: float(w @ head.forward(params, gamma, fbox["f"], mu)[0]), fbox)
    grads["f"] = dfeat
    num.update(num_f)
    return relative_error(grads, num)


def grad_case_critic(rng):
    dz, df, B, N = int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.integers(1, 6))
    critic = BilinearCritic(rng.normal(size=(dz, df)))
    z, pos, neg = rng.normal(size=(B, dz)), rng.normal(size=(B, df)), rng.normal(size=(B, N, df))
    cands = candidate_set(pos, neg)
    _, g = critic.loss_and_grad(z, cands)
    box = {"B": critic.B}
    num = finite_difference(lambda: critic.loss_and_grad(z, cands)[0], box)
    return relative_error({"B": g}, num)


def grad_case_perception(rng):
    N, O = 3, int(rng.integers(3, 7))
    cfg = MemoryConfig(n_agents=N, obs_dim=O, d_node=2, hidden=3, latent_dim=2)
    per = Perception(cfg)
    params = per.init(rng)
    _perturb(params, rng)
    B = int(rng.integers(1, 5))
    obs = rng.normal(size=(B, O))
    labels = (rng.random((B, N)) < 0.6).astype(float)
    latents, offsets = rng.normal(size=(B, N, 2)), rng.normal(size=(B, N, 2))
    observer = rng.integers(0, N, B)
    _, _, grads = per.loss(params, obs, labels, latents, offsets, observer)
    num = finite_difference(lambda: per.loss(params, obs, labels, latents, offsets, observer)[0], params)
    return relative_error(grads, num)


def grad_case_message_passing(rng):
    N = int(rng.integers(2, 5))
    cfg = MemoryConfig(n_agents=N, obs_dim=4, d_node=3, d_f=2, rounds=int(rng.integers(1, 3)))
    mp = MessagePassing(cfg)
    params: dict = {}
    mp.init(rng, params)
    B = int(rng.integers(1, 4))
    nodes = rng.normal(size=(B, N, 3))
    mask = (rng.random((B, N)) < 0.7).astype(float)
    mask[:, 0] = 1.0
    edges = edge_features(rng.normal(size=(B, N, 2)))
    w = rng.normal(size=(B, 2))
    f, cache = mp.forward(params, nodes, mask, edges)
    grads: dict = {}
    grads["nodes"] = mp.backward(params, cache, w, grads)
    box = dict(params)
    box["nodes"] = nodes
    num = finite_difference(lambda: float(np.sum(w * mp.forward(box, box["nodes"], mask, edges)[0])), box)
    return relative_error(grads, num)


def grad_case_gru(rng):
    n_in, H, B = int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 4))
    cell = GRUCell("gru", n_in, H)
    params: dict = {}
    cell.init(rng, params)
    _perturb(params, rng)
    box = dict(params)
    box["x"], box["h"] = rng.normal(size=(B, n_in)), rng.normal(size=(B, H))
    w = rng.normal(size=(B, H))
    out, cache = cell.forward(box, box["x"], box["h"])
    grads: dict = {}
    grads["x"], grads["h"] = cell.backward(box, cache, w, grads)
    num = finite_difference(lambda: float(np.sum(w * cell.forward(box, box["x"], box["h"])[0])), box)
    return relative_error(grads, num)


GRADIENT_CASES = {
    "cermic_core": lambda rng, i: grad_case_cermic(rng, "graph" if i % 2 == 0 else "recurrent", 1 + i % 2),
    "mi_calibration": lambda rng, i: grad_case_calibration(rng) if i % 2 == 0 else grad_case_critic(rng),
    "intention_memory": lambda rng, i: (grad_case_perception, grad_case_message_passing, grad_case_gru)[i % 3](rng),
}


def suite_gradients(seed: int = 0, n: int = 100, tolerance: float = 1e-4) -> SuiteResult:
    rows = []
    worst = {}
    for module, case in GRADIENT_CASES.items():
        rng = stream(seed, "gradients-" + module)
        for i in range(n):
            err = case(rng, i)
            rows.append([module, i, err])
            worst[module] = max(worst.get(module, 0.0), err)
    ok = all(v <= tolerance for v in worst.values())
    return SuiteResult("gradients", ok, ["module", "instance", "rel_error"], rows,
                       {f"max_{k}": v for k, v in worst.items()})


RUNNERS = {
    "theorem1": suite_theorem1,
    "kron_kl": suite_kron_kl,
    "robust": suite_robust,
    "infonce": suite_infonce,
    "gradients": suite_gradients,
}


def run_suites(names, out_dir=None, seed: int = 0) -> list:
    """Run the named suites (``all`` expands); writes ``<suite>.csv`` under ``out_dir`` if given."""
    names = list(SUITES) if "all" in names else list(names)
    unknown = [n for n in names if n not in RUNNERS]
    if unknown:
        raise KeyError(f"unknown suite(s): {', '.join(unknown)}; choose from {', '.join(SUITES)} or all")
    results = []
    for name in names:
        t0 = time.perf_counter()
        res = RUNNERS[name](seed=seed)
        res.seconds = time.perf_counter() - t0
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            res.write_csv(Path(out_dir) / f"{name}.csv")
        results.append(res)
    return results
