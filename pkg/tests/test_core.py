import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, strategies as st

from cermic_lab.core import (
    Batch,
    CermicConfig,
    CermicModel,
    combine_rewards,
    explore_loss,
    intrinsic_reward_approx,
    kl_to_standard,
    momentum_update,
    psi_variance,
    squash_logvar,
    total_loss,
    unit_rows,
    unsquash_logvar,
)
from cermic_lab.numerics import DiagGaussian
from cermic_lab.robust import AmbiguityParams, psi_moments
from cermic_lab.verify import grad_case_cermic

O, A_N = 5, 3


def small_model(**kw):
    base = dict(obs_dim=O, n_actions=A_N, n_agents=3, d_state=4, d_latent=2, hidden=6, d_f=3, d_node=3,
                h_hidden=3, samples=3, memory="recurrent")
    base.update(kw)
    return CermicModel(CermicConfig(**base))


def small_batch(model, rng, A=2, T=3):
    c = model.cfg
    ctx = (rng.normal(size=(A, T, O)), rng.normal(size=(A, T, c.d_f)), np.ones((A, T), bool))
    return Batch(rng.normal(size=(A, T, O)), rng.integers(0, A_N, (A, T)), rng.normal(size=(A, T, O)),
                 rng.uniform(0, 2, (A, T)), rng.uniform(0, 2, (A, T)), ctx,
                 rng.normal(size=(A, T, c.samples, c.d_latent)))


def test_momentum_arithmetic():
    p = {"enc.w": np.array([1.0]), "enc_m.w": np.array([0.0])}
    momentum_update(p, 0.9)
    assert p["enc_m.w"][0] == pytest.approx(0.1, abs=1e-15)
    q = {"enc.w": np.array([2.0]), "enc_m.w": np.array([2.0])}
    momentum_update(q, 0.9)
    assert q["enc_m.w"][0] == 2.0
    with pytest.raises(ValueError):
        momentum_update(p, 1.5)


def test_momentum_geometric_convergence():
    p = {"enc.w": np.array([1.0]), "enc_m.w": np.array([0.0])}
    for k in range(1, 30):
        momentum_update(p, 0.8)
        assert p["enc_m.w"][0] == pytest.approx(1 - 0.8 ** k, abs=1e-14)


def test_intrinsic_reward_approx_values():
    assert intrinsic_reward_approx(np.zeros(3), np.ones(3)) == 0.0
    assert intrinsic_reward_approx([1.0], [1.0]) == pytest.approx(0.70711, abs=5e-6)


@given(st.integers(0, 2**31))
def test_kl_and_variance_match_log_ratio_moments(seed):
    r = np.random.default_rng(seed)
    m, lv = r.normal(size=4), r.normal(size=4)
    mom = psi_moments(DiagGaussian(m, np.exp(lv)))
    assert kl_to_standard(m, lv) == pytest.approx(mom.mu, rel=1e-12, abs=1e-12)
    assert psi_variance(m, lv) == pytest.approx(mom.sigma2, rel=1e-12, abs=1e-12)


def test_combine_rewards():
    assert combine_rewards(1.0, 7.0, 0.0) == 1.0
    assert combine_rewards(0.0, 0.5, 1.0) == 0.5
    with pytest.raises(ValueError):
        combine_rewards(0.0, 0.5, -1.0)


@given(st.floats(-9.2, 9.2))
def test_logvar_squash_round_trip(lv):
    assert squash_logvar(unsquash_logvar(lv))[0] == pytest.approx(lv, abs=1e-9)


def test_logvar_outside_range_rejected():
    with pytest.raises(ValueError):
        unsquash_logvar(10.0)


def test_unit_rows(rng):
    x = rng.normal(size=(4, 3))
    np.testing.assert_allclose(np.linalg.norm(unit_rows(x), axis=-1), 1.0, atol=1e-15)
    assert np.all(unit_rows(np.zeros((2, 3))) == 0.0)


def _exact_decoder(model, params, target):
    # encoder and decoder collapse to constants: the decoder predicts ``target`` with unit variance
    c = model.cfg
    for k in params:
        if k.startswith(("dec.", "enc_m.")):
            params[k] = np.zeros_like(params[k])
    params["enc_m.l2.b"][:] = target
    params["dec.l2.b"][:, :c.d_state] = target
    params["dec.l2.b"][:, c.d_state:] = unsquash_logvar(0.0)


def test_explore_loss_at_exact_prediction(rng):
    model = small_model()
    params = model.init(rng, 2)
    _exact_decoder(model, params, rng.normal(size=model.cfg.d_state))
    batch = small_batch(model, rng)
    np.testing.assert_allclose(explore_loss(model, params, batch), -0.5 * np.log(2 * np.pi), atol=1e-9)
    assert -0.5 * np.log(2 * np.pi) == pytest.approx(-0.91894, abs=5e-6)


def test_explore_loss_invariant_to_duplication(rng):
    model = small_model()
    params = model.init(rng, 2)
    b = small_batch(model, rng)
    dup = Batch(*(np.concatenate([x, x], axis=1) for x in (b.obs, b.act, b.obs_next, b.gamma_lo, b.gamma_hi)),
                tuple(np.concatenate([x, x], axis=1) for x in b.context), np.concatenate([b.eps, b.eps], axis=1))
    np.testing.assert_allclose(explore_loss(model, params, dup), explore_loss(model, params, b), atol=1e-13)
    with pytest.raises(ValueError):
        empty = Batch(b.obs[:, :0], b.act[:, :0], b.obs_next[:, :0], b.gamma_lo[:, :0], b.gamma_hi[:, :0],
                      tuple(x[:, :0] for x in b.context), b.eps[:, :0])
        explore_loss(model, params, empty)


def test_zero_alpha_leaves_exploit_terms(rng):
    model = small_model(alpha=0.0)
    params = model.init(rng, 2)
    batch = small_batch(model, rng)
    loss, parts, _ = total_loss(model, params, batch, np.zeros(2), np.ones(2))
    np.testing.assert_array_equal(loss, parts["ub"] + parts["lb"])


def test_inactive_hinges_leave_explore_term(rng):
    model = small_model(ambiguity=AmbiguityParams(c_upper=1e6, c_lower=-1e6))
    params = model.init(rng, 2)
    batch = small_batch(model, rng)
    loss, parts, _ = total_loss(model, params, batch, np.zeros(2), np.ones(2))
    assert np.all(parts["ub"] == 0) and np.all(parts["lb"] == 0)
    np.testing.assert_array_equal(loss, -model.cfg.alpha * parts["explore"])


def test_ablation_switches(rng):
    model = small_model(use_exploit=False)
    params = model.init(rng, 2)
    _, parts, _ = model.loss(params, small_batch(model, rng), np.zeros(2), np.ones(2))
    assert np.all(parts["ub"] == 0) and np.all(parts["lb"] == 0)
    model = small_model(use_explore=False, ambiguity=AmbiguityParams(c_upper=1e6, c_lower=-1e6))
    loss, _, grads = model.loss(params, small_batch(model, rng), np.zeros(2), np.ones(2))
    assert np.all(loss == 0)
    assert all(np.all(g == 0) for g in grads.values())


def test_full_gradient_checks(rng):
    for i in range(6):
        assert grad_case_cermic(rng, ("graph", "recurrent")[i % 2], 1 + i % 2) <= 1e-6


def test_agents_are_independent(rng):
    # perturbing agent 1's batch never changes agent 0's loss
    model = small_model()
    params = model.init(rng, 2)
    b = small_batch(model, rng)
    l1, _, _ = model.loss(params, b, np.zeros(2), np.ones(2))
    b.obs[1] += 1.0
    l2, _, _ = model.loss(params, b, np.zeros(2), np.ones(2))
    assert l1[0] == l2[0] and l1[1] != l2[1]


def test_encode_checks_dimension(rng):
    model = small_model()
    params = model.init(rng, 1)
    with pytest.raises(ValueError):
        model.encode_obs(params, np.zeros((1, 1, O + 1)))
    s1, _ = model.encode_obs(params, np.ones((1, 2, O)))
    assert np.array_equal(s1[0, 0], s1[0, 1])


def test_critic_inputs_on_unit_sphere(rng):
    model = small_model()
    f = rng.normal(size=(2, 4, model.cfg.d_f))
    z, pos, neg = model.critic_inputs(f, np.ones(4), rng)
    assert z.shape == (2, 4, 1 + model.cfg.d_f) and neg.shape == (2, 4, model.cfg.n_neg, model.cfg.d_f)
    np.testing.assert_allclose(np.linalg.norm(pos, axis=-1), 1.0, atol=1e-14)
    np.testing.assert_allclose(np.linalg.norm(neg, axis=-1), 1.0, atol=1e-14)
    assert np.all(z[:, 0, 1:] == 0.0)


def test_critic_learns_to_pick_the_positive(rng):
    model = small_model(critic_lr=2.0)
    params = model.init(rng, 1)
    # context directions persist over time so the previous context predicts the current one
    base = unit_rows(rng.normal(size=(1, 1, model.cfg.d_f)))
    f = np.repeat(base, 50, axis=1) + 0.01 * rng.normal(size=(1, 50, model.cfg.d_f))
    spread = np.full((1, model.cfg.d_f), 0.3)
    lo0, _, _ = model.gammas(params, f, np.zeros(50), rng, spread)
    losses = []
    for _ in range(400):
        _, _, (z, pos, neg) = model.gammas(params, f, np.zeros(50), rng, spread)
        losses.append(model.critic_step(params, z, pos, neg)[0])
    lo1, _, _ = model.gammas(params, f, np.zeros(50), rng, spread)
    assert losses[-1] < losses[0]
    assert lo1.mean() > lo0.mean() + 0.1
