import numpy as np
import pytest
from hypothesis import given, strategies as st

from cermic_lab.mi import (
    BilinearCritic,
    CalibrationHead,
    DiscreteJoint,
    calibrated_mean,
    candidate_set,
    exact_mi_discrete,
    fit_discrete_critic,
    gamma_factor,
    infonce_lower,
    infonce_upper,
    negative_sampler,
    optimal_critic_lower,
)
from cermic_lab.nets import finite_difference, relative_error
from cermic_lab.verify import grad_case_calibration, grad_case_critic


def mi_by_enumeration(t):
    total = 0.0
    for i in range(t.shape[0]):
        for j in range(t.shape[1]):
            if t[i, j] > 0:
                total += t[i, j] * np.log(t[i, j] / (t[i].sum() * t[:, j].sum()))
    return total


def test_exact_mi_values():
    assert exact_mi_discrete(DiscreteJoint(np.full((2, 2), 0.25))) == 0.0
    assert exact_mi_discrete(DiscreteJoint(np.array([[0.5, 0.0], [0.0, 0.5]]))) == pytest.approx(np.log(2), abs=1e-15)
    t = np.array([[0.4, 0.1], [0.1, 0.4]])
    # 0.4 ln 1.6 * 2 + 0.1 ln 0.4 * 2
    assert exact_mi_discrete(DiscreteJoint(t)) == pytest.approx(0.19274, abs=5e-6)
    assert exact_mi_discrete(DiscreteJoint(t)) == pytest.approx(mi_by_enumeration(t), abs=1e-14)


@given(st.integers(0, 2**31))
def test_exact_mi_matches_enumeration(seed):
    r = np.random.default_rng(seed)
    t = r.dirichlet(np.ones(12)).reshape(3, 4)
    t /= t.sum()
    assert exact_mi_discrete(DiscreteJoint(t)) == pytest.approx(max(mi_by_enumeration(t), 0.0), abs=1e-12)


def test_joint_validation():
    with pytest.raises(ValueError):
        DiscreteJoint(np.array([[0.5, 0.6], [0.0, 0.0]]))
    with pytest.raises(ValueError):
        DiscreteJoint(np.array([0.5, 0.5]))


@given(st.integers(0, 2**31), st.integers(1, 6))
def test_scores_are_distributions(seed, n):
    r = np.random.default_rng(seed)
    critic = BilinearCritic.init(r, 3, 2, scale=2.0)
    s = critic.scores(r.normal(size=(4, 3)), candidate_set(r.normal(size=(4, 2)), r.normal(size=(4, n, 2))))
    assert np.all((s >= 0) & (s <= 1))
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


def test_critic_gradients(rng):
    for _ in range(20):
        assert grad_case_critic(rng) <= 1e-6
        assert grad_case_calibration(rng) <= 1e-6


def test_candidate_set_requires_negatives():
    with pytest.raises(ValueError):
        candidate_set(np.zeros((2, 3)), np.zeros((2, 0, 3)))


def test_empty_batch_rejected():
    c = BilinearCritic(np.zeros((1, 1)))
    with pytest.raises(ValueError):
        infonce_lower(c, np.zeros((0, 1)), np.zeros((0, 1)), np.zeros((0, 2, 1)))


def test_zero_critic_gives_zero_lower_estimate():
    c = BilinearCritic(np.zeros((2, 2)))
    z, f, neg = np.eye(2), np.eye(2), np.ones((2, 7, 2))
    assert infonce_lower(c, z, f, neg) + np.log(7) == pytest.approx(np.log(7) - np.log(8), abs=1e-14)


def _estimates(joint, rng, n_neg=16, n=20000):
    critic = fit_discrete_critic(joint, rng, n_neg=n_neg, steps=800)
    nz, nf = joint.table.shape
    zi, fi = joint.sample(rng, n)
    neg = joint.sample_marginal_f(rng, (n, n_neg))
    ez, ef = np.eye(nz), np.eye(nf)
    lo = infonce_lower(critic, ez[zi], ef[fi], ef[neg]) + np.log(n_neg)
    up = infonce_upper(critic, ez[zi], ef[fi], ef[neg])
    return lo, up


def test_bounds_on_correlated_bit(rng):
    joint = DiscreteJoint(np.array([[0.5, 0.0], [0.0, 0.5]]))
    lo, up = _estimates(joint, rng)
    mi = np.log(2)
    # a trained critic gets close to the density-ratio optimum, which is below the MI
    assert lo <= mi + 0.02
    assert lo == pytest.approx(optimal_critic_lower(joint, 16), abs=0.03)
    assert up >= mi - 0.02


def test_bounds_on_independent_joint(rng):
    joint = DiscreteJoint(np.full((2, 3), 1 / 6))
    lo, up = _estimates(joint, rng)
    # final-iterate noise in the critic only pushes the lower estimate down
    assert -0.1 < lo <= 0.02
    assert up >= -0.02


def test_optimal_critic_lower_is_below_mi():
    for t in (np.array([[0.4, 0.1], [0.1, 0.4]]), np.array([[0.3, 0.2], [0.05, 0.45]])):
        j = DiscreteJoint(t)
        assert optimal_critic_lower(j, 8) <= exact_mi_discrete(j) + 1e-12
        assert optimal_critic_lower(j, 8) <= optimal_critic_lower(j, 16) + 1e-12


def test_gamma_near_zero_when_independent(rng):
    critic = BilinearCritic(np.zeros((3, 2)))
    f_now = rng.normal(size=(50, 2))
    lo, hi = gamma_factor(rng.normal(size=50), rng.normal(size=(50, 2)), f_now, critic,
                          negative_sampler(f_now, 8, 1.0, rng).transpose(1, 0, 2))
    assert np.all(lo == 0.0)
    assert np.all((hi >= 0) & (hi <= 5.0))


def test_gamma_tracks_copy_mi(rng):
    # f_now copies a fair bit carried by f_prev: the reliability approaches log 2
    n_neg = 16
    joint = DiscreteJoint(np.array([[0.5, 0.0], [0.0, 0.5]]))
    fitted = fit_discrete_critic(joint, rng, n_neg=n_neg, steps=800)
    critic = BilinearCritic(np.vstack([np.zeros((1, 2)), fitted.B]))
    bits = rng.integers(0, 2, 5000)
    e = np.eye(2)
    neg = e[rng.integers(0, 2, (5000, n_neg))]
    lo, _ = gamma_factor(np.zeros(5000), e[bits], e[bits], critic, neg)
    assert lo.mean() == pytest.approx(optimal_critic_lower(joint, n_neg), abs=0.03)
    assert lo.mean() <= np.log(2) + 0.02


def test_calibration_head_identities(rng):
    head = CalibrationHead("h", 4, 5)
    p = {}
    head.init(rng, p, out_scale=1.0)
    f, mu = rng.normal(size=(6, 4)), rng.normal(size=6)
    np.testing.assert_array_equal(calibrated_mean(np.zeros(6), f, mu, p), mu)
    np.testing.assert_array_equal(calibrated_mean(rng.uniform(0, 3, 6), np.zeros((6, 4)), mu, p), mu)
    assert not np.allclose(calibrated_mean(np.ones(6), f, mu, p), mu)
    with pytest.raises(ValueError):
        calibrated_mean(np.ones(6), np.zeros((6, 3)), mu, p)


def test_negative_sampler_moments(rng):
    f = rng.normal(size=3)
    neg = negative_sampler(f, 20000, 0.7, rng)
    assert np.all(np.abs(neg.mean(axis=0) - f) <= 3 * 0.7 / np.sqrt(20000))
    np.testing.assert_allclose(neg.var(axis=0), 0.49, rtol=0.05)
    with pytest.warns(RuntimeWarning):
        same = negative_sampler(f, 4, 0.0, rng)
    assert np.all(same == f)
    with pytest.raises(ValueError):
        negative_sampler(f, 0, 1.0, rng)


def test_finite_difference_helper_self_check(rng):
    box = {"w": rng.normal(size=(2, 3))}
    num = finite_difference(lambda: float(np.sum(box["w"] ** 3)), box)
    assert relative_error({"w": 3 * box["w"] ** 2}, num) <= 1e-8
