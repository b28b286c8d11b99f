import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from cermic_lab.numerics import DiagGaussian, kl_diag_gaussian
from cermic_lab.robust import (
    AmbiguityParams,
    RunningMoments,
    beta_from,
    cantelli_extreme,
    exploit_loss_lb,
    exploit_loss_ub,
    normalize_psi,
    psi_moments,
    psi_sample,
    worst_case_prob,
)


def test_log_ratio_standard_encoder_is_zero(rng):
    enc = DiagGaussian.standard(3)
    assert np.all(psi_sample(rng.normal(size=(10, 3)), enc) == 0.0)
    m = psi_moments(enc)
    assert (m.mu, m.sigma2) == (0.0, 0.0)


def test_log_ratio_frozen_values():
    enc = DiagGaussian([0.5], [2.0])
    assert psi_sample([0.5], enc) == pytest.approx(-0.22157, abs=5e-6)
    m = psi_moments(enc)
    assert m.mu == pytest.approx(0.27843, abs=5e-6)
    assert m.sigma2 == pytest.approx(1.0, abs=1e-15)


def test_log_ratio_against_densities(rng):
    from scipy import stats
    enc = DiagGaussian(rng.normal(size=3), rng.uniform(0.3, 2.5, 3))
    x = rng.normal(size=(5, 3))
    direct = (stats.multivariate_normal(enc.mean, np.diag(enc.var)).logpdf(x)
              - stats.multivariate_normal(np.zeros(3), np.eye(3)).logpdf(x))
    np.testing.assert_allclose(psi_sample(x, enc), direct, atol=1e-12)


def test_log_ratio_moments_monte_carlo(rng):
    enc = DiagGaussian([0.3, -1.0], [0.5, 1.7])
    x = enc.mean + np.sqrt(enc.var) * rng.normal(size=(1_000_000, 2))
    v = psi_sample(x, enc)
    m = psi_moments(enc)
    se = v.std() / np.sqrt(v.size)
    assert v.mean() == pytest.approx(m.mu, abs=3 * se)
    assert m.mu == pytest.approx(kl_diag_gaussian(enc, DiagGaussian.standard(2)), abs=1e-14)
    assert v.var() == pytest.approx(m.sigma2, rel=0.01)


def test_dimension_check():
    with pytest.raises(ValueError):
        psi_sample(np.zeros(3), DiagGaussian.standard(2))


def test_beta_branches_exact():
    assert beta_from(AmbiguityParams(1.0, 2.0, 0.5)) == 2.0
    assert beta_from(AmbiguityParams(1.0, 2.0, 0.25)) == np.sqrt(8.0)
    assert beta_from(AmbiguityParams()) == pytest.approx(np.sqrt(10.0), abs=1e-15)


@given(st.floats(0.1, 3.0), st.floats(0.05, 5.0), st.floats(0.01, 0.99))
def test_beta_makes_worst_case_exactly_one_minus_eps(g1, extra, eps):
    g2 = max(g1, 1.0) + extra
    beta = beta_from(AmbiguityParams(g1, g2, eps))
    assert worst_case_prob(beta, 1.0, g1, g2) == pytest.approx(1 - eps, abs=1e-9)


@given(st.floats(0.1, 3.0), st.floats(0.05, 5.0), st.floats(0.01, 0.98))
def test_beta_decreases_in_eps(g1, extra, eps):
    g2 = max(g1, 1.0) + extra
    lo = beta_from(AmbiguityParams(g1, g2, eps))
    hi = beta_from(AmbiguityParams(g1, g2, min(eps + 0.01, 0.99)))
    assert hi <= lo + 1e-12


def test_invalid_ambiguity_sets():
    for args in [(0.0, 2.0, 0.2), (1.0, 1.0, 0.2), (1.0, 2.0, 0.0), (1.0, 2.0, 1.0), (1.0, 2.0, 0.2, 0.0, 0.0)]:
        with pytest.raises(ValueError):
            AmbiguityParams(*args)


def test_hinge_frozen_values():
    assert exploit_loss_ub(0.0, 0.01, 2.0, 1.0) == 0.0
    assert exploit_loss_ub(0.9, 0.04, 2.0, 1.0) == pytest.approx(0.3, abs=1e-15)
    assert exploit_loss_lb(1.0, 0.01, 2.0, 0.0) == 0.0
    assert exploit_loss_lb(0.0, 0.0, 2.0, 0.0) == 0.0
    # the hinge opens once the lower tail dips under the threshold
    assert exploit_loss_lb(0.0, 0.04, 2.0, -0.1) == pytest.approx(0.3, abs=1e-15)
    with pytest.raises(ValueError):
        exploit_loss_ub(0.0, -1.0, 2.0, 1.0)


@given(st.floats(-5, 5), st.floats(0, 4), st.floats(0, 4), st.floats(-5, 5))
def test_hinges_mirror(mu, s2, beta, c):
    assert exploit_loss_lb(mu, s2, beta, c) == pytest.approx(exploit_loss_ub(-mu, s2, beta, -c), rel=1e-14, abs=1e-14)
    assert exploit_loss_ub(mu, s2, beta, c) >= 0.0


def test_worst_case_frozen_values():
    assert worst_case_prob(2.0, 1.0, 1.0, 2.0) == 0.5
    assert worst_case_prob(0.5, 1.0, 1.0, 2.0) is None


# tiny positive slack puts one atom ~1/slack away, where the moment arithmetic loses precision
@given(st.floats(0.1, 3.0), st.floats(0.05, 5.0), st.floats(0.05, 4.0), st.one_of(st.just(0.0), st.floats(1e-3, 8.0)))
def test_two_point_extreme_attains_worst_case(g1, extra, sigma2, slack):
    g2 = max(g1, 1.0) + extra
    k = np.sqrt(g1) + slack
    dist = cantelli_extreme(0.0, sigma2, k * np.sqrt(sigma2), g1, g2)
    # the extreme sits on the ambiguity set's boundary
    assert dist.mean ** 2 <= g1 * sigma2 + 1e-8
    assert dist.var + dist.mean ** 2 <= g2 * sigma2 + 1e-8
    assert dist.prob_le(k * np.sqrt(sigma2)) == pytest.approx(worst_case_prob(k * np.sqrt(sigma2), sigma2, g1, g2),
                                                               abs=1e-6)


@given(st.floats(0.1, 3.0), st.floats(0.05, 5.0), st.floats(0.0, 6.0), st.integers(0, 2**31))
def test_no_feasible_two_point_does_worse(g1, extra, slack, seed):
    # random members of the ambiguity set never undercut the worst case
    g2 = max(g1, 1.0) + extra
    k = np.sqrt(g1) + slack
    wc = worst_case_prob(k, 1.0, g1, g2)
    r = np.random.default_rng(seed)
    for _ in range(50):
        m = r.uniform(-np.sqrt(g1), np.sqrt(g1))
        v = r.uniform(0, g2 - m * m)
        p = r.uniform(0.01, 0.99)
        a = m + np.sqrt(v * (1 - p) / p)
        b = m - np.sqrt(v * p / (1 - p))
        prob = p * (a <= k) + (1 - p) * (b <= k)
        assert prob >= wc - 1e-9


def test_extreme_rejects_infeasible():
    with pytest.raises(ValueError):
        cantelli_extreme(0.0, 1.0, 0.5, 1.0, 2.0)


def test_running_moments_constant_and_gaussian(rng):
    out, st_ = normalize_psi(np.full(1000, 3.0))
    # float rounding of the running mean leaves residue far below the variance floor's scale
    assert np.abs(out).max() < 1e-9
    out, st_ = normalize_psi(rng.normal(5.0, 3.0, 10_000))
    assert abs(st_.mean - 5.0) < 0.1
    assert abs(np.sqrt(st_.var) - 3.0) < 0.1


def test_running_moments_bias_correction():
    s = RunningMoments(0.99)
    assert not s.ready and s.mean == 0.0 and s.var == 1.0
    s.update([2.0, 4.0])
    assert s.mean == pytest.approx(3.0, abs=1e-14)
    assert s.var == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        RunningMoments(1.0)


def test_boundary_rounding_stays_feasible():
    # the exact boundary k = sqrt(gamma1), reached through rounding-prone arithmetic
    g1, g2, sigma2 = 1.3337739050510946, 2.3337739050510944, 0.8802159985512142
    c = np.sqrt(g1) * np.sqrt(sigma2)
    dist = cantelli_extreme(0.0, sigma2, c, g1, g2)
    assert worst_case_prob(c, sigma2, g1, g2) == 0.0
    assert dist.prob_le(c) == pytest.approx(0.0, abs=1e-6)
