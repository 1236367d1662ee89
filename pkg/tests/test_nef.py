import math

import numpy as np
import pytest
from scipy.special import expit, logit

from spacrt.nef import CgfTerm, NefFamily, centered_cgf, dA, log_partition, sample

BER = NefFamily.BERNOULLI
POI = NefFamily.POISSON


def test_log_partition_bernoulli_at_zero():
    assert log_partition(BER, 0.0) == pytest.approx(math.log(2.0), rel=1e-15)


def test_log_partition_bernoulli_matches_softplus_form():
    # A(theta) = log(1 + exp(theta)) on a grid where naive evaluation is safe
    for theta in (-3.0, -0.5, 0.7, 4.0, 20.0):
        assert log_partition(BER, theta) == pytest.approx(math.log1p(math.exp(theta)), rel=1e-14)


def test_log_partition_bernoulli_no_overflow():
    # extended-precision oracle: log(1 + e^50) = 50 + log1p(e^-50)
    import mpmath

    expected = float(mpmath.log(1 + mpmath.e ** 50))
    got = log_partition(BER, 50.0)
    assert np.isfinite(got)
    assert got == pytest.approx(expected, rel=1e-15)
    assert log_partition(BER, 800.0) == pytest.approx(800.0, rel=1e-15)


def test_log_partition_poisson():
    assert log_partition(POI, 1.3) == pytest.approx(math.exp(1.3), rel=1e-15)


def test_log_partition_rejects_nonfinite():
    with pytest.raises(ValueError):
        log_partition(BER, math.inf)
    with pytest.raises(ValueError):
        log_partition(POI, math.nan)


def test_dA_bernoulli_variance_at_zero():
    assert dA(BER, 0.0, 2) == pytest.approx(0.25, abs=1e-15)


def test_dA_poisson_mean():
    assert dA(POI, 1.0, 1) == pytest.approx(math.e, rel=1e-15)


def test_dA_bernoulli_variance_at_mu_03():
    # mu(1-mu) at mu = 0.3
    assert dA(BER, logit(0.3), 2) == pytest.approx(0.21, rel=1e-12)


def test_dA_rejects_bad_order():
    with pytest.raises(ValueError):
        dA(BER, 0.0, 5)
    with pytest.raises(ValueError):
        dA(POI, 0.0, 0)


@pytest.mark.parametrize("family", [BER, POI])
def test_dA_orders_match_finite_differences(family):
    # each order differentiates the previous one; central differences
    h = 1e-5
    grid = np.linspace(-3.0, 3.0, 25)
    for order in (1, 2, 3, 4):
        lower = log_partition if order == 1 else (lambda f, t, o=order - 1: dA(f, t, o))
        for theta in grid:
            fd = (lower(family, theta + h) - lower(family, theta - h)) / (2 * h)
            val = dA(family, theta, order)
            assert val == pytest.approx(fd, rel=1e-6, abs=1e-6)


def test_dA_range_invariants():
    grid = np.linspace(-30, 30, 101)
    mu = dA(BER, grid, 1)
    assert np.all((mu > 0) & (mu < 1))
    assert np.all(dA(BER, grid, 2) > 0)
    assert np.all(dA(POI, grid, 2) > 0)


def test_centered_cgf_zero_multiplier():
    for s in (-2.0, 0.0, 3.5):
        assert centered_cgf(BER, CgfTerm(0.7, 0.0), s) == 0.0
        assert centered_cgf(POI, CgfTerm(-1.0, 0.0), s) == 0.0


def test_centered_cgf_at_origin():
    assert centered_cgf(BER, CgfTerm(1.2, -0.4), 0.0) == 0.0
    assert centered_cgf(POI, CgfTerm(0.3, 2.0), 0.0) == 0.0


def test_centered_cgf_bernoulli_enumeration_oracle():
    # log E[e^{s(X - 1/2)}] for X ~ Ber(1/2) by direct enumeration
    s = 1.0
    oracle = math.log(0.5 * math.exp(-0.5 * s) + 0.5 * math.exp(0.5 * s))
    assert oracle == pytest.approx(math.log((1 + math.e) / 2) - 0.5, rel=1e-15)
    assert centered_cgf(BER, CgfTerm(0.0, 1.0), s) == pytest.approx(oracle, rel=1e-14)


@pytest.mark.parametrize("family", [BER, POI])
def test_centered_cgf_derivatives_match_finite_differences(family):
    h = 1e-5
    rng = np.random.default_rng(42)
    for _ in range(50):
        theta = rng.uniform(-2.5, 2.5)
        a = rng.uniform(-2.0, 2.0)
        s = rng.uniform(-1.5, 1.5)
        term = CgfTerm(theta, a)
        f = lambda t: centered_cgf(family, term, t)
        d1 = (f(s + h) - f(s - h)) / (2 * h)
        d2 = (f(s + h) - 2 * f(s) + f(s - h)) / (h * h)
        # analytic derivatives from dA
        exact1 = a * (dA(family, theta + a * s, 1) - dA(family, theta, 1))
        exact2 = a * a * dA(family, theta + a * s, 2)
        assert d1 == pytest.approx(exact1, rel=1e-6, abs=1e-6)
        assert d2 == pytest.approx(exact2, rel=1e-4, abs=1e-4)
        assert exact2 >= 0.0


def test_centered_cgf_mean_zero_slope_at_origin():
    rng = np.random.default_rng(0)
    for _ in range(20):
        theta, a = rng.uniform(-3, 3), rng.uniform(-2, 2)
        for family in (BER, POI):
            slope = a * (dA(family, theta, 1) - dA(family, theta, 1))
            assert slope == 0.0


def test_sample_bernoulli_near_degenerate():
    rng = np.random.default_rng(1)
    draws = sample(BER, np.full(1000, logit(1e-9)), rng)
    assert np.all(draws == 0.0)


def test_sample_bernoulli_mean():
    rng = np.random.default_rng(2)
    draws = sample(BER, np.zeros(10 ** 6), rng)
    assert abs(draws.mean() - 0.5) < 0.002  # 3 sigma < 0.0015


def test_sample_poisson_mean():
    rng = np.random.default_rng(3)
    draws = sample(POI, np.full(10 ** 6, math.log(4.0)), rng)
    assert abs(draws.mean() - 4.0) < 0.01  # 3 sigma = 0.006


def test_sample_reproducible():
    a = sample(BER, np.zeros(100), np.random.default_rng(7))
    b = sample(BER, np.zeros(100), np.random.default_rng(7))
    assert np.array_equal(a, b)


def test_cgf_term_validates():
    with pytest.raises(ValueError):
        CgfTerm(math.inf, 1.0)
    with pytest.raises(ValueError):
        CgfTerm(0.0, math.nan)
