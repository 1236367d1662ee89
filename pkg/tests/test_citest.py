import math
from types import SimpleNamespace

import numpy as np
import pytest
from scipy.special import expit, logit
from scipy.stats import kstest, norm

from spacrt.citest import (
    Dataset,
    FittedConditionals,
    Method,
    bernoulli_spa_quantities,
    dcrt,
    fit_conditionals,
    gcm,
    score_test_nb,
    signflip_spa,
    spacrt,
    test_statistic,
)
from spacrt.nef import NefFamily
from spacrt.saddlepoint import SpaInputs, SpaStatus, solve_saddlepoint

BER = NefFamily.BERNOULLI


def make_fits(mu_x, mu_y):
    return FittedConditionals.from_theta(logit(np.asarray(mu_x)), np.asarray(mu_y), BER)


def simulate_crispr_like(rng, n, gamma0=-3.0, beta0=-5.0, rho=0.0, size=0.05):
    z = rng.normal(0, 1, n)
    x = (rng.random(n) < expit(gamma0 + z)).astype(float)
    mu = np.exp(beta0 + rho * x + z)
    y = rng.poisson(rng.gamma(shape=size, scale=mu / size)).astype(float)
    return Dataset(x=x, y=y, z=z)


# ------------------------------------------------------------- statistic ----


def test_statistic_zero_when_x_equals_mu():
    fits = make_fits([0.25, 0.5, 0.75], [1.0, 2.0, 0.0])
    data = Dataset(x=np.array([0.25, 0.5, 0.75]), y=np.array([3.0, 1.0, 2.0]), z=np.zeros((3, 1)))
    assert test_statistic(data, fits) == 0.0


def test_statistic_hand_case():
    # residual products (0.5 * 2, -0.5 * 1) -> mean 0.25
    fits = make_fits([0.4, 0.6], [0.5, 0.3])
    data = Dataset(x=np.array([0.9, 0.1]), y=np.array([2.5, 1.3]), z=np.zeros((2, 1)))
    assert test_statistic(data, fits) == pytest.approx(0.25, abs=1e-15)


def test_statistic_permutation_invariant():
    rng = np.random.default_rng(1)
    n = 50
    mu_x, mu_y = rng.uniform(0.2, 0.8, n), rng.normal(0, 1, n)
    x = (rng.random(n) < mu_x).astype(float)
    y = rng.normal(mu_y, 1)
    perm = rng.permutation(n)
    t1 = test_statistic(Dataset(x, y, np.zeros((n, 1))), make_fits(mu_x, mu_y))
    t2 = test_statistic(Dataset(x[perm], y[perm], np.zeros((n, 1))), make_fits(mu_x[perm], mu_y[perm]))
    assert t1 == pytest.approx(t2, rel=1e-12)


def test_fitted_conditionals_validates_mu_x():
    with pytest.raises(ValueError):
        FittedConditionals(
            theta_x=np.array([0.0]), mu_x=np.array([0.7]), mu_y=np.array([0.0]), family=BER
        )


# --------------------------------------------------------------- spacrt ----


def test_spacrt_zero_statistic_gives_half():
    mu_x = np.array([0.3, 0.6, 0.5, 0.2])
    fits = make_fits(mu_x, np.zeros(4))
    data = Dataset(x=mu_x.copy(), y=np.array([1.0, -1.0, 2.0, 0.5]), z=np.zeros((4, 1)))
    out = spacrt(data, fits)
    assert out.statistic == 0.0
    assert out.p_right == 0.5 and out.p_left == 0.5
    assert out.p_two == 1.0
    assert out.spa_detail.status is SpaStatus.ZERO_THRESHOLD


def test_spacrt_matches_bernoulli_closed_form():
    # generic NEF pipeline vs the binary-sampling closed forms
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = 300
        mu_x = rng.uniform(0.05, 0.95, n)
        x = (rng.random(n) < mu_x).astype(float)
        a = rng.normal(0, 1, n)
        theta = logit(mu_x)
        w = float(np.mean((x - mu_x) * a))
        if w == 0:
            continue
        sol = solve_saddlepoint(SpaInputs(family=BER, theta=theta, a=a, w=w))
        assert sol.status is SpaStatus.INTERIOR
        lam_cf, r_cf = bernoulli_spa_quantities(x, theta, a, sol.s_hat, w)
        assert sol.lam == pytest.approx(lam_cf, rel=1e-10, abs=1e-12)
        assert sol.r == pytest.approx(r_cf, rel=1e-10, abs=1e-10)


def test_spacrt_agrees_with_dcrt_oracle():
    # Monte Carlo oracle with M = 1e6 resamples on seeded datasets at the
    # sample size the approximation targets (n = 2000)
    checked = 0
    for seed in range(3):
        data = simulate_crispr_like(np.random.default_rng(seed), 2000, rho=1.2)
        fits = fit_conditionals(data)
        spa_out = spacrt(data, fits)
        mc_out = dcrt(data, fits, M=10 ** 6, rng=np.random.default_rng(1000 + seed))
        for p_spa, p_mc in ((spa_out.p_right, mc_out.p_right), (spa_out.p_left, mc_out.p_left)):
            if not (1e-3 <= p_mc <= 0.5):
                continue
            assert abs(math.log10(p_spa) - math.log10(p_mc)) <= 0.05
            checked += 1
    assert checked >= 3


def test_spacrt_permutation_invariant():
    rng = np.random.default_rng(7)
    data = simulate_crispr_like(rng, 400, rho=0.5)
    fits = fit_conditionals(data)
    out = spacrt(data, fits)
    perm = rng.permutation(data.n)
    data_p = Dataset(data.x[perm], data.y[perm], data.z[perm])
    fits_p = FittedConditionals.from_theta(fits.theta_x[perm], fits.mu_y[perm], BER)
    out_p = spacrt(data_p, fits_p)
    assert out.p_right == pytest.approx(out_p.p_right, rel=1e-10)
    assert out.p_left == pytest.approx(out_p.p_left, rel=1e-10)


def test_spacrt_fallback_to_gcm():
    # an off-support threshold cannot be bracketed; both sides fall back
    fits = make_fits([0.5, 0.5, 0.5], [0.0, 0.0, 0.0])
    data = Dataset(x=np.array([5.0, 4.0, 6.0]), y=np.array([1.0, 2.0, 1.5]), z=np.zeros((3, 1)))
    out = spacrt(data, fits)
    ref = gcm(data, fits)
    assert out.fallback_used
    assert out.p_right == pytest.approx(ref.p_right, abs=1e-15)


# ----------------------------------------------------------------- dcrt ----


def test_dcrt_exact_enumeration_oracle():
    rng = np.random.default_rng(11)
    n = 8
    mu_x = rng.uniform(0.2, 0.8, n)
    x = (rng.random(n) < mu_x).astype(float)
    a = rng.normal(0, 1, n)
    fits = make_fits(mu_x, np.zeros(n))
    data = Dataset(x=x, y=a, z=np.zeros((n, 1)))
    t_obs = test_statistic(data, fits)
    outs = ((np.arange(2 ** n)[:, None] >> np.arange(n)) & 1).astype(float)
    probs = np.exp(outs @ np.log(mu_x) + (1 - outs) @ np.log(1 - mu_x))
    stats = (outs - mu_x) @ a / n
    exact_right = float(probs[stats >= t_obs].sum())
    exact_left = float(probs[stats <= t_obs].sum())
    ties = float(probs[stats == t_obs].sum())
    # symmetry-side identity on the enumerable instance
    assert exact_left == pytest.approx(1 - exact_right + ties, abs=1e-12)
    M = 10 ** 6
    out = dcrt(data, fits, M=M, rng=np.random.default_rng(99))
    se = math.sqrt(exact_right * (1 - exact_right) / M)
    assert abs(out.p_right - exact_right) <= 3 * se + 2 / M
    se_l = math.sqrt(exact_left * (1 - exact_left) / M)
    assert abs(out.p_left - exact_left) <= 3 * se_l + 2 / M


def test_dcrt_degenerate_residuals():
    mu_x = np.array([0.4, 0.6, 0.5])
    fits = make_fits(mu_x, np.array([1.0, 2.0, 3.0]))
    data = Dataset(
        x=np.array([1.0, 0.0, 1.0]), y=np.array([1.0, 2.0, 3.0]), z=np.zeros((3, 1))
    )  # y == mu_y so every resampled statistic ties at 0
    out = dcrt(data, fits, M=500, rng=np.random.default_rng(0))
    assert out.p_right == 1.0 and out.p_left == 1.0


def test_dcrt_tie_counting_identity():
    rng = np.random.default_rng(13)
    data = simulate_crispr_like(rng, 120, rho=0.8)
    fits = fit_conditionals(data)
    M = 999
    out = dcrt(data, fits, M=M, rng=rng)
    assert out.p_right + out.p_left >= 1 + 1 / (M + 1) - 1e-12


def test_dcrt_seed_reproducible():
    data = simulate_crispr_like(np.random.default_rng(5), 100, rho=0.3)
    fits = fit_conditionals(data)
    a = dcrt(data, fits, M=2000, rng=np.random.default_rng(77))
    b = dcrt(data, fits, M=2000, rng=np.random.default_rng(77))
    assert (a.p_left, a.p_right) == (b.p_left, b.p_right)


def test_dcrt_rejects_bad_m():
    data = simulate_crispr_like(np.random.default_rng(5), 50)
    fits = make_fits(np.full(50, 0.5), np.zeros(50))
    with pytest.raises(ValueError):
        dcrt(data, fits, M=0, rng=np.random.default_rng(0))


# ------------------------------------------------------------------ gcm ----


def test_gcm_alternating_residuals():
    fits = make_fits([0.5] * 4, [0.0] * 4)
    data = Dataset(
        x=np.array([1.5, -0.5, 1.5, -0.5]), y=np.array([1.0, 1.0, 1.0, 1.0]), z=np.zeros((4, 1))
    )  # residual products (1, -1, 1, -1)
    out = gcm(data, fits)
    assert out.statistic == pytest.approx(0.0, abs=1e-15)
    assert out.p_right == pytest.approx(0.5, abs=1e-15)


def test_gcm_hand_dataset():
    # R = (0.2, 0.1, -0.1, 0.3): T = sqrt(4) * 0.125 / sd(R)
    R = np.array([0.2, 0.1, -0.1, 0.3])
    fits = make_fits([0.5] * 4, [0.0] * 4)
    data = Dataset(x=0.5 + R, y=np.ones(4), z=np.zeros((4, 1)))
    sd = math.sqrt(float(np.mean(R ** 2) - np.mean(R) ** 2))
    expected = 2 * 0.125 / sd
    out = gcm(data, fits)
    assert out.statistic == pytest.approx(expected, rel=1e-12)
    assert out.p_right == pytest.approx(norm.sf(expected), rel=1e-10)
    assert out.p_left == pytest.approx(norm.cdf(expected), rel=1e-10)


def test_gcm_degenerate_zero_variance():
    fits = make_fits([0.5] * 3, [0.0] * 3)
    data = Dataset(x=np.full(3, 0.5), y=np.ones(3), z=np.zeros((3, 1)))
    out = gcm(data, fits)
    assert out.degenerate
    assert out.p_left == 1.0 and out.p_right == 1.0


def test_gcm_sign_flip_on_negated_x_residuals():
    rng = np.random.default_rng(17)
    n = 60
    mu_x = rng.uniform(0.3, 0.7, n)
    x = (rng.random(n) < mu_x).astype(float)
    y = rng.normal(0, 1, n)
    d1 = Dataset(x, y, np.zeros((n, 1)))
    f1 = make_fits(mu_x, np.zeros(n))
    out1 = gcm(d1, f1)
    # negate the x residuals by flipping both x and mu_x around 1/2
    d2 = Dataset(1 - x, y, np.zeros((n, 1)))
    f2 = make_fits(1 - mu_x, np.zeros(n))
    out2 = gcm(d2, f2)
    assert out1.statistic == pytest.approx(-out2.statistic, rel=1e-12)


def test_gcm_null_pvalues_uniform():
    # independent gaussians with OLS fits: p-values pass a KS test
    rng = np.random.default_rng(19)
    n, reps = 200, 5000
    pvals = np.empty(reps)
    for i in range(reps):
        z = rng.normal(0, 1, n)
        x = 0.5 * z + rng.normal(0, 1, n)
        y = -0.3 * z + rng.normal(0, 1, n)
        Zd = np.column_stack([np.ones(n), z])
        bx, *_ = np.linalg.lstsq(Zd, x, rcond=None)
        by, *_ = np.linalg.lstsq(Zd, y, rcond=None)
        fits = SimpleNamespace(mu_x=Zd @ bx, mu_y=Zd @ by)
        out = gcm(Dataset(x, y, z), fits)
        pvals[i] = out.p_right
    assert kstest(pvals, "uniform").pvalue > 0.01


# ----------------------------------------------------------- score test ----


def test_score_nb_constant_x_is_zero():
    rng = np.random.default_rng(23)
    n = 300
    z = rng.normal(0, 1, n)
    y = rng.poisson(np.exp(-1 + 0.5 * z)).astype(float)
    data = Dataset(x=np.ones(n), y=y, z=z)
    out = score_test_nb(data, size=2.0)
    assert out.statistic == pytest.approx(0.0, abs=1e-8)
    assert out.p_right == pytest.approx(0.5, abs=1e-8)


def test_score_nb_poisson_limit():
    rng = np.random.default_rng(29)
    n = 800
    z = rng.normal(0, 1, n)
    x = rng.normal(0, 1, n)
    y = rng.poisson(np.exp(-0.5 + 0.6 * z)).astype(float)
    data = Dataset(x=x, y=y, z=z)
    out = score_test_nb(data, size=1e8)

    # independent Poisson score test oracle
    from spacrt.glm import fit_poisson, predict_mean

    pfit = fit_poisson(z, y)
    mu = predict_mean(pfit, z)
    u = float(np.sum(x * (y - mu)))
    D = np.column_stack([np.ones(n), z])
    b = np.linalg.solve((D.T * mu) @ D, (D.T * mu) @ x)
    v = float(np.sum(mu * (x - D @ b) ** 2))
    oracle = u / math.sqrt(v)
    assert out.statistic == pytest.approx(oracle, abs=1e-3)


def test_score_nb_null_calibration():
    # (gamma0, beta0, rho, r) = (-2, -2, 0, 10), n = 5000
    reps, n = 2000, 5000
    rejections = 0
    master = np.random.default_rng(31)
    seeds = master.integers(0, 2 ** 32, reps)
    for seed in seeds:
        rng = np.random.default_rng(seed)
        z = rng.normal(0, 1, n)
        x = (rng.random(n) < expit(-2 + z)).astype(float)
        mu = np.exp(-2 + z)
        y = rng.poisson(rng.gamma(shape=10.0, scale=mu / 10.0)).astype(float)
        out = score_test_nb(Dataset(x, y, z), size="ml")
        rejections += out.p_two <= 0.05
    rate = rejections / reps
    assert 0.035 <= rate <= 0.065


# ------------------------------------------------------------- signflip ----


def enumerate_signflip(x, w):
    n = len(x)
    signs = 1 - 2 * ((np.arange(2 ** n)[:, None] >> np.arange(n)) & 1).astype(float)
    vals = signs @ x / n
    return float(np.mean(vals >= w - 1e-15 * max(1.0, abs(w))))


def test_signflip_zero_mean():
    out = signflip_spa(np.array([1.0, -1.0, 2.0, -2.0]))
    assert out.p_right == 0.5 and out.p_left == 0.5


def test_signflip_all_zero_degenerate():
    out = signflip_spa(np.zeros(5))
    assert out.degenerate
    assert out.p_right == 0.5


def test_signflip_vs_enumeration():
    # at n = 16 the enumeration has atoms of mass 2^-16, so 5% relative
    # agreement is only meaningful for tails well above the granularity
    # scale; assert it where exact p >= 5e-3
    rng = np.random.default_rng(37)
    checked = 0
    for _ in range(10):
        x = np.sign(rng.random(16) - 0.3) * rng.uniform(0.5, 1.5, 16) + 0.15
        w = float(np.mean(x))
        exact = enumerate_signflip(x, w)
        out = signflip_spa(x)
        if exact >= 5e-3:
            assert abs(out.p_right - exact) <= 0.05 * exact
            checked += 1
    assert checked >= 5


def test_signflip_negation_consistency():
    rng = np.random.default_rng(41)
    x = rng.normal(0.4, 1.0, 16)
    out = signflip_spa(x)
    out_neg = signflip_spa(-x)
    assert out.p_right == pytest.approx(out_neg.p_left, abs=1e-15)
    # the left tail matches the enumeration of the lower-tail count
    n = 16
    signs = 1 - 2 * ((np.arange(2 ** n)[:, None] >> np.arange(n)) & 1).astype(float)
    vals = signs @ x / n
    w = float(np.mean(x))
    exact_left = float(np.mean(vals <= w + 1e-15 * max(1.0, abs(w))))
    assert abs(out.p_left - exact_left) <= 0.05 * exact_left


def test_signflip_one_sided_boundary():
    # all-positive sample: the resampling tail is the exact boundary atom
    x = np.array([0.5, 1.0, 1.5, 0.7])
    out = signflip_spa(x)
    assert out.p_right == pytest.approx(2.0 ** -4, abs=1e-15)


def test_signflip_rejects_bad_input():
    with pytest.raises(ValueError):
        signflip_spa(np.array([]))
    with pytest.raises(ValueError):
        signflip_spa(np.array([1.0, math.inf]))
