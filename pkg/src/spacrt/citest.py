"""Conditional independence tests.

Five tests of H0: X independent of Y given Z, all built around the
cross-residual statistic T = (1/n) sum (x_i - mu_x(z_i)) (y_i - mu_y(z_i)):

* spacrt  - resampling-free saddlepoint approximation to the dCRT
            p-value, with a GCM fallback per side on solver failure;
* dcrt    - the resampling reference it approximates;
* gcm     - the normality-based generalized covariance measure test;
* score_test_nb - negative binomial regression score test for adding x;
* signflip_spa  - saddlepoint approximation to the sign-flipping test
            of a symmetric location null (no covariates).

Every test returns a TestOutcome with one-sided p-values for both tails
and the Bonferroni two-sided combination min(1, 2 min(p_left, p_right)).
The left tail always reuses the right-tail engine under negation of the
residual multipliers and the threshold.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit, logit, xlog1py, xlogy

from . import glm
from .nef import NefFamily, dA
from .saddlepoint import (
    SpaInputs,
    SpaSolution,
    SpaStatus,
    normal_sf,
    spa_tail_probability,
)


class Method(Enum):
    SPACRT = "spacrt"
    DCRT = "dcrt"
    GCM = "gcm"
    SCORE_NB = "score_nb"
    SIGNFLIP_SPA = "signflip_spa"


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray  # (n, d); use shape (n, 0) when there are no covariates

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if not (x.ndim == 1 and y.ndim == 1 and z.ndim == 2):
            raise ValueError("x, y must be vectors and z a matrix")
        if not (x.size == y.size == z.shape[0]):
            raise ValueError("x, y, z must have matching lengths")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y)) and np.all(np.isfinite(z))):
            raise ValueError("dataset entries must be finite")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z)

    @property
    def n(self) -> int:
        return self.x.size


@dataclass(frozen=True)
class FittedConditionals:
    """Plug-in estimates theta_x(z_i), mu_x(z_i) = A'(theta_x(z_i)) and
    mu_y(z_i) shared by spacrt / dcrt / gcm."""

    theta_x: np.ndarray
    mu_x: np.ndarray
    mu_y: np.ndarray
    family: NefFamily

    def __post_init__(self):
        theta = np.asarray(self.theta_x, dtype=float)
        mu_x = np.asarray(self.mu_x, dtype=float)
        mu_y = np.asarray(self.mu_y, dtype=float)
        if not (theta.shape == mu_x.shape == mu_y.shape and theta.ndim == 1):
            raise ValueError("conditionals must be equal-length vectors")
        if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(mu_x)) and np.all(np.isfinite(mu_y))):
            raise ValueError("conditionals must be finite")
        if np.max(np.abs(mu_x - dA(self.family, theta, 1))) > 1e-12:
            raise ValueError("mu_x must equal dA(theta_x, 1)")
        object.__setattr__(self, "theta_x", theta)
        object.__setattr__(self, "mu_x", mu_x)
        object.__setattr__(self, "mu_y", mu_y)

    @classmethod
    def from_theta(cls, theta_x, mu_y, family: NefFamily) -> "FittedConditionals":
        theta_x = np.asarray(theta_x, dtype=float)
        return cls(theta_x=theta_x, mu_x=dA(family, theta_x, 1), mu_y=mu_y, family=family)


@dataclass
class TestOutcome:
    statistic: float
    p_left: float
    p_right: float
    p_two: float
    method: Method
    fallback_used: bool = False
    degenerate: bool = False
    spa_detail: SpaSolution | None = None
    elapsed: float = 0.0


def _two_sided(p_left: float, p_right: float) -> float:
    return min(1.0, 2.0 * min(p_left, p_right))


def fit_conditionals(data: Dataset, x_model="logistic", y_model="negbin-mom") -> FittedConditionals:
    """Fit the conditional models used by spacrt / dcrt / gcm.

    x_model: "logistic" (binary x) or "poisson".  y_model: "negbin-mom",
    "negbin-ml", ("negbin", r), "poisson", "logistic", or "krr" /
    ("krr", kernel).  Precomputed estimates go through
    FittedConditionals.from_theta instead.
    """
    if x_model == "logistic":
        xfit = glm.fit_logistic(data.z, data.x)
        family = NefFamily.BERNOULLI
    elif x_model == "poisson":
        xfit = glm.fit_poisson(data.z, data.x)
        family = NefFamily.POISSON
    else:
        raise ValueError(f"unknown x_model {x_model!r}")
    theta_x = glm.predict_natural(xfit, data.z)

    if y_model == "negbin-mom":
        yfit = glm.fit_negbin(data.z, data.y, size="mom")
    elif y_model == "negbin-ml":
        yfit = glm.fit_negbin(data.z, data.y, size="ml")
    elif isinstance(y_model, tuple) and y_model[0] == "negbin":
        yfit = glm.fit_negbin(data.z, data.y, size=float(y_model[1]))
    elif y_model == "poisson":
        yfit = glm.fit_poisson(data.z, data.y)
    elif y_model == "logistic":
        yfit = glm.fit_logistic(data.z, data.y)
    elif y_model == "krr":
        yfit = glm.fit_krr(data.z, data.y)
    elif isinstance(y_model, tuple) and y_model[0] == "krr":
        yfit = glm.fit_krr(data.z, data.y, kernel=y_model[1])
    else:
        raise ValueError(f"unknown y_model {y_model!r}")
    mu_y = glm.predict_mean(yfit, data.z)
    return FittedConditionals.from_theta(theta_x, mu_y, family)


def test_statistic(data: Dataset, fits: FittedConditionals) -> float:
    """T = (1/n) sum (x_i - mu_x(z_i)) (y_i - mu_y(z_i))."""
    if fits.theta_x.size != data.n:
        raise ValueError("fits not aligned with data")
    return float(np.mean((data.x - fits.mu_x) * (data.y - fits.mu_y)))


test_statistic.__test__ = False  # keep pytest from collecting the API name


# -------------------------------------------------------------- spacrt ----


def bernoulli_spa_quantities(x, theta_x, a, s_hat, w):
    """Closed-form (lambda, r) for Bernoulli resampling, used to
    cross-check the generic pipeline.

    With mu-tilde_i = expit(theta_i + s a_i) and mu-hat_i = expit(theta_i):
    lambda = s * sqrt(sum a_i^2 mu-tilde_i (1 - mu-tilde_i)) and
    r = sgn(s) sqrt(2 sum [x_i log(mu~/mu^) + (1-x_i) log((1-mu~)/(1-mu^))]),
    or sgn(s) when the sum is negative.
    """
    x = np.asarray(x, dtype=float)
    theta_x = np.asarray(theta_x, dtype=float)
    a = np.asarray(a, dtype=float)
    mu_t = expit(theta_x + s_hat * a)
    mu_h = expit(theta_x)
    lam = s_hat * math.sqrt(float(np.sum(a * a * mu_t * (1 - mu_t))))
    inner = float(np.sum(xlogy(x, mu_t / mu_h) + xlogy(1 - x, (1 - mu_t) / (1 - mu_h))))
    if inner >= 0:
        r = math.copysign(math.sqrt(2.0 * inner), s_hat)
    else:
        r = math.copysign(1.0, s_hat)
    return lam, r


def _gcm_sides(data: Dataset, fits: FittedConditionals):
    R = (data.x - fits.mu_x) * (data.y - fits.mu_y)
    var = float(np.mean(R ** 2) - np.mean(R) ** 2)
    if var <= 0.0:
        return 0.0, 1.0, 1.0, True
    stat = math.sqrt(data.n) * float(np.mean(R)) / math.sqrt(var)
    return stat, normal_sf(-stat), normal_sf(stat), False


def spacrt(data: Dataset, fits: FittedConditionals, tol: float = 1e-10) -> TestOutcome:
    """Saddlepoint approximation to the dCRT p-value.

    Builds the aggregate CGF from terms (theta_x(z_i), a_i = y_i -
    mu_y(z_i)) at threshold w = T and reads the right tail off the
    Lugannani-Rice formula; the left tail runs the identical pipeline on
    (-a_i, -T).  Any side whose solver fails or whose p-value leaves
    [0, 1] falls back to the GCM p-value for that side, with
    fallback_used set.
    """
    start = time.perf_counter()
    t_obs = test_statistic(data, fits)
    a = data.y - fits.mu_y
    p_right, sol_right = spa_tail_probability(
        SpaInputs(family=fits.family, theta=fits.theta_x, a=a, w=t_obs), tol=tol
    )
    p_left, _ = spa_tail_probability(
        SpaInputs(family=fits.family, theta=fits.theta_x, a=-a, w=-t_obs), tol=tol
    )
    fallback = False
    gcm_cache = None
    if not (math.isfinite(p_right) and 0.0 <= p_right <= 1.0):
        gcm_cache = _gcm_sides(data, fits)
        p_right = gcm_cache[2]
        fallback = True
    if not (math.isfinite(p_left) and 0.0 <= p_left <= 1.0):
        if gcm_cache is None:
            gcm_cache = _gcm_sides(data, fits)
        p_left = gcm_cache[1]
        fallback = True
    return TestOutcome(
        statistic=t_obs,
        p_left=p_left,
        p_right=p_right,
        p_two=_two_sided(p_left, p_right),
        method=Method.SPACRT,
        fallback_used=fallback,
        spa_detail=sol_right,
        elapsed=time.perf_counter() - start,
    )


# ---------------------------------------------------------------- dcrt ----

_DCRT_CHUNK_ELEMS = 2 ** 24


def dcrt(data: Dataset, fits: FittedConditionals, M: int, rng: np.random.Generator) -> TestOutcome:
    """Resampling dCRT with M redraws of x | z from the fitted family.

    p_right = (1 + #{T~ >= T}) / (M + 1) and p_left counts T~ <= T, so
    ties enter both sides and each p-value is finite-sample valid.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    start = time.perf_counter()
    t_obs = test_statistic(data, fits)
    a = data.y - fits.mu_y
    n = data.n
    # the comparison value is computed through the same matmul code path
    # as the resampled statistics, so a redrawn vector identical to the
    # observed one ties exactly
    t_cmp = float(((data.x[None, :] - fits.mu_x) @ a)[0] / n)
    ge = le = 0
    chunk = max(1, _DCRT_CHUNK_ELEMS // n)
    done = 0
    if fits.family is NefFamily.POISSON:
        rates = np.exp(fits.theta_x)
    else:
        # float32 uniforms halve the RNG cost; the sampled indicators
        # are exact either way (probabilities shift by < 2^-24 relative)
        mu32 = fits.mu_x.astype(np.float32)
    while done < M:
        m = min(chunk, M - done)
        if fits.family is NefFamily.BERNOULLI:
            xt = (rng.random((m, n), dtype=np.float32) < mu32).astype(float)
        else:
            xt = rng.poisson(rates, size=(m, n)).astype(float)
        stats = ((xt - fits.mu_x) @ a) / n
        ge += int(np.sum(stats >= t_cmp))
        le += int(np.sum(stats <= t_cmp))
        done += m
    p_right = (1 + ge) / (M + 1)
    p_left = (1 + le) / (M + 1)
    return TestOutcome(
        statistic=t_obs,
        p_left=p_left,
        p_right=p_right,
        p_two=_two_sided(p_left, p_right),
        method=Method.DCRT,
        elapsed=time.perf_counter() - start,
    )


# ----------------------------------------------------------------- gcm ----


def gcm(data: Dataset, fits: FittedConditionals) -> TestOutcome:
    """Generalized covariance measure test: T normalized by the
    empirical standard deviation of the residual products, compared to
    the standard normal."""
    if data.n < 2:
        raise ValueError("need at least 2 observations")
    start = time.perf_counter()
    stat, p_left, p_right, degenerate = _gcm_sides(data, fits)
    return TestOutcome(
        statistic=stat,
        p_left=p_left,
        p_right=p_right,
        p_two=_two_sided(p_left, p_right) if not degenerate else 1.0,
        method=Method.GCM,
        degenerate=degenerate,
        elapsed=time.perf_counter() - start,
    )


# ------------------------------------------------------------ score test ----


def score_test_nb(data: Dataset, size="ml") -> TestOutcome:
    """Negative binomial regression score test for adding x to y ~ z.

    Fits the null NB model with ML dispersion (or a fixed size), forms
    the score U = sum x_i (y_i - mu_i) / (1 + mu_i / r), and standardizes
    by the efficient information, projecting x out of the weighted
    column space of [1, z] to account for the estimated coefficients.
    """
    start = time.perf_counter()
    try:
        fit0 = glm.fit_negbin(data.z, data.y, size=size)
    except (ValueError, np.linalg.LinAlgError):
        fit0 = None
    if fit0 is None or not np.all(np.isfinite(fit0.coefficients)):
        return TestOutcome(0.0, 1.0, 1.0, 1.0, Method.SCORE_NB, degenerate=True,
                           elapsed=time.perf_counter() - start)
    mu = glm.predict_mean(fit0, data.z)
    r = fit0.dispersion_size
    w_resid = 1.0 / (1.0 + mu / r)
    w_info = mu * w_resid
    u = float(np.sum(data.x * (data.y - mu) * w_resid))
    D = np.column_stack([np.ones(data.n), data.z])
    DtW = D.T * w_info
    try:
        b = np.linalg.solve(DtW @ D, DtW @ data.x)
    except np.linalg.LinAlgError:
        b = np.linalg.lstsq(DtW @ D, DtW @ data.x, rcond=None)[0]
    x_res = data.x - D @ b
    v = float(np.sum(w_info * x_res * x_res))
    total = float(np.sum(w_info * data.x * data.x))
    if v <= 1e-12 * max(total, 1e-300):
        stat = 0.0
    else:
        stat = u / math.sqrt(v)
    return TestOutcome(
        statistic=stat,
        p_left=normal_sf(-stat),
        p_right=normal_sf(stat),
        p_two=_two_sided(normal_sf(-stat), normal_sf(stat)),
        method=Method.SCORE_NB,
        degenerate=not fit0.converged,
        elapsed=time.perf_counter() - start,
    )


# ----------------------------------------------------------- sign flips ----


def _logcosh(t):
    t = np.abs(t)
    return t + np.log1p(np.exp(-2.0 * t)) - math.log(2.0)


def _sech2(t):
    e = np.exp(-np.abs(t))
    u = 2.0 * e / (1.0 + e * e)
    return u * u


def _signflip_tail(x: np.ndarray, tol: float, max_expand: int):
    """Right-tail SPA for the sign-flipping resampling distribution at
    threshold w = mean(x); log cosh CGF per summand."""
    from .saddlepoint import _Cgf, _make_solution, _solve_root, _tail_prob

    n = x.size
    w = float(np.mean(x))
    cgf = _Cgf(
        value=lambda s: float(np.mean(_logcosh(s * x))),
        prime=lambda s: float(np.mean(x * np.tanh(s * x))),
        second=lambda s: float(np.mean(x * x * _sech2(s * x))),
        third=lambda s: float(np.mean(-2.0 * x ** 3 * _sech2(s * x) * np.tanh(s * x))),
    )
    if w == 0.0:
        sol = _make_solution(cgf, n, 0.0, 0.0, SpaStatus.ZERO_THRESHOLD)
        return 0.5, sol
    nonzero = int(np.count_nonzero(x))
    sup = float(np.mean(np.abs(x)))
    if w >= sup:
        # all nonzero entries share one sign: the tail is the exact
        # lattice boundary atom 2^-#nonzero
        sol = SpaSolution(math.inf, math.inf, math.inf, SpaStatus.BRACKET_EXHAUSTED)
        return 0.5 ** nonzero, sol
    s, status = _solve_root(cgf, w, tol, max_expand)
    sol = _make_solution(cgf, n, w, s, status)
    return _tail_prob(cgf, n, w, sol, tol), sol


def signflip_spa(samples) -> TestOutcome:
    """Saddlepoint sign-flipping test of H0: symmetric location zero.

    The resampling distribution multiplies each observation by an
    independent +-1 sign; its per-summand CGF is log cosh(s x_i).  The
    right tail is evaluated at w = mean(x); the left tail runs the same
    pipeline on the negated sample.  All-zero input is degenerate with
    p = 1/2.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("samples must be a nonempty vector")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    start = time.perf_counter()
    w = float(np.mean(x))
    if np.all(x == 0.0):
        return TestOutcome(0.0, 0.5, 0.5, 1.0, Method.SIGNFLIP_SPA, degenerate=True,
                           elapsed=time.perf_counter() - start)
    p_right, sol = _signflip_tail(x, 1e-10, 60)
    p_left, _ = _signflip_tail(-x, 1e-10, 60)
    return TestOutcome(
        statistic=w,
        p_left=p_left,
        p_right=p_right,
        p_two=_two_sided(p_left, p_right),
        method=Method.SIGNFLIP_SPA,
        spa_detail=sol,
        elapsed=time.perf_counter() - start,
    )
