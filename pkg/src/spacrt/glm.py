"""Regression fitters for the plug-in conditional means.

IRLS for logistic / Poisson / negative-binomial GLMs (optionally ridge-
stabilized or L1-penalized via coordinate descent on the working
quadratic), method-of-moments and profile-ML dispersion estimation for
the negative binomial, and kernel ridge regression with eigenvalue-based
regularization selection.

Conventions.  Design matrices get an implicit intercept: coefficient 0
is the intercept, the rest align with the columns of Z.  Penalties are
on the glmnet scale, i.e. the objective is (1/n) * NLL + lambda * |beta|_1
(or + lambda/2 * |beta|_2^2), intercept never penalized.  IRLS stops when
the relative penalized-deviance change drops below 1e-8 or after 100
iterations; coordinate descent sweeps stop at max coefficient change
below 1e-7 or 1000 sweeps.  Complete separation (or any other failure to
converge without a penalty) yields a ridge-stabilized (l2, 1e-6) refit
flagged converged=False rather than an exception, since downstream tests
need finite fitted means.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, expit, gammaln, polygamma, xlogy

SIZE_CLAMP = (1e-4, 1e4)

_IRLS_MAX_ITER = 100
_IRLS_REL_TOL = 1e-8
_CD_MAX_SWEEPS = 1000
_CD_COEF_TOL = 1e-7
_STABILIZER_RIDGE = 1e-6


@dataclass
class GlmFit:
    coefficients: np.ndarray  # position 0 is the intercept
    family: str  # "logistic" | "poisson" | "negbin"
    converged: bool
    iterations: int
    dispersion_size: float | None = None
    penalty: tuple | None = None
    deviances: list[float] = field(default_factory=list)
    fitted_means: np.ndarray | None = None

    def __post_init__(self):
        if self.converged and not np.all(np.isfinite(self.coefficients)):
            raise ValueError("converged fit must have finite coefficients")
        if self.dispersion_size is not None and not self.dispersion_size > 0:
            raise ValueError("dispersion size must be positive")


@dataclass
class KrrFit:
    dual_weights: np.ndarray
    training_covariates: np.ndarray
    kernel: tuple  # ("linear",) or ("gaussian", bandwidth)
    lam: float
    intercept: float  # response mean; ridge system solved on centered y

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")


# ----------------------------------------------------------- families ----


def _mu_logistic(eta):
    return expit(eta)


def _mu_log(eta):
    return np.exp(np.minimum(eta, 500.0))


def _dev_logistic(x, mu):
    mu = np.clip(mu, 1e-300, 1 - 1e-16)
    return float(-2.0 * np.sum(xlogy(x, mu) + xlogy(1 - x, 1 - mu)))


def _dev_poisson(y, mu):
    mu = np.maximum(mu, 1e-300)
    return float(2.0 * np.sum(xlogy(y, y / mu) - (y - mu)))


def _dev_negbin(y, mu, r):
    mu = np.maximum(mu, 1e-300)
    return float(2.0 * np.sum(xlogy(y, y / mu) - (y + r) * np.log((y + r) / (mu + r))))


class _Family:
    """link/weight bundle used by the shared IRLS loop."""

    def __init__(self, name, mu_fun, dmu_fun, weight_fun, dev_fun):
        self.name = name
        self.mu = mu_fun
        self.dmu = dmu_fun  # d mu / d eta
        self.weight = weight_fun  # Fisher weight 1/(g'(mu)^2 V(mu))
        self.deviance = dev_fun


def _family_logistic():
    v = lambda mu: mu * (1 - mu)
    return _Family("logistic", _mu_logistic, v, v, _dev_logistic)


def _family_poisson():
    ident = lambda mu: mu
    return _Family("poisson", _mu_log, ident, ident, _dev_poisson)


def _family_negbin(r):
    return _Family(
        "negbin",
        _mu_log,
        lambda mu: mu,
        lambda mu: mu / (1.0 + mu / r),
        lambda y, mu: _dev_negbin(y, mu, r),
    )


# --------------------------------------------------------------- IRLS ----


def _design(Z, n):
    if Z is None:
        return np.ones((n, 1))
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.shape[0] != n:
        raise ValueError(f"Z has {Z.shape[0]} rows, response has {n}")
    return np.column_stack([np.ones(n), Z])


def _penalty_value(beta, penalty, n):
    if penalty is None:
        return 0.0
    kind, lam = penalty
    slope = beta[1:]
    if kind == "l1":
        return 2.0 * n * lam * float(np.sum(np.abs(slope)))
    if kind == "l2":
        return n * lam * float(np.sum(slope ** 2))
    raise ValueError(f"unknown penalty kind {kind!r}")


def _wls_solve(X, w, z, penalty, n):
    XtW = X.T * w
    A = XtW @ X
    b = XtW @ z
    if penalty is not None and penalty[0] == "l2":
        ridge = n * penalty[1] * np.eye(X.shape[1])
        ridge[0, 0] = 0.0
        A = A + ridge
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(A, b, rcond=None)[0]


def _soft(x, t):
    return math.copysign(max(abs(x) - t, 0.0), x)


def _cd_quadratic(X, w, z, beta, lam, n):
    """Coordinate descent on (1/2n) sum w (z - X beta)^2 + lam |beta_1:|_1."""
    p = X.shape[1]
    col_ss = (X * X * w[:, None]).sum(axis=0) / n
    col_ss = np.maximum(col_ss, 1e-12)
    resid = z - X @ beta
    for _ in range(_CD_MAX_SWEEPS):
        max_delta = 0.0
        for j in range(p):
            xj = X[:, j]
            rho = float(xj @ (w * resid)) / n + col_ss[j] * beta[j]
            bj = rho / col_ss[j] if j == 0 else _soft(rho, lam) / col_ss[j]
            delta = bj - beta[j]
            if delta != 0.0:
                resid = resid - xj * delta
                beta[j] = bj
                max_delta = max(max_delta, abs(delta))
        if max_delta < _CD_COEF_TOL:
            break
    return beta


def _irls(X, y, family: _Family, penalty):
    n = len(y)
    beta = np.zeros(X.shape[1])
    ybar = float(np.mean(y))
    if family.name == "logistic":
        beta[0] = math.log((ybar + 1e-8) / (1 - ybar + 1e-8))
    else:
        beta[0] = math.log(max(ybar, 1e-8))
    eta = X @ beta
    mu = family.mu(eta)
    dev = family.deviance(y, mu) + _penalty_value(beta, penalty, n)
    deviances = [dev]
    converged = False
    it = 0
    for it in range(1, _IRLS_MAX_ITER + 1):
        w = np.maximum(family.weight(mu), 1e-10)
        dmu = np.maximum(family.dmu(mu), 1e-10)
        z = eta + (y - mu) / dmu
        if penalty is not None and penalty[0] == "l1":
            beta_new = _cd_quadratic(X, w, z, beta.copy(), penalty[1], n)
        else:
            beta_new = _wls_solve(X, w, z, penalty, n)
        # step-halving keeps the penalized deviance non-increasing
        dev_new = math.inf
        for _ in range(30):
            eta_new = X @ beta_new
            mu_new = family.mu(eta_new)
            dev_new = family.deviance(y, mu_new) + _penalty_value(beta_new, penalty, n)
            if np.isfinite(dev_new) and dev_new <= dev + 1e-10 * (1 + abs(dev)):
                break
            beta_new = 0.5 * (beta_new + beta)
        else:
            break
        beta, eta, mu = beta_new, eta_new, mu_new
        deviances.append(dev_new)
        if abs(dev - dev_new) <= _IRLS_REL_TOL * (abs(dev_new) + _IRLS_REL_TOL):
            converged = True
            dev = dev_new
            break
        dev = dev_new
    diverging = not np.all(np.isfinite(beta)) or np.max(np.abs(X @ beta)) > 300
    return beta, converged and not diverging, it, deviances, mu


def _fit_glm(Z, y, family: _Family, penalty, size=None):
    y = np.asarray(y, dtype=float)
    n = y.size
    if n < 2:
        raise ValueError("need at least 2 observations")
    X = _design(Z, n)
    beta, ok, it, devs, mu = _irls(X, y, family, penalty)
    if not ok and penalty is None:
        # complete separation / divergence: ridge-stabilized fallback,
        # flagged, so downstream tests still get finite means
        beta, _, it2, devs, mu = _irls(X, y, family, ("l2", _STABILIZER_RIDGE))
        it += it2
        ok = False
    return GlmFit(
        coefficients=beta,
        family=family.name,
        converged=ok,
        iterations=it,
        dispersion_size=size,
        penalty=penalty,
        deviances=devs,
        fitted_means=mu,
    )


# ------------------------------------------------------------ fitters ----


def fit_logistic(Z, x, penalty=None) -> GlmFit:
    """Logistic regression of binary x on Z (intercept included).

    penalty: None for the IRLS MLE, ("l1", lam) for coordinate descent on
    the penalized working quadratic, ("l2", lam) for ridge-stabilized IRLS.
    """
    x = np.asarray(x, dtype=float)
    if not np.all((x == 0) | (x == 1)):
        raise ValueError("logistic response must be binary 0/1")
    return _fit_glm(Z, x, _family_logistic(), penalty)


def fit_poisson(Z, y, penalty=None) -> GlmFit:
    """Poisson log-linear regression of counts y on Z."""
    y = np.asarray(y, dtype=float)
    if np.any(y < 0):
        raise ValueError("poisson response must be nonnegative")
    return _fit_glm(Z, y, _family_poisson(), penalty)


def estimate_size_mom(y, fitted_means) -> float:
    """Method-of-moments negative binomial size from Poisson residuals.

    Solves sum((y - mu)^2 - mu) / sum(mu^2) = 1/r, clamped to
    [1e-4, 1e4]; a non-positive moment estimate (underdispersion) maps to
    the upper clamp.
    """
    y = np.asarray(y, dtype=float)
    mu = np.asarray(fitted_means, dtype=float)
    if y.size == 0:
        raise ValueError("empty input")
    if np.any(mu <= 0):
        raise ValueError("fitted means must be positive")
    num = float(np.sum((y - mu) ** 2 - mu))
    den = float(np.sum(mu ** 2))
    if num <= 0.0:
        return SIZE_CLAMP[1]
    return float(np.clip(den / num, *SIZE_CLAMP))


def _negbin_profile_loglik(y, mu, r):
    return float(
        np.sum(
            gammaln(y + r)
            - gammaln(r)
            + r * np.log(r)
            - (r + y) * np.log(r + mu)
            + xlogy(y, mu)
        )
    )


def _newton_log_size(y, mu, r0):
    """Maximize the NB log-likelihood over log r at fixed means."""
    u = math.log(np.clip(r0, 1e-6, 1e8))
    ll = _negbin_profile_loglik(y, mu, math.exp(u))
    for _ in range(50):
        r = math.exp(u)
        dl_dr = float(
            np.sum(digamma(y + r) - digamma(r) + math.log(r) + 1 - np.log(r + mu) - (r + y) / (r + mu))
        )
        d2l_dr2 = float(
            np.sum(
                polygamma(1, y + r)
                - polygamma(1, r)
                + 1.0 / r
                - 2.0 / (r + mu)
                + (r + y) / (r + mu) ** 2
            )
        )
        g = r * dl_dr
        h = r * r * d2l_dr2 + g
        step = -g / h if h < 0 else math.copysign(1.0, g)
        step = float(np.clip(step, -2.0, 2.0))
        u_new = float(np.clip(u + step, math.log(1e-6), math.log(1e8)))
        for _ in range(20):
            ll_new = _negbin_profile_loglik(y, mu, math.exp(u_new))
            if ll_new >= ll - 1e-12:
                break
            u_new = 0.5 * (u_new + u)
        if abs(u_new - u) < 1e-10:
            u, ll = u_new, ll_new
            break
        u, ll = u_new, ll_new
    return math.exp(u)


def fit_negbin(Z, y, size="ml", penalty=None) -> GlmFit:
    """Negative binomial log-linear regression.

    size: a positive float fixes the size parameter; "mom" first fits a
    Poisson model and applies method-of-moments to its residuals; "ml"
    alternates IRLS for the coefficients with 1-D Newton maximization of
    the profile log-likelihood in log(size) until joint convergence.
    """
    y = np.asarray(y, dtype=float)
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise ValueError("negative binomial response must be nonnegative integers")
    if isinstance(size, (int, float)):
        r = float(size)
        if r <= 0:
            raise ValueError("size must be positive")
        return _fit_glm(Z, y, _family_negbin(r), penalty, size=r)
    if size == "mom":
        pois = fit_poisson(Z, y, penalty)
        r = estimate_size_mom(y, np.maximum(pois.fitted_means, 1e-10))
        return _fit_glm(Z, y, _family_negbin(r), penalty, size=r)
    if size != "ml":
        raise ValueError(f"unknown size spec {size!r}")

    pois = fit_poisson(Z, y, penalty)
    if not pois.converged:
        fit = pois
        fit.family = "negbin"
        fit.dispersion_size = SIZE_CLAMP[1]
        return fit
    r = estimate_size_mom(y, np.maximum(pois.fitted_means, 1e-10))
    fit = pois
    for _ in range(50):
        mu = np.maximum(fit.fitted_means, 1e-10)
        r_new = _newton_log_size(y, mu, r)
        fit = _fit_glm(Z, y, _family_negbin(r_new), penalty, size=r_new)
        if abs(math.log(r_new) - math.log(r)) < 1e-8:
            r = r_new
            break
        r = r_new
    return fit


# ------------------------------------------------------------- lasso CV ----


def lasso_path_lambdas(Z, x, n_lambda=50, min_ratio=1e-3):
    """Log-spaced lasso path from lambda_max (all slopes zero) downward."""
    x = np.asarray(x, dtype=float)
    X = _design(Z, x.size)
    mu0 = np.full(x.size, x.mean())
    lam_max = float(np.max(np.abs(X[:, 1:].T @ (x - mu0))) / x.size)
    lam_max = max(lam_max, 1e-10)
    return np.geomspace(lam_max, lam_max * min_ratio, n_lambda)


def fit_logistic_lasso_cv(Z, x, n_folds=10, rule="1se", seed=0, n_lambda=50, min_ratio=1e-3):
    """K-fold cross-validated lasso logistic regression.

    Selects lambda by the "min" rule (smallest mean CV deviance) or the
    "1se" rule (largest lambda within one standard error of the
    minimum), then refits on the full data.  Fold assignment is seeded.
    Returns (fit, info) where info carries the path and CV curves.
    """
    if rule not in ("min", "1se"):
        raise ValueError("rule must be 'min' or '1se'")
    x = np.asarray(x, dtype=float)
    n = x.size
    lambdas = lasso_path_lambdas(Z, x, n_lambda, min_ratio)
    rng = np.random.default_rng(seed)
    folds = rng.permutation(n) % n_folds
    Zarr = np.asarray(Z, dtype=float)
    if Zarr.ndim == 1:
        Zarr = Zarr[:, None]
    cv_dev = np.zeros((n_folds, lambdas.size))
    for k in range(n_folds):
        tr, te = folds != k, folds == k
        for i, lam in enumerate(lambdas):
            fit = fit_logistic(Zarr[tr], x[tr], penalty=("l1", float(lam)))
            mu = predict_mean(fit, Zarr[te])
            cv_dev[k, i] = _dev_logistic(x[te], mu)
    mean_dev = cv_dev.mean(axis=0)
    se_dev = cv_dev.std(axis=0, ddof=1) / math.sqrt(n_folds)
    i_min = int(np.argmin(mean_dev))
    if rule == "min":
        i_sel = i_min
    else:
        ok = mean_dev <= mean_dev[i_min] + se_dev[i_min]
        i_sel = int(np.nonzero(ok)[0][0])  # lambdas descend, first ok is largest
    lam_sel = float(lambdas[i_sel])
    fit = fit_logistic(Zarr, x, penalty=("l1", lam_sel))
    info = {
        "lambdas": lambdas,
        "cv_mean": mean_dev,
        "cv_se": se_dev,
        "lambda_min": float(lambdas[i_min]),
        "lambda_sel": lam_sel,
        "rule": rule,
    }
    return fit, info


# ---------------------------------------------------------------- KRR ----


def _kernel_matrix(kernel, A, B):
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    if B.ndim == 1:
        B = B[:, None]
    if kernel[0] == "linear":
        return A @ B.T
    if kernel[0] == "gaussian":
        h = kernel[1]
        sq = np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :] - 2 * A @ B.T
        return np.exp(-np.maximum(sq, 0.0) / (2.0 * h * h))
    raise ValueError(f"unknown kernel {kernel!r}")


def krr_lambda_objective(eigvals, lam):
    """Selection criterion (1/n) sum kappa_i^2/(kappa_i+lam)^2 + lam."""
    return float(np.mean(eigvals ** 2 / (eigvals + lam) ** 2) + lam)


def fit_krr(Z, y, kernel="linear") -> KrrFit:
    """Kernel ridge regression with data-driven regularization.

    The per-n-scaled kernel matrix K_ij = k(z_i, z_j)/n supplies
    eigenvalues for the selection criterion; lambda is the grid minimizer
    of (1/n) sum kappa_i^2/(kappa_i+lam)^2 + lam over 50 log-spaced
    points spanning [kappa_min + 1e-12, kappa_max].

    The fitted function carries an unpenalized intercept: with H the
    centering projection and G the unscaled Gram matrix, the dual system
    (H G H + n lam I) w = H y is solved (its solution satisfies
    1'w = 0), the intercept is mean(y - G w), and predictions are
    intercept + sum_i w_i k(z, z_i).  A constant response is therefore
    reproduced exactly under any kernel.
    """
    if isinstance(kernel, str):
        kernel = (kernel,)
    y = np.asarray(y, dtype=float)
    n = y.size
    if n < 2:
        raise ValueError("need at least 2 observations")
    Zarr = np.asarray(Z, dtype=float)
    if Zarr.ndim == 1:
        Zarr = Zarr[:, None]
    G = _kernel_matrix(kernel, Zarr, Zarr)
    evals = np.linalg.eigvalsh(G / n)
    evals = np.maximum(evals, 0.0)  # clamp numerically negative modes
    lo = float(evals[0]) + 1e-12
    hi = max(float(evals[-1]), lo * 10)
    grid = np.geomspace(lo, hi, 50)
    lam = float(grid[np.argmin([krr_lambda_objective(evals, g) for g in grid])])
    yc = y - y.mean()
    Gc = G - G.mean(axis=0, keepdims=True) - G.mean(axis=1, keepdims=True) + G.mean()
    w = np.linalg.solve(Gc + n * lam * np.eye(n), yc)
    return KrrFit(
        dual_weights=w,
        training_covariates=Zarr,
        kernel=kernel,
        lam=lam,
        intercept=float(np.mean(y - G @ w)),
    )


# ---------------------------------------------------------- prediction ----


def predict_natural(fit: GlmFit, Z_new) -> np.ndarray:
    """Linear predictor eta; equals theta_x under the canonical link."""
    if not isinstance(fit, GlmFit):
        raise TypeError("predict_natural is defined for GLM fits only")
    Z_new = np.asarray(Z_new, dtype=float)
    if Z_new.ndim == 1:
        Z_new = Z_new[:, None]
    X = _design(Z_new, Z_new.shape[0])
    if X.shape[1] != fit.coefficients.size:
        raise ValueError(
            f"expected {fit.coefficients.size - 1} covariate columns, got {X.shape[1] - 1}"
        )
    return X @ fit.coefficients


def predict_mean(fit, Z_new) -> np.ndarray:
    """Fitted conditional mean on new covariates."""
    if isinstance(fit, GlmFit):
        eta = predict_natural(fit, Z_new)
        if fit.family == "logistic":
            return expit(eta)
        return np.exp(np.minimum(eta, 500.0))
    if isinstance(fit, KrrFit):
        Kx = _kernel_matrix(fit.kernel, np.asarray(Z_new, dtype=float), fit.training_covariates)
        return fit.intercept + Kx @ fit.dual_weights
    raise TypeError(f"unsupported fit type {type(fit)!r}")
