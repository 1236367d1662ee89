"""Simulation harness: data generators for the perturbation-screen and
genotype-panel scenarios, multiple-testing corrections, the effective
sample size, and replication drivers collecting p-values, rejection
rates, timing and fallback rates.

Reproducibility contract: every generator takes an explicit seeded rng
(or derives one from the scenario seed); replication drivers derive the
replicate-k rng as default_rng(seed ^ k), so reruns are bit-identical
and replicates never share a stream.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import glm, hmm as hmm_mod
from .citest import (
    Dataset,
    FittedConditionals,
    Method,
    dcrt,
    fit_conditionals,
    gcm,
    score_test_nb,
    spacrt,
)
from .nef import NefFamily

DEFAULT_ALPHA_GRID = (0.05, 0.005)


@dataclass(frozen=True)
class CrisprParams:
    """Perturbation-screen generator: Z ~ N(0,1), X|Z logistic with
    intercept gamma0, Y|X,Z negative binomial with log-mean
    beta0 + rho X + Z and size parameter `size`."""

    gamma0: float = -5.0
    beta0: float = -5.0
    rho: float = 0.0
    size: float = 1.0
    n: int = 5000
    seed: int = 0

    def __post_init__(self):
        if not (self.size > 0 and self.n >= 1):
            raise ValueError("need size > 0 and n >= 1")


@dataclass(frozen=True)
class GwasParams:
    """Genotype-panel generator: X from a chain HMM with beta-prior
    emissions, Y|X logistic with the first 5% of coefficients at +eta,
    the next 5% at -eta, the rest zero."""

    d: int = 500
    n: int = 2000
    n_states: int = 10
    stay_prob: float = 0.9
    emission_alpha: float = 1.0
    emission_beta: float = 3.0
    gamma0: float = -3.0
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.d < 1 or self.n < 1:
            raise ValueError("need d >= 1 and n >= 1")

    def signal_pattern(self) -> np.ndarray:
        k = int(0.05 * self.d)
        beta = np.zeros(self.d)
        beta[:k] = self.eta
        beta[k : 2 * k] = -self.eta
        return beta


def simulate_crispr(params: CrisprParams, rng: np.random.Generator | None = None) -> Dataset:
    """One draw of the perturbation-screen model.

    The negative binomial arises as a Gamma-Poisson mixture: the rate is
    Gamma(shape=size, mean=mu), then Y ~ Poisson(rate), which gives
    Var(Y) = mu + mu^2 / size.
    """
    rng = np.random.default_rng(params.seed) if rng is None else rng
    n = params.n
    z = rng.normal(0.0, 1.0, n)
    x = (rng.random(n) < expit(params.gamma0 + z)).astype(float)
    mu = np.exp(params.beta0 + params.rho * x + z)
    lam = rng.gamma(shape=params.size, scale=mu / params.size)
    y = rng.poisson(lam).astype(float)
    return Dataset(x=x, y=y, z=z)


def simulate_gwas(params: GwasParams, rng: np.random.Generator | None = None):
    """One draw of the genotype-panel model: (X: (n, d) binary, y)."""
    rng = np.random.default_rng(params.seed) if rng is None else rng
    model = hmm_mod.make_gwas_hmm(
        params.n_states, params.d, params.stay_prob, params.emission_alpha, params.emission_beta, rng
    )
    X = hmm_mod.sample(model, params.n, rng)
    beta = params.signal_pattern()
    y = (rng.random(params.n) < expit(params.gamma0 + X @ beta)).astype(float)
    return X, y, model


# ----------------------------------------------------- multiple testing ----


@dataclass(frozen=True)
class BhResult:
    reject: np.ndarray
    adjusted: np.ndarray


def bh_adjust(p, q: float) -> BhResult:
    """Benjamini-Hochberg step-up rule at level q, plus adjusted
    p-values (cumulative minima of m p_(i) / i from the largest down)."""
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or np.any(p < 0) or np.any(p > 1):
        raise ValueError("p must be a vector of probabilities")
    m = p.size
    order = np.argsort(p, kind="stable")
    ranked = p[order]
    adj = np.minimum.accumulate((m * ranked / np.arange(1, m + 1))[::-1])[::-1]
    adj = np.minimum(adj, 1.0)
    adjusted = np.empty(m)
    adjusted[order] = adj
    passing = np.nonzero(ranked <= q * np.arange(1, m + 1) / m)[0]
    reject = np.zeros(m, dtype=bool)
    if passing.size:
        reject[order[: passing[-1] + 1]] = True
    return BhResult(reject=reject, adjusted=adjusted)


def bonferroni_adjust(p, alpha: float) -> np.ndarray:
    """Reject i iff p_i <= alpha / m."""
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or np.any(p < 0) or np.any(p > 1):
        raise ValueError("p must be a vector of probabilities")
    return p <= alpha / p.size


def effective_sample_size(x, y) -> int:
    """Number of observations with x_i * y_i > 0."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError("x and y must have equal length")
    return int(np.sum(x * y > 0))


# ---------------------------------------------------------- replications ----


@dataclass
class ReplicationReport:
    methods: list[str]
    alpha_grid: tuple
    n_reps: int
    p_values: dict  # method -> {"left"|"right"|"two": np.ndarray}
    rejection: dict  # method -> side -> {alpha: (rate, se)}
    mean_time: dict  # method -> seconds per test
    fit_time: float
    fallback_rate: float
    n_failed: int
    failures: list = field(default_factory=list)

    def rejection_rate(self, method: str, side: str, alpha: float):
        return self.rejection[method][side][alpha]


_SIDES = ("left", "right", "two")


def _outcome_sides(out):
    return {"left": out.p_left, "right": out.p_right, "two": out.p_two}


def run_replications(
    scenario: CrisprParams,
    methods,
    n_reps: int,
    alpha_grid=DEFAULT_ALPHA_GRID,
    parallelism: int = 1,
    dcrt_m: int = 10000,
    y_model: str = "negbin-mom",
) -> ReplicationReport:
    """Replicated single-hypothesis runs of the perturbation-screen
    scenario.

    Replicate k is generated and tested with default_rng(seed ^ k); the
    conditional fits are shared by spacrt/dcrt/gcm, while the score test
    refits its own null model.  Individual replicate failures are
    recorded and skipped, never fatal.  `parallelism` is accepted for
    API symmetry; replicates run sequentially when it is 1.
    """
    methods = [m if isinstance(m, str) else m.value for m in methods]
    per_method = {m: {s: [] for s in _SIDES} for m in methods}
    times = {m: 0.0 for m in methods}
    fit_time = 0.0
    fallbacks = 0
    spa_total = 0
    failures = []

    def one_rep(k):
        rng = np.random.default_rng(scenario.seed ^ k)
        data = simulate_crispr(scenario, rng)
        shared = None
        t0 = time.perf_counter()
        if any(m in ("spacrt", "dcrt", "gcm") for m in methods):
            shared = fit_conditionals(data, y_model=y_model)
        fit_elapsed = time.perf_counter() - t0
        outs = {}
        for m in methods:
            if m == "spacrt":
                outs[m] = spacrt(data, shared)
            elif m == "dcrt":
                outs[m] = dcrt(data, shared, M=dcrt_m, rng=rng)
            elif m == "gcm":
                outs[m] = gcm(data, shared)
            elif m == "score_nb":
                outs[m] = score_test_nb(data)
            else:
                raise ValueError(f"unknown method {m!r}")
        return fit_elapsed, outs

    if parallelism > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(_rep_worker, [(scenario, methods, dcrt_m, y_model, k) for k in range(n_reps)]))
    else:
        results = []
        for k in range(n_reps):
            try:
                results.append(one_rep(k))
            except Exception as exc:  # record, do not abort the study
                results.append(("failed", repr(exc), k))

    for res in results:
        if res[0] == "failed":
            failures.append((res[2], res[1]))
            continue
        fit_elapsed, outs = res
        fit_time += fit_elapsed
        for m, out in outs.items():
            sides = _outcome_sides(out)
            for s in _SIDES:
                per_method[m][s].append(sides[s])
            times[m] += out.elapsed
            if m == "spacrt":
                spa_total += 1
                fallbacks += out.fallback_used

    n_ok = n_reps - len(failures)
    p_values = {m: {s: np.asarray(v) for s, v in d.items()} for m, d in per_method.items()}
    rejection = {}
    for m in methods:
        rejection[m] = {}
        for s in _SIDES:
            pv = p_values[m][s]
            rejection[m][s] = {}
            for alpha in alpha_grid:
                rate = float(np.mean(pv <= alpha)) if pv.size else float("nan")
                se = float(np.sqrt(rate * (1 - rate) / pv.size)) if pv.size else float("nan")
                rejection[m][s][alpha] = (rate, se)
    return ReplicationReport(
        methods=methods,
        alpha_grid=tuple(alpha_grid),
        n_reps=n_reps,
        p_values=p_values,
        rejection=rejection,
        mean_time={m: (times[m] / n_ok if n_ok else float("nan")) for m in methods},
        fit_time=fit_time / n_ok if n_ok else float("nan"),
        fallback_rate=(fallbacks / spa_total) if spa_total else 0.0,
        n_failed=len(failures),
        failures=failures,
    )


def _rep_worker(args):
    scenario, methods, dcrt_m, y_model, k = args
    try:
        rng = np.random.default_rng(scenario.seed ^ k)
        data = simulate_crispr(scenario, rng)
        t0 = time.perf_counter()
        shared = fit_conditionals(data, y_model=y_model)
        fit_elapsed = time.perf_counter() - t0
        outs = {}
        for m in methods:
            if m == "spacrt":
                outs[m] = spacrt(data, shared)
            elif m == "dcrt":
                outs[m] = dcrt(data, shared, M=dcrt_m, rng=rng)
            elif m == "gcm":
                outs[m] = gcm(data, shared)
            elif m == "score_nb":
                outs[m] = score_test_nb(data)
        return fit_elapsed, outs
    except Exception as exc:
        return ("failed", repr(exc), k)


# ------------------------------------------------------------- GWAS runs ----


@dataclass
class GwasReplicationReport:
    methods: list[str]
    q: float
    n_reps: int
    fdr: dict  # method -> np.ndarray of per-replicate FDP
    power: dict  # method -> np.ndarray of per-replicate TPR
    mean_time: dict
    fallback_rate: float


def run_gwas_replications(
    params: GwasParams,
    methods,
    n_reps: int,
    q: float = 0.1,
    dcrt_m: int = 5000,
    lasso_rule: str = "1se",
    lasso_folds: int = 10,
) -> GwasReplicationReport:
    """Site-by-site CI testing over replicated genotype panels.

    The generating HMM parameters act as the known covariate model; the
    outcome regression is one lasso-penalized logistic fit per
    replicate, turned into per-site leave-one-out means by the tower
    construction.  p-values are BH-corrected at level q; FDP and TPR are
    measured against the planted signal pattern.
    """
    methods = [m if isinstance(m, str) else m.value for m in methods]
    fdr = {m: [] for m in methods}
    power = {m: [] for m in methods}
    times = {m: 0.0 for m in methods}
    fallbacks = 0
    spa_total = 0
    truth = params.signal_pattern() != 0

    for k in range(n_reps):
        rng = np.random.default_rng(params.seed ^ k)
        X, y, model = simulate_gwas(params, rng)
        cond = hmm_mod.conditional_laws_matrix(model, X)
        lasso, _ = glm.fit_logistic_lasso_cv(
            X.astype(float), y, n_folds=lasso_folds, rule=lasso_rule, seed=int(rng.integers(2 ** 31))
        )
        f_hat = lambda A: glm.predict_mean(lasso, A.astype(float))
        pvals = {m: np.empty(params.d) for m in methods}
        for j in range(params.d):
            mu_x = cond[:, j, 1]
            mu_x = np.clip(mu_x, 1e-12, 1 - 1e-12)
            theta_x = np.log(mu_x / (1 - mu_x))
            mu_y = hmm_mod.tower_mu_y(X, j, f_hat, cond[:, j, :])
            fits = FittedConditionals.from_theta(theta_x, mu_y, NefFamily.BERNOULLI)
            data = Dataset(x=X[:, j].astype(float), y=y, z=np.delete(X, j, axis=1).astype(float))
            for m in methods:
                t0 = time.perf_counter()
                if m == "spacrt":
                    out = spacrt(data, fits)
                    spa_total += 1
                    fallbacks += out.fallback_used
                elif m == "dcrt":
                    out = dcrt(data, fits, M=dcrt_m, rng=rng)
                elif m == "gcm":
                    out = gcm(data, fits)
                else:
                    raise ValueError(f"unknown method {m!r}")
                times[m] += time.perf_counter() - t0
                pvals[m][j] = out.p_two
        for m in methods:
            rej = bh_adjust(pvals[m], q).reject
            n_rej = int(rej.sum())
            false = int((rej & ~truth).sum())
            fdr[m].append(false / max(n_rej, 1))
            power[m].append(float((rej & truth).sum() / max(truth.sum(), 1)))

    return GwasReplicationReport(
        methods=methods,
        q=q,
        n_reps=n_reps,
        fdr={m: np.asarray(v) for m, v in fdr.items()},
        power={m: np.asarray(v) for m, v in power.items()},
        mean_time={m: times[m] / (n_reps * params.d) for m in methods},
        fallback_rate=(fallbacks / spa_total) if spa_total else 0.0,
    )
