"""Independent reference computations shared by the test modules.

Everything here is deliberately brute-force (enumeration, naive loops,
closed forms) and never calls back into the code paths under test.
"""

import numpy as np


def hmm_path_conditional(hmm, x, j):
    """p(v, x_-j) for all v by summing over all K^p latent paths."""
    K, p, M = hmm.n_states, hmm.n_sites, hmm.alphabet_size
    paths = np.indices((K,) * p).reshape(p, -1).T
    prob = hmm.initial[paths[:, 0]].copy()
    for t in range(1, p):
        prob *= hmm.transition_at(t - 1)[paths[:, t - 1], paths[:, t]]
    emis = np.empty((paths.shape[0], p))
    for t in range(p):
        emis[:, t] = hmm.emission_at(t)[paths[:, t], x[t]]
    left = np.ones_like(emis)
    right = np.ones_like(emis)
    left[:, 1:] = np.cumprod(emis[:, :-1], axis=1)
    right[:, :-1] = np.cumprod(emis[:, :0:-1], axis=1)[:, ::-1]
    joint = np.empty(M)
    for v in range(M):
        ev = hmm.emission_at(j)[paths[:, j], v]
        joint[v] = float(np.sum(prob * left[:, j] * right[:, j] * ev))
    return joint / joint.sum()


def hmm_path_joint(hmm, x):
    """P(X = x) by full latent-path enumeration."""
    K, p = hmm.n_states, hmm.n_sites
    paths = np.indices((K,) * p).reshape(p, -1).T
    prob = hmm.initial[paths[:, 0]].copy()
    for t in range(1, p):
        prob *= hmm.transition_at(t - 1)[paths[:, t - 1], paths[:, t]]
    for t in range(p):
        prob = prob * hmm.emission_at(t)[paths[:, t], x[t]]
    return float(prob.sum())


def bernoulli_outcomes(n):
    """All 2^n binary vectors as an (2^n, n) float array."""
    return ((np.arange(2 ** n)[:, None] >> np.arange(n)) & 1).astype(float)


def heterogeneous_tail(theta, a, w):
    """Exact P[(1/n) sum a_i (X_i - mu_i) >= w] over all 2^n outcomes."""
    from scipy.special import expit

    n = len(theta)
    mu = expit(np.asarray(theta, float))
    outs = bernoulli_outcomes(n)
    logp = outs @ np.log(mu) + (1 - outs) @ np.log(1 - mu)
    stats = (outs - mu) @ np.asarray(a, float) / n
    return float(np.exp(logp)[stats >= w].sum())


def signflip_tail_count(x, w):
    """Exact P[mean(s x) >= w] over all 2^n sign vectors."""
    n = len(x)
    signs = 1 - 2 * bernoulli_outcomes(n)
    vals = signs @ np.asarray(x, float) / n
    return float(np.mean(vals >= w - 1e-15 * max(1.0, abs(w))))


def naive_bh_reject(p, q):
    """Step-up rule by direct scan."""
    p = np.asarray(p, float)
    m = p.size
    order = np.argsort(p)
    k_star = 0
    for i, idx in enumerate(order, start=1):
        if p[idx] <= q * i / m:
            k_star = i
    reject = np.zeros(m, dtype=bool)
    reject[order[:k_star]] = True
    return reject


def naive_bonferroni_reject(p, alpha):
    p = np.asarray(p, float)
    return np.array([pi <= alpha / p.size for pi in p])
