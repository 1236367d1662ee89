"""Multinomial hidden Markov model over discrete sequences.

Supplies what the conditional randomization machinery needs when the
covariates are the remaining sites of an HMM draw: sampling, scaled
forward/backward recursions, the single-site conditional law
p(x_j | x_-j), its mean and CGF derivatives, and the tower construction
for leave-one-site-out outcome regressions.

The forward table A_j(u) = P[x_{1:j-1}, U_j = u] and backward table
B_j(u) = P[x_{j+1:p} | U_j = u] are kept normalized per site with
separate log-scale accumulators; the raw recursions underflow by a few
hundred sites, the scaled ones are good for 1e4+ sites.  Scales cancel
in every conditional, so only the log-probability helpers consult them.

Sites are indexed 0-based throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ZeroSupportError(ValueError):
    """The conditioning event has probability zero under the model."""


@dataclass(frozen=True)
class Hmm:
    """Model parameters: initial law (K,), transitions (K, K) shared or
    (p-1, K, K) per gap, emissions (K, M) shared or (p, K, M) per site."""

    initial: np.ndarray
    transitions: np.ndarray
    emissions: np.ndarray
    n_sites: int

    def __post_init__(self):
        q = np.asarray(self.initial, dtype=float)
        Q = np.asarray(self.transitions, dtype=float)
        e = np.asarray(self.emissions, dtype=float)
        p = int(self.n_sites)
        if p < 1 or q.ndim != 1:
            raise ValueError("need n_sites >= 1 and a 1-d initial law")
        K = q.size
        if Q.ndim == 2:
            ok_q = Q.shape == (K, K)
        else:
            ok_q = Q.shape == (max(p - 1, 1), K, K) or (p == 1 and Q.shape[-2:] == (K, K))
        if not ok_q:
            raise ValueError("transitions must be (K,K) or (p-1,K,K)")
        if e.ndim == 2:
            ok_e = e.shape[0] == K
        else:
            ok_e = e.shape[0] == p and e.shape[1] == K
        if not ok_e:
            raise ValueError("emissions must be (K,M) or (p,K,M)")
        for arr, axis, what in ((q, 0, "initial"), (Q, -1, "transition rows"), (e, -1, "emission rows")):
            if np.any(arr < 0):
                raise ValueError(f"{what} must be nonnegative")
            if np.max(np.abs(arr.sum(axis=axis) - 1.0)) > 1e-12:
                raise ValueError(f"{what} must sum to 1 within 1e-12")
        object.__setattr__(self, "initial", q)
        object.__setattr__(self, "transitions", Q)
        object.__setattr__(self, "emissions", e)
        object.__setattr__(self, "n_sites", p)

    @property
    def n_states(self) -> int:
        return self.initial.size

    @property
    def alphabet_size(self) -> int:
        return self.emissions.shape[-1]

    def transition_at(self, gap: int) -> np.ndarray:
        """Transition matrix from site `gap` to site `gap + 1`."""
        return self.transitions if self.transitions.ndim == 2 else self.transitions[gap]

    def emission_at(self, site: int) -> np.ndarray:
        return self.emissions if self.emissions.ndim == 2 else self.emissions[site]


@dataclass(frozen=True)
class SiteConditional:
    """Law of X_j given X_-j: probs[v] = p(v, x_-j) over the alphabet."""

    probs: np.ndarray
    site: int

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-10:
            raise ValueError("conditional probabilities must be a distribution")
        object.__setattr__(self, "probs", probs)


def make_gwas_hmm(n_states, n_sites, stay_prob, emission_alpha, emission_beta, rng,
                  alphabet_size=2) -> Hmm:
    """Chain-structured model for genotype simulations: the latent state
    stays with probability stay_prob or advances by one (the last state
    is absorbing); uniform initial law; per-state success probabilities
    drawn Beta(alpha, beta) for the binary emission alphabet."""
    if alphabet_size != 2:
        raise ValueError("the beta-emission generator is binary")
    K = n_states
    Q = np.zeros((K, K))
    for k in range(K - 1):
        Q[k, k] = stay_prob
        Q[k, k + 1] = 1.0 - stay_prob
    Q[K - 1, K - 1] = 1.0
    succ = rng.beta(emission_alpha, emission_beta, size=K)
    e = np.column_stack([1.0 - succ, succ])
    return Hmm(initial=np.full(K, 1.0 / K), transitions=Q, emissions=e, n_sites=n_sites)


# ------------------------------------------------------------- sampling ----


def sample(hmm: Hmm, n: int, rng: np.random.Generator) -> np.ndarray:
    """n independent sequences, shape (n, p), alphabet-coded integers."""
    K, p = hmm.n_states, hmm.n_sites
    out = np.empty((n, p), dtype=np.int64)
    state = rng.choice(K, size=n, p=hmm.initial)
    for j in range(p):
        e = hmm.emission_at(j)
        cum_e = np.cumsum(e, axis=1)
        out[:, j] = (rng.random(n)[:, None] > cum_e[state]).sum(axis=1)
        if j < p - 1:
            cum_q = np.cumsum(hmm.transition_at(j), axis=1)
            state = (rng.random(n)[:, None] > cum_q[state]).sum(axis=1)
    return out


# ------------------------------------------------- forward / backward ----


def _forward_backward(hmm: Hmm, x: np.ndarray):
    """Scaled tables: ahat[j] proportional to A_j(.), bhat[j] to B_j(.),
    each summing to 1 (or identically zero past a dead prefix/suffix),
    with log-scale accumulators so probabilities can be reassembled."""
    K, p = hmm.n_states, hmm.n_sites
    ahat = np.zeros((p, K))
    bhat = np.zeros((p, K))
    alog = np.full(p, -np.inf)
    blog = np.full(p, -np.inf)

    v = hmm.initial.copy()
    scale = 0.0
    ahat[0], alog[0] = v, scale
    dead = False
    for j in range(1, p):
        if not dead:
            v = (ahat[j - 1] * hmm.emission_at(j - 1)[:, x[j - 1]]) @ hmm.transition_at(j - 1)
            norm = v.sum()
            if norm <= 0.0:
                dead = True
            else:
                scale += np.log(norm)
                ahat[j], alog[j] = v / norm, scale

    v = np.ones(K)
    bhat[p - 1], blog[p - 1] = v / K, np.log(K)
    scale = np.log(K)
    dead = False
    for j in range(p - 2, -1, -1):
        if not dead:
            v = hmm.transition_at(j) @ (hmm.emission_at(j + 1)[:, x[j + 1]] * bhat[j + 1])
            norm = v.sum()
            if norm <= 0.0:
                dead = True
            else:
                scale += np.log(norm)
                bhat[j], blog[j] = v / norm, scale
    return ahat, alog, bhat, blog


def conditional_site_law(hmm: Hmm, x, j: int) -> SiteConditional:
    """Full conditional distribution of X_j given X_-j = x_-j."""
    x = np.asarray(x, dtype=np.int64)
    if x.shape != (hmm.n_sites,):
        raise ValueError("x must be a full-length site vector")
    if not (0 <= j < hmm.n_sites):
        raise ValueError("site index out of range")
    ahat, _, bhat, _ = _forward_backward(hmm, x)
    post = ahat[j] * bhat[j]
    total = post.sum()
    if total <= 0.0:
        raise ZeroSupportError(f"x_-{j} has probability zero under the model")
    num = hmm.emission_at(j).T @ post  # (M,)
    return SiteConditional(probs=num / num.sum(), site=j)


def conditional_all_sites(hmm: Hmm, x) -> np.ndarray:
    """(p, M) matrix of single-site conditionals from one table pass."""
    x = np.asarray(x, dtype=np.int64)
    ahat, _, bhat, _ = _forward_backward(hmm, x)
    out = np.empty((hmm.n_sites, hmm.alphabet_size))
    for j in range(hmm.n_sites):
        post = ahat[j] * bhat[j]
        total = post.sum()
        if total <= 0.0:
            raise ZeroSupportError(f"x_-{j} has probability zero under the model")
        num = hmm.emission_at(j).T @ post
        out[j] = num / num.sum()
    return out


def conditional_laws_matrix(hmm: Hmm, X) -> np.ndarray:
    """Single-site conditionals for every row: (n, p, M).

    Vectorizes the forward/backward recursions across rows; each site
    step is one (n, K) x (K, K) product, so the whole table costs
    O(n p K^2) flops rather than n separate recursions.
    """
    X = np.asarray(X, dtype=np.int64)
    n, p = X.shape
    if p != hmm.n_sites:
        raise ValueError("X column count must equal n_sites")
    K = hmm.n_states
    A = np.empty((p, n, K))
    B = np.empty((p, n, K))
    A[0] = np.broadcast_to(hmm.initial, (n, K))
    for j in range(1, p):
        e = hmm.emission_at(j - 1)
        v = (A[j - 1] * e[:, X[:, j - 1]].T) @ hmm.transition_at(j - 1)
        norm = v.sum(axis=1, keepdims=True)
        if np.any(norm <= 0.0):
            raise ZeroSupportError("a row's prefix has probability zero under the model")
        A[j] = v / norm
    B[p - 1] = 1.0 / K
    for j in range(p - 2, -1, -1):
        e = hmm.emission_at(j + 1)
        v = (B[j + 1] * e[:, X[:, j + 1]].T) @ hmm.transition_at(j).T
        norm = v.sum(axis=1, keepdims=True)
        if np.any(norm <= 0.0):
            raise ZeroSupportError("a row's suffix has probability zero under the model")
        B[j] = v / norm
    out = np.empty((n, p, hmm.alphabet_size))
    for j in range(p):
        post = A[j] * B[j]
        total = post.sum(axis=1)
        if np.any(total <= 0.0):
            raise ZeroSupportError("a row's context has probability zero under the model")
        num = post @ hmm.emission_at(j)
        out[:, j, :] = num / num.sum(axis=1, keepdims=True)
    return out


def conditional_mean(hmm: Hmm, x, j: int) -> float:
    """E[X_j | X_-j = x_-j] = sum_v v p(v, x_-j)."""
    law = conditional_site_law(hmm, x, j)
    return float(np.arange(hmm.alphabet_size) @ law.probs)


def conditional_ccgf(hmm: Hmm, x, j: int, t: float, order: int) -> float:
    """Conditional CGF of X_j given x_-j and its first two derivatives.

    With D(t) = sum_v e^{tv} p(v, x_-j): order 0 is log D, order 1 is
    D'/D, order 2 is D''/D - (D'/D)^2.
    """
    if order not in (0, 1, 2):
        raise ValueError("order must be 0, 1 or 2")
    if not np.isfinite(t):
        raise ValueError("t must be finite")
    probs = conditional_site_law(hmm, x, j).probs
    v = np.arange(hmm.alphabet_size)
    ew = np.exp(t * v) * probs
    d0 = ew.sum()
    if order == 0:
        return float(np.log(d0))
    d1 = (v * ew).sum()
    if order == 1:
        return float(d1 / d0)
    d2 = (v * v * ew).sum()
    return float(d2 / d0 - (d1 / d0) ** 2)


def tower_mu_y(x_matrix, j: int, f_hat, conditionals) -> np.ndarray:
    """Leave-one-site-out regression by the tower identity.

    For each row x: sum_v f_hat(x with x_j := v) * p(v | x_-j), i.e. the
    estimate of E[Y | X_-j] obtained from one full regression f_hat plus
    the site-j conditional law.  f_hat maps an (m, p) array of sequences
    to a length-m vector; `conditionals` is an (n, M) array (or list of
    SiteConditional) of site-j conditional probabilities per row.
    """
    X = np.asarray(x_matrix)
    if isinstance(conditionals, np.ndarray):
        cond = conditionals
    else:
        cond = np.stack([c.probs for c in conditionals])
    n, p = X.shape
    if cond.shape[0] != n:
        raise ValueError("conditionals must align with the rows of x_matrix")
    M = cond.shape[1]
    out = np.zeros(n, dtype=float)
    for v in range(M):
        Xv = X.copy()
        Xv[:, j] = v
        out += np.asarray(f_hat(Xv), dtype=float) * cond[:, v]
    return out


def sequence_log_prob(hmm: Hmm, x, direction: str = "forward") -> float:
    """log P(X = x), accumulated by either recursion direction."""
    x = np.asarray(x, dtype=np.int64)
    K, p = hmm.n_states, hmm.n_sites
    if direction == "forward":
        v = hmm.initial.copy()
        total = 0.0
        for j in range(p):
            v = v * hmm.emission_at(j)[:, x[j]]
            norm = v.sum()
            if norm <= 0.0:
                return -np.inf
            total += np.log(norm)
            v = v / norm
            if j < p - 1:
                v = v @ hmm.transition_at(j)
        return float(total)
    if direction == "backward":
        v = hmm.emission_at(p - 1)[:, x[p - 1]]
        total = 0.0
        for j in range(p - 2, -1, -1):
            norm = v.sum()
            if norm <= 0.0:
                return -np.inf
            total += np.log(norm)
            v = hmm.emission_at(j)[:, x[j]] * (hmm.transition_at(j) @ (v / norm))
        norm = float(hmm.initial @ v)
        if norm <= 0.0:
            return -np.inf
        return float(total + np.log(norm))
    raise ValueError("direction must be 'forward' or 'backward'")
