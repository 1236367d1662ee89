"""Natural exponential family primitives.

Bernoulli and Poisson families with natural parameter on the whole real
line: log-partition function A, its derivatives up to fourth order,
sampling, and the centered conditional CGF building block

    K(s) = A(theta + a*s) - A(theta) - a*s*A'(theta),

which is the cumulant generating function of a*(X - A'(theta)) for
X ~ f(. | theta).  All evaluations are overflow-safe for arbitrary
finite natural parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit


class NefFamily(Enum):
    BERNOULLI = "bernoulli"
    POISSON = "poisson"


@dataclass(frozen=True)
class CgfTerm:
    """One summand of an aggregate conditional CGF.

    theta is the per-observation natural parameter, a the residual
    multiplier attached to the resampled draw.
    """

    theta: float
    a: float

    def __post_init__(self):
        if not (np.isfinite(self.theta) and np.isfinite(self.a)):
            raise ValueError("CgfTerm requires finite theta and a")


def _check_finite(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValueError("natural parameter must be finite")
    return theta


def log_partition(family: NefFamily, theta):
    """Log-partition A(theta).

    Bernoulli: log(1 + e^theta), computed as logaddexp(0, theta) so that
    large |theta| never overflows.  Poisson: e^theta.
    """
    theta = _check_finite(theta)
    if family is NefFamily.BERNOULLI:
        return np.logaddexp(0.0, theta)
    return np.exp(theta)


def dA(family: NefFamily, theta, order: int):
    """order-th derivative of the log-partition function.

    Order 1 is the mean, order 2 the variance, order 3 the third central
    moment and order 4 the fourth cumulant of f(. | theta).
    """
    theta = _check_finite(theta)
    if order not in (1, 2, 3, 4):
        raise ValueError(f"unsupported derivative order {order}")
    if family is NefFamily.POISSON:
        return np.exp(theta)
    mu = expit(theta)
    v = mu * (1.0 - mu)
    if order == 1:
        return mu
    if order == 2:
        return v
    if order == 3:
        return v * (1.0 - 2.0 * mu)
    return v * (1.0 - 6.0 * v)


def sample(family: NefFamily, theta, rng: np.random.Generator):
    """Draw from f(. | theta); vectorizes over theta.

    Bernoulli uses inverse-CDF on a single uniform per draw, Poisson the
    generator's native sampler.  The rng is the only mutated state.
    """
    theta = _check_finite(theta)
    if family is NefFamily.BERNOULLI:
        u = rng.random(theta.shape) if theta.shape else rng.random()
        return (u < expit(theta)).astype(float)
    return rng.poisson(np.exp(theta)).astype(float)


def centered_cgf(family: NefFamily, term: CgfTerm, s: float) -> float:
    """Conditional CGF of a*(X - mean) at s for X ~ f(. | theta)."""
    if not np.isfinite(s):
        raise ValueError("s must be finite")
    shifted = term.theta + term.a * s
    return float(
        log_partition(family, shifted)
        - log_partition(family, term.theta)
        - term.a * s * dA(family, term.theta, 1)
    )
