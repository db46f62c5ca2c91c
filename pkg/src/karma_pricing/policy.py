"""Squashed linear pricing policy and its Gaussian moments."""
from __future__ import annotations

from dataclasses import dataclass

import jax.numpy as jnp
import numpy as np

from .network import NetworkConfig

# (coefficient, frequency) pairs of the squashing Fourier series
SQUASH_TERMS = ((9.0 / 8.0, 1.0), (1.0 / 8.0, 3.0))


@dataclass(frozen=True)
class PolicyParams:
    """Linear feedback ``A s + b`` squashed and scaled to ``[-amplitude, amplitude]``."""

    A: np.ndarray
    b: np.ndarray
    amplitude: float

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.asarray(self.b, dtype=float).reshape(-1)
        if A.shape[0] != b.shape[0]:
            raise ValueError(f"A has {A.shape[0]} rows but b has {b.shape[0]} entries")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "amplitude", float(self.amplitude))

    @property
    def n_actions(self) -> int:
        return self.b.shape[0]

    @property
    def n_states(self) -> int:
        return self.A.shape[1]

    @classmethod
    def zeros(cls, n_arcs: int, amplitude: float) -> "PolicyParams":
        return cls(np.zeros((n_arcs, n_arcs + 2)), np.zeros(n_arcs), amplitude)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.A.ravel(), self.b])

    def with_flat(self, theta) -> "PolicyParams":
        theta = np.asarray(theta, dtype=float)
        k = self.A.size
        return PolicyParams(theta[:k].reshape(self.A.shape), theta[k:], self.amplitude)


def squash(u):
    """Trapezoidal-wave squashing ``9/8 sin(u) + 1/8 sin(3u)``, bounded by 1."""
    return sum(c * np.sin(w * np.asarray(u, dtype=float)) for c, w in SQUASH_TERMS)


def evaluate(params: PolicyParams, s) -> np.ndarray:
    """Pre-constraint prices for an observed state vector ``(x, K_mean, K_std)``."""
    s = np.asarray(s, dtype=float)
    return params.amplitude * squash(params.A @ s + params.b)


def action_moments(A, b, amplitude, mean, cov):
    """Exact mean/covariance of ``amplitude * squash(A s + b)`` for Gaussian ``s``.

    Returns ``(mean_a, cov_a, cov_sa)`` where ``cov_sa`` is the state-action
    cross-covariance of shape ``(state_dim, n_actions)``. Written with
    ``jax.numpy`` so that it can be differentiated.
    """
    mu = A @ mean + b
    cov_su = cov @ A.T
    S = A @ cov_su
    var = jnp.diag(S)

    m = 0.0
    c_sa = 0.0
    for c, w in SQUASH_TERMS:
        decay = jnp.exp(-0.5 * w**2 * var)
        m = m + c * decay * jnp.sin(w * mu)
        # Stein's lemma: cov(s, g(u)) = cov(s, u) E[g'(u)]
        c_sa = c_sa + cov_su * (c * w * decay * jnp.cos(w * mu))[None, :]

    # E[sin(a) sin(b)] = (E cos(a - b) - E cos(a + b)) / 2
    second = 0.0
    for ci, wi in SQUASH_TERMS:
        for cj, wj in SQUASH_TERMS:
            var_i = wi**2 * var
            var_j = wj**2 * var
            cross = wi * wj * S
            minus = jnp.exp(-0.5 * (var_i[:, None] + var_j[None, :] - 2 * cross)) * jnp.cos(
                wi * mu[:, None] - wj * mu[None, :]
            )
            plus = jnp.exp(-0.5 * (var_i[:, None] + var_j[None, :] + 2 * cross)) * jnp.cos(
                wi * mu[:, None] + wj * mu[None, :]
            )
            second = second + ci * cj * 0.5 * (minus - plus)
    cov_a = second - jnp.outer(m, m)
    cov_a = 0.5 * (cov_a + cov_a.T)
    return amplitude * m, amplitude**2 * cov_a, amplitude * c_sa


def evaluate_distribution(params: PolicyParams, mean, cov):
    """Gaussian moments of the pre-constraint prices under a Gaussian state belief."""
    m, c, csa = action_moments(
        jnp.asarray(params.A), jnp.asarray(params.b), params.amplitude,
        jnp.asarray(mean, dtype=float), jnp.asarray(cov, dtype=float),
    )
    return np.asarray(m), np.asarray(c), np.asarray(csa)


def softplus(v):
    return np.logaddexp(0.0, v)


def constrain_prices(p_raw, order=None) -> np.ndarray:
    """Force a non-negative price on the most comfortable arc and a
    non-positive one on the least comfortable arc.

    ``order`` lists arcs from most to least comfortable; defaults to index order.
    Middle arcs pass through unchanged.
    """
    p = np.array(p_raw, dtype=float)
    if order is None:
        first, last = 0, p.size - 1
    else:
        first, last = int(order[0]), int(order[-1])
    if p.size == 1:
        # a single arc is both most and least comfortable; keep it free
        return np.zeros(1)
    p[first] = softplus(p[first])
    p[last] = -softplus(-p[last])
    return p


def initial_pseudo_random(config: NetworkConfig, rng: np.random.Generator) -> np.ndarray:
    """Uniform prices assigned in descending order of arc comfort."""
    draws = np.sort(rng.uniform(config.p_min, config.p_max, size=config.n))[::-1]
    p = np.empty(config.n)
    p[config.comfort_order()] = draws
    return p
