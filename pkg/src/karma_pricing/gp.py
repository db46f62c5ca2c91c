"""Squared-exponential GP dynamics model with moment-matching prediction.

One independent GP per output dimension. Inputs are standardized and
targets rescaled by their root-mean-square internally; every public
function takes and returns raw units.

Moment matching follows the closed forms of Deisenroth (2010), "Efficient
reinforcement learning using Gaussian processes", ch. 2.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np
from scipy.optimize import minimize


logger = logging.getLogger(__name__)

JITTER = 1e-10
NOISE_FLOOR = 1e-6
PAD_BUCKET = 16

LOG_ELL_BOUNDS = (np.log(1e-2), np.log(1e3))
LOG_SF2_BOUNDS = (np.log(1e-10), np.log(1e3))
CURB_LS = 100.0
CURB_SNR = 500.0
CURB_POWER = 30


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=float).reshape(-1)
        c = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if c.shape != (m.size, m.size):
            raise ValueError(f"covariance shape {c.shape} does not match mean of size {m.size}")
        scale = max(1.0, float(np.abs(c).max(initial=0.0)))
        if np.abs(c - c.T).max(initial=0.0) > 1e-12 * scale:
            raise ValueError("covariance is not symmetric")
        if m.size and np.linalg.eigvalsh(c).min() < -1e-10 * scale:
            raise ValueError("covariance is not positive semi-definite")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", c)


@dataclass(frozen=True)
class TransitionDataset:
    """Inputs ``[state, action]`` and targets ``next_state - state``."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        Y = np.atleast_2d(np.asarray(self.targets, dtype=float))
        if X.shape[0] != Y.shape[0] or X.shape[0] < 1:
            raise ValueError("inputs and targets need the same non-zero length")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "targets", Y)

    def __len__(self):
        return self.inputs.shape[0]

    @classmethod
    def from_trajectory(cls, states, actions) -> "TransitionDataset":
        """``actions[t]`` is the price applied between ``states[t]`` and ``states[t+1]``."""
        S = np.asarray(states, dtype=float)
        U = np.asarray(actions, dtype=float)
        return cls(np.hstack([S[:-1], U[: len(S) - 1]]), np.diff(S, axis=0))


@dataclass(frozen=True)
class GpModel:
    X: np.ndarray        # (N, D) standardized inputs
    Y: np.ndarray        # (N, E) scaled targets
    log_ell: np.ndarray  # (E, D)
    log_sf2: np.ndarray  # (E,)
    log_sn2: np.ndarray  # (E,)
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_scale: np.ndarray
    beta: np.ndarray     # (E, N) = K^-1 y
    iK: np.ndarray       # (E, N, N)

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    @property
    def output_dim(self) -> int:
        return self.Y.shape[1]

    @property
    def lengthscales(self) -> np.ndarray:
        """Length-scales in raw input units."""
        return np.exp(self.log_ell) * self.x_scale[None, :]

    @property
    def signal_variance(self) -> np.ndarray:
        return np.exp(self.log_sf2) * self.y_scale**2

    @property
    def noise_variance(self) -> np.ndarray:
        return np.exp(self.log_sn2) * self.y_scale**2

    def log_marginal_likelihood(self) -> float:
        """Total log marginal likelihood of the scaled targets."""
        return -float(_neg_lml(_pack(self.log_ell, self.log_sf2, self.log_sn2),
                               jnp.asarray(self.X), jnp.asarray(self.Y),
                               jnp.ones(self.X.shape[0]), self.X.shape[0]))

    def padded(self, bucket: int = PAD_BUCKET):
        """Arrays padded to a multiple of ``bucket`` rows; padding carries no weight."""
        N = self.X.shape[0]
        P = -(-N // bucket) * bucket
        X = np.zeros((P, self.input_dim))
        X[:N] = self.X
        beta = np.zeros((self.output_dim, P))
        beta[:, :N] = self.beta
        iK = np.zeros((self.output_dim, P, P))
        iK[:, :N, :N] = self.iK
        return GpArrays(
            jnp.asarray(X), jnp.asarray(beta), jnp.asarray(iK),
            jnp.asarray(self.log_ell), jnp.asarray(self.log_sf2), jnp.asarray(self.log_sn2),
            jnp.asarray(self.x_mean), jnp.asarray(self.x_scale), jnp.asarray(self.y_scale),
        )

    def save(self, path):
        """Write an ``.npz`` archive; the keys are the dataclass field names."""
        np.savez(path, **{k: getattr(self, k) for k in self.__dataclass_fields__})

    @classmethod
    def load(cls, path) -> "GpModel":
        with np.load(path) as f:
            return cls(**{k: np.array(f[k]) for k in cls.__dataclass_fields__})


@jax.tree_util.register_pytree_node_class
@dataclass(frozen=True)
class GpArrays:
    X: jnp.ndarray
    beta: jnp.ndarray
    iK: jnp.ndarray
    log_ell: jnp.ndarray
    log_sf2: jnp.ndarray
    log_sn2: jnp.ndarray
    x_mean: jnp.ndarray
    x_scale: jnp.ndarray
    y_scale: jnp.ndarray

    def tree_flatten(self):
        return tuple(getattr(self, k) for k in self.__dataclass_fields__), None

    @classmethod
    def tree_unflatten(cls, aux, children):
        return cls(*children)


# -- hyperparameter fitting ---------------------------------------------------


def _pack(log_ell, log_sf2, log_sn2):
    return jnp.concatenate([jnp.asarray(log_ell), jnp.asarray(log_sf2)[:, None],
                            jnp.asarray(log_sn2)[:, None]], axis=1).ravel()


def _se(Xa, Xb, log_ell, log_sf2):
    A = Xa / jnp.exp(log_ell)
    B = Xb / jnp.exp(log_ell)
    sq = jnp.sum(A**2, 1)[:, None] + jnp.sum(B**2, 1)[None, :] - 2 * A @ B.T
    return jnp.exp(log_sf2 - 0.5 * jnp.maximum(sq, 0.0))


def _neg_lml(theta, X, Y, mask, n_obs):
    E, D = Y.shape[1], X.shape[1]
    theta = theta.reshape(E, D + 2)

    def one(th, y):
        K = _se(X, X, th[:D], th[D])
        K = mask[:, None] * mask[None, :] * K + jnp.diag(mask * jnp.exp(th[D + 1]) + (1 - mask))
        L = jnp.linalg.cholesky(K)
        alpha = jax.scipy.linalg.cho_solve((L, True), y)
        return 0.5 * y @ alpha + jnp.sum(jnp.log(jnp.diag(L))) + 0.5 * n_obs * jnp.log(2 * jnp.pi)

    return jnp.sum(jax.vmap(one, in_axes=(0, 1))(theta, Y))


def _curb(theta, E, D):
    """Soft walls on length-scales and signal-to-noise ratio.

    Near-noiseless fits with huge length-scales make the moment-matching
    covariance a difference of large numbers; this keeps length-scales below
    ``CURB_LS`` input standard deviations and ``sf / sn`` below ``CURB_SNR``.
    """
    th = theta.reshape(E, D + 2)
    ls = jnp.sum((th[:, :D] / jnp.log(CURB_LS)) ** CURB_POWER)
    snr = jnp.sum((0.5 * (th[:, D] - th[:, D + 1]) / jnp.log(CURB_SNR)) ** CURB_POWER)
    return ls + snr


def _fit_objective(theta, X, Y, mask, n_obs):
    return _neg_lml(theta, X, Y, mask, n_obs) + _curb(theta, Y.shape[1], X.shape[1])


_neg_lml_and_grad = jax.jit(jax.value_and_grad(_fit_objective))


def _posterior_arrays(X, Y, log_ell, log_sf2, log_sn2):
    E, N = Y.shape[1], X.shape[0]
    beta = np.empty((E, N))
    iK = np.empty((E, N, N))
    for e in range(E):
        K = np.asarray(_se(X, X, log_ell[e], log_sf2[e])) + np.exp(log_sn2[e]) * np.eye(N)
        L = np.linalg.cholesky(K)
        Linv = np.linalg.solve(L, np.eye(N))
        iK[e] = Linv.T @ Linv
        beta[e] = iK[e] @ Y[:, e]
    return beta, iK


def build_model(dataset: TransitionDataset, log_ell, log_sf2, log_sn2) -> GpModel:
    """Model at given (standardized-space) hyperparameters, no optimization."""
    Xr, Yr = dataset.inputs, dataset.targets
    x_mean, x_scale, y_scale = _standardization(Xr, Yr)
    X = (Xr - x_mean) / x_scale
    Y = Yr / y_scale
    log_ell = np.broadcast_to(np.asarray(log_ell, float), (Y.shape[1], X.shape[1])).copy()
    log_sf2 = np.broadcast_to(np.asarray(log_sf2, float), (Y.shape[1],)).copy()
    log_sn2 = np.broadcast_to(np.asarray(log_sn2, float), (Y.shape[1],)).copy()
    beta, iK = _posterior_arrays(X, Y, log_ell, log_sf2, log_sn2)
    return GpModel(X, Y, log_ell, log_sf2, log_sn2, x_mean, x_scale, y_scale, beta, iK)


def _standardization(Xr, Yr):
    x_mean = Xr.mean(0)
    x_scale = Xr.std(0)
    x_scale = np.where(x_scale > 1e-12, x_scale, 1.0)
    y_scale = np.sqrt(np.mean(Yr**2, 0))
    y_scale = np.where(y_scale > 1e-12, y_scale, 1.0)
    return x_mean, x_scale, y_scale


def initial_hyperparameters(Y: np.ndarray, D: int):
    """Unit length-scales (= input std), signal = target variance, noise = 10% of it."""
    E = Y.shape[1]
    tv = Y.var(0)
    tv = np.where(tv > 1e-12, tv, 1.0)
    return np.zeros((E, D)), np.log(tv), np.log(0.1 * tv), NOISE_FLOOR * tv


def fit(
    dataset: TransitionDataset,
    rng: np.random.Generator | None = None,
    restarts: int = 5,
    maxiter: int = 200,
    bucket: int = PAD_BUCKET,
) -> GpModel:
    """Maximize the log marginal likelihood of each output GP.

    The output GPs share no parameters, so their likelihoods are optimized
    jointly as one sum. Restart 0 starts from :func:`initial_hyperparameters`,
    the rest from random perturbations of it; the best optimum wins and the
    initialization is kept if nothing beats it.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    Xr, Yr = dataset.inputs, dataset.targets
    x_mean, x_scale, y_scale = _standardization(Xr, Yr)
    X = (Xr - x_mean) / x_scale
    Y = Yr / y_scale
    N, D = X.shape
    E = Y.shape[1]

    P = -(-N // bucket) * bucket
    Xp = np.zeros((P, D))
    Xp[:N] = X
    Yp = np.zeros((P, E))
    Yp[:N] = Y
    mask = np.zeros(P)
    mask[:N] = 1.0
    args = (jnp.asarray(Xp), jnp.asarray(Yp), jnp.asarray(mask), N)

    ell0, sf0, sn0, floor = initial_hyperparameters(Y, D)
    theta0 = np.asarray(_pack(ell0, sf0, sn0))
    bounds = []
    for e in range(E):
        bounds += [LOG_ELL_BOUNDS] * D + [LOG_SF2_BOUNDS, (np.log(floor[e]), np.log(10.0))]
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])

    def fun(th):
        v, g = _neg_lml_and_grad(jnp.asarray(th), *args)
        v, g = float(v), np.asarray(g)
        if not np.isfinite(v):
            return 1e25, np.zeros_like(th)
        return v, g

    best_theta = np.clip(theta0, lo, hi)
    best_val = fun(best_theta)[0]
    for r in range(restarts):
        start = theta0 if r == 0 else theta0 + rng.normal(0.0, 0.5, size=theta0.size)
        start = np.clip(start, lo, hi)
        res = minimize(fun, start, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": maxiter})
        if np.isfinite(res.fun) and res.fun < best_val:
            best_val, best_theta = float(res.fun), res.x
    th = best_theta.reshape(E, D + 2)
    log_ell, log_sf2, log_sn2 = th[:, :D], th[:, D], th[:, D + 1]
    beta, iK = _posterior_arrays(X, Y, log_ell, log_sf2, log_sn2)
    return GpModel(X, Y, log_ell, log_sf2, log_sn2, x_mean, x_scale, y_scale, beta, iK)


# -- prediction -----------------------------------------------------------------


def predict_point(model: GpModel, x, include_noise: bool = False) -> GaussianBelief:
    """Posterior mean and (diagonal) variance of the target at a fixed input."""
    z = (np.asarray(x, dtype=float) - model.x_mean) / model.x_scale
    mean = np.empty(model.output_dim)
    var = np.empty(model.output_dim)
    for e in range(model.output_dim):
        k = np.asarray(_se(z[None, :], model.X, model.log_ell[e], model.log_sf2[e]))[0]
        mean[e] = k @ model.beta[e]
        var[e] = np.exp(model.log_sf2[e]) - k @ model.iK[e] @ k
        if include_noise:
            var[e] += np.exp(model.log_sn2[e])
    var = np.maximum(var, 0.0)
    return GaussianBelief(mean * model.y_scale, np.diag(var * model.y_scale**2))


def _moments_std(g: GpArrays, mu, S, include_noise):
    """Moment matching in standardized units.

    Returns the predictive mean ``(E,)``, covariance ``(E, E)`` and the
    input-output covariance ``cov(input, output)`` of shape ``(D, E)``.
    """
    D = mu.shape[0]
    S = 0.5 * (S + S.T) + JITTER * jnp.eye(D)
    nu = g.X - mu
    lam = jnp.exp(2 * g.log_ell)  # (E, D)
    sf2 = jnp.exp(g.log_sf2)

    def mean_part(lam_a, sf2_a, beta_a):
        B = S + jnp.diag(lam_a)
        L = jnp.linalg.cholesky(B)
        t = jax.scipy.linalg.cho_solve((L, True), nu.T).T  # nu B^-1
        logdet = 2 * jnp.sum(jnp.log(jnp.diag(L))) - jnp.sum(jnp.log(lam_a))
        q = sf2_a * jnp.exp(-0.5 * jnp.sum(nu * t, 1) - 0.5 * logdet)
        m = q @ beta_a
        c = S @ (t.T @ (beta_a * q))
        return m, c

    m, C = jax.vmap(mean_part)(lam, sf2, g.beta)

    zeta = nu[None, :, :] / lam[:, None, :]                                 # (E, N, D)
    logk = g.log_sf2[:, None] - 0.5 * jnp.sum(nu[None] * zeta, 2)           # (E, N)

    def pair(a, b):
        R = S * (1 / lam[a] + 1 / lam[b])[None, :] + jnp.eye(D)
        T = jnp.linalg.solve(R, S)
        T = 0.5 * (T + T.T)
        za, zb = zeta[a], zeta[b]
        ta, tb = za @ T, zb @ T
        quad = (jnp.sum(ta * za, 1)[:, None] + jnp.sum(tb * zb, 1)[None, :] + 2 * ta @ zb.T)
        _, logdetR = jnp.linalg.slogdet(R)
        return jnp.exp(logk[a][:, None] + logk[b][None, :] + 0.5 * quad - 0.5 * logdetR)

    E = g.beta.shape[0]
    # Q is symmetric in (a, b) up to transposition: only the upper triangle is formed
    ia, ib = np.triu_indices(E)
    diag = ia == ib

    def upper(a, b):
        Q = pair(a, b)
        return g.beta[a] @ Q @ g.beta[b], jnp.sum(g.iK[a] * Q) * (a == b)

    e_up, tr_up = jax.vmap(upper)(jnp.asarray(ia), jnp.asarray(ib))
    e_ab = jnp.zeros((E, E)).at[ia, ib].set(e_up).at[ib, ia].set(e_up)
    cov = e_ab - jnp.outer(m, m)
    extra = sf2 - tr_up[diag]
    if include_noise:
        extra = extra + jnp.exp(g.log_sn2)
    cov = cov + jnp.diag(extra)
    cov = 0.5 * (cov + cov.T)
    return m, cov, C.T


def moments(g: GpArrays, mean, cov, include_noise=True):
    """Raw-unit moment matching on padded arrays (differentiable)."""
    mu = (mean - g.x_mean) / g.x_scale
    S = cov / jnp.outer(g.x_scale, g.x_scale)
    m, c, io = _moments_std(g, mu, S, include_noise)
    return (g.y_scale * m, c * jnp.outer(g.y_scale, g.y_scale),
            g.x_scale[:, None] * io * g.y_scale[None, :])


_moments_jit = jax.jit(moments, static_argnums=(3,))


def predict_uncertain(model: GpModel, belief: GaussianBelief, include_noise: bool = False):
    """Exact predictive moments under a Gaussian input.

    Returns ``(GaussianBelief over the target, cov(input, target))`` with the
    cross-covariance shaped ``(input_dim, output_dim)``.
    """
    m, c, io = _moments_jit(model.padded(), jnp.asarray(belief.mean), jnp.asarray(belief.cov),
                            include_noise)
    return GaussianBelief(np.asarray(m), np.asarray(c)), np.asarray(io)


def propagate_moments(g: GpArrays, A, b, amplitude, mean, cov):
    """One step ``s' = s + delta`` with the policy's action moments folded in."""
    from .policy import action_moments

    ns = mean.shape[0]
    ma, Sa, Csa = action_moments(A, b, amplitude, mean, cov)
    jm = jnp.concatenate([mean, ma])
    jS = jnp.block([[cov, Csa], [Csa.T, Sa]])
    md, Sd, io = moments(g, jm, jS, True)
    Csd = io[:ns]
    new_cov = cov + Sd + Csd + Csd.T
    return mean + md, 0.5 * (new_cov + new_cov.T)


_propagate_jit = jax.jit(propagate_moments)


def propagate_state(model: GpModel, belief: GaussianBelief, policy) -> GaussianBelief:
    """Next-state belief under ``policy`` (a :class:`~karma_pricing.policy.PolicyParams`)."""
    m, c = _propagate_jit(model.padded(), jnp.asarray(policy.A), jnp.asarray(policy.b),
                          policy.amplitude, jnp.asarray(belief.mean), jnp.asarray(belief.cov))
    return GaussianBelief(np.asarray(m), np.asarray(c))
