"""Model-based policy search for day-to-day Karma prices.

Loop: fit the GP dynamics on every transition seen so far, predict the
expected saturated cost of the current policy over ``H`` days by cascading
moment-matched one-step predictions, improve the policy with L-BFGS on the
exact autodiff gradient, then deploy it for ``t_update`` days.
"""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import jax
import jax.numpy as jnp
import numpy as np
from scipy.optimize import minimize

from . import gp
from .env import RoutingEnv
from .gp import GaussianBelief, GpModel, TransitionDataset
from .network import NetworkConfig
from .policy import PolicyParams, evaluate, initial_pseudo_random

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LearnerConfig:
    s_star: np.ndarray
    w: np.ndarray
    H: int = 15
    sigma_c: float = 0.1
    t_init: int = 20
    t_update: int = 5
    init_cov: float = 1e-4
    policy_restarts: int = 3
    policy_maxiter: int = 150
    restart_scale: float = 0.3
    gp_restarts: int = 5
    gp_maxiter: int = 200

    def __post_init__(self):
        s = np.asarray(self.s_star, dtype=float).reshape(-1)
        w = np.asarray(self.w, dtype=float).reshape(-1)
        if s.shape != w.shape:
            raise ValueError("s_star and w must have the same length")
        if not np.all((w == 0) | (w == 1)):
            raise ValueError("w entries must be 0 or 1")
        if self.H < 1 or self.sigma_c <= 0 or self.t_update < 1 or self.t_init < 1:
            raise ValueError("invalid learner horizon/width/schedule")
        object.__setattr__(self, "s_star", s)
        object.__setattr__(self, "w", w)

    @classmethod
    def for_flows(cls, x_star, **kw) -> "LearnerConfig":
        """Target the flow part of the state; the Karma statistics are masked out."""
        x_star = np.asarray(x_star, dtype=float)
        n = x_star.size
        s_star = np.concatenate([x_star, [0.0, 0.0]])
        w = np.concatenate([np.ones(n), [0.0, 0.0]])
        return cls(s_star=s_star, w=w, **kw)

    @property
    def active(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.w))

    def retarget(self, x_star) -> "LearnerConfig":
        s = self.s_star.copy()
        s[: len(x_star)] = x_star
        return replace(self, s_star=s)


# -- cost ----------------------------------------------------------------------


def saturated_cost(s, cfg: LearnerConfig) -> float:
    """``1 - exp(-|s - s*|_W^2 / (2 sigma_c^2))``."""
    d = np.asarray(s, dtype=float) - cfg.s_star
    return float(1.0 - np.exp(-0.5 * np.sum(cfg.w * d * d) / cfg.sigma_c**2))


def _expected_cost(mean, cov, s_star, active, sigma_c):
    idx = jnp.asarray(active)
    d = mean[idx] - s_star[idx]
    S = cov[idx][:, idx]
    m = len(active)
    B = jnp.eye(m) + S / sigma_c**2
    _, logdet = jnp.linalg.slogdet(B)
    quad = d @ jnp.linalg.solve(B, d) / sigma_c**2
    return 1.0 - jnp.exp(-0.5 * logdet - 0.5 * quad)


def expected_cost(belief: GaussianBelief, cfg: LearnerConfig) -> float:
    """Closed-form expectation of :func:`saturated_cost` under a Gaussian state."""
    return float(_expected_cost(jnp.asarray(belief.mean), jnp.asarray(belief.cov),
                                jnp.asarray(cfg.s_star), cfg.active, cfg.sigma_c))


# -- policy evaluation --------------------------------------------------------


def _rollout_cost(theta, g, scale, amplitude, m0, S0, s_star, sigma_c, shape, H, active):
    """Total expected cost over ``H + 1`` days.

    ``theta`` holds ``A * scale`` (feedback gains on the standardized state)
    followed by ``b``.
    """
    k = shape[0] * shape[1]
    A = theta[:k].reshape(shape) / scale[None, :]
    b = theta[k:]

    def step(carry, _):
        m, S = carry
        m2, S2 = gp.propagate_moments(g, A, b, amplitude, m, S)
        return (m2, S2), _expected_cost(m2, S2, s_star, active, sigma_c)

    _, costs = jax.lax.scan(step, (m0, S0), None, length=H)
    return _expected_cost(m0, S0, s_star, active, sigma_c) + jnp.sum(costs)


_rollout_value = jax.jit(_rollout_cost, static_argnums=(8, 9, 10))
_rollout_value_and_grad = jax.jit(jax.value_and_grad(_rollout_cost), static_argnums=(8, 9, 10))


@dataclass
class PolicyObjective:
    """``J`` as a function of flat, state-scaled policy parameters."""

    model: GpModel
    params: PolicyParams
    belief: GaussianBelief
    cfg: LearnerConfig
    scale: np.ndarray = None

    def __post_init__(self):
        if self.scale is None:
            ns = self.params.n_states
            self.scale = np.asarray(self.model.x_scale[:ns], dtype=float)
        self._g = self.model.padded()
        self._args = (
            self._g, jnp.asarray(self.scale), self.params.amplitude,
            jnp.asarray(self.belief.mean), jnp.asarray(self.belief.cov),
            jnp.asarray(self.cfg.s_star), self.cfg.sigma_c,
            self.params.A.shape, self.cfg.H, self.cfg.active,
        )

    def to_theta(self, params: PolicyParams) -> np.ndarray:
        return np.concatenate([(params.A * self.scale[None, :]).ravel(), params.b])

    def to_params(self, theta) -> PolicyParams:
        theta = np.asarray(theta, dtype=float)
        k = self.params.A.size
        A = theta[:k].reshape(self.params.A.shape) / self.scale[None, :]
        return PolicyParams(A, theta[k:], self.params.amplitude)

    def value(self, theta) -> float:
        return float(_rollout_value(jnp.asarray(theta), *self._args))

    def value_and_grad(self, theta):
        v, g = _rollout_value_and_grad(jnp.asarray(theta), *self._args)
        return float(v), np.asarray(g)


def evaluate_policy(model: GpModel, params: PolicyParams, initial_belief: GaussianBelief,
                    cfg: LearnerConfig) -> float:
    """Model-predicted sum of expected costs for days ``0..H``."""
    obj = PolicyObjective(model, params, initial_belief, cfg)
    return obj.value(obj.to_theta(params))


def policy_gradient(model, params, initial_belief, cfg) -> PolicyParams:
    """``dJ/dA`` and ``dJ/db`` packed as a :class:`PolicyParams`."""
    obj = PolicyObjective(model, params, initial_belief, cfg, scale=np.ones(params.n_states))
    _, g = obj.value_and_grad(obj.to_theta(params))
    k = params.A.size
    return PolicyParams(g[:k].reshape(params.A.shape), g[k:], params.amplitude)


@dataclass
class PolicyUpdate:
    params: PolicyParams
    J_before: float
    J_after: float


def improve_policy(model: GpModel, params: PolicyParams, initial_belief: GaussianBelief,
                   cfg: LearnerConfig, rng: np.random.Generator | None = None) -> PolicyUpdate:
    """L-BFGS over the policy parameters with restarts around the incumbent.

    Never returns parameters with a higher predicted ``J`` than ``params``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    obj = PolicyObjective(model, params, initial_belief, cfg)
    theta0 = obj.to_theta(params)
    J0 = obj.value(theta0)
    if not np.isfinite(J0):
        warnings.warn("incumbent policy has non-finite predicted cost", RuntimeWarning)
        return PolicyUpdate(params, J0, J0)

    def fun(th):
        v, g = obj.value_and_grad(th)
        if not (np.isfinite(v) and np.all(np.isfinite(g))):
            return 1e6, np.zeros_like(th)
        return v, g

    best_theta, best_J = theta0, J0
    for r in range(cfg.policy_restarts):
        start = theta0 if r == 0 else theta0 + rng.normal(0.0, cfg.restart_scale, theta0.size)
        try:
            res = minimize(fun, start, jac=True, method="L-BFGS-B",
                           options={"maxiter": cfg.policy_maxiter})
        except (ValueError, FloatingPointError) as exc:  # pragma: no cover
            warnings.warn(f"policy optimizer failed: {exc}", RuntimeWarning)
            continue
        J = obj.value(res.x)
        if np.isfinite(J) and J < best_J:
            best_theta, best_J = res.x, J
    if best_J > J0 + 1e-9:
        return PolicyUpdate(params, J0, J0)
    return PolicyUpdate(obj.to_params(best_theta), J0, best_J)


# -- episode -------------------------------------------------------------------


@dataclass(frozen=True)
class ChangeEvent:
    """Network switches to ``config`` for all days after ``day``."""

    day: int
    config: NetworkConfig
    x_star: np.ndarray | None = None


@dataclass
class EpisodeLog:
    n: int
    t: list = field(default_factory=list)
    x: list = field(default_factory=list)
    prices: list = field(default_factory=list)
    raw_prices: list = field(default_factory=list)
    K_mean: list = field(default_factory=list)
    K_std: list = field(default_factory=list)
    cost: list = field(default_factory=list)
    nash_converged: list = field(default_factory=list)
    updates: list = field(default_factory=list)
    initial_state: np.ndarray | None = None

    def __len__(self):
        return len(self.t)

    @property
    def cost_ma5(self) -> np.ndarray:
        """Mean of the last 5 daily costs; NaN before day 5."""
        c = np.asarray(self.cost, dtype=float)
        out = np.full(c.size, np.nan)
        if c.size >= 5:
            out[4:] = np.convolve(c, np.ones(5) / 5, mode="valid")
        return out

    def states(self) -> np.ndarray:
        return np.column_stack([np.asarray(self.x).reshape(-1, self.n),
                                self.K_mean, self.K_std])

    def dataset(self) -> TransitionDataset:
        S = self.states()
        U = np.asarray(self.raw_prices).reshape(-1, self.n)
        return TransitionDataset(np.hstack([S[:-1], U[1:]]), np.diff(S, axis=0))


def run_episode(env: RoutingEnv, cfg: LearnerConfig, rng: np.random.Generator, days: int,
                change_events: Sequence[ChangeEvent] = (), params: PolicyParams | None = None,
                checkpoint_dir: str | Path | None = None) -> EpisodeLog:
    """Pseudo-random prices for ``t_init`` days, then learn-and-deploy cycles.

    The price chosen after observing day ``t - 1`` is applied on day ``t``;
    the transition ``(s_{t-1}, p_t) -> s_t - s_{t-1}`` enters the dataset.
    Change events swap the environment's network and the cost target but
    leave the dataset, model and policy alone.
    """
    n = env.config.n
    log = EpisodeLog(n=n)
    params = params if params is not None else PolicyParams.zeros(n, env.config.amplitude)
    events = {e.day: e for e in change_events}
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)
    prev = None
    for t in range(1, days + 1):
        ev = events.get(t - 1)
        if ev is not None:
            env.set_config(ev.config)
            if ev.x_star is not None:
                cfg = cfg.retarget(ev.x_star)
        if t <= cfg.t_init or prev is None:
            p_raw = initial_pseudo_random(env.config, rng)
        else:
            p_raw = evaluate(params, prev)
        day = env.step(p_raw)
        s = day.state.as_vector()
        log.t.append(t)
        log.x.append(day.state.x)
        log.prices.append(day.prices)
        log.raw_prices.append(np.asarray(p_raw, dtype=float))
        log.K_mean.append(day.state.K_mean)
        log.K_std.append(day.state.K_std)
        log.cost.append(day.cost)
        log.nash_converged.append(day.converged)
        prev = s

        if t >= cfg.t_init and (t - cfg.t_init) % cfg.t_update == 0 and t < days and t >= 2:
            data = log.dataset()
            t0 = time.perf_counter()
            model = gp.fit(data, rng, restarts=cfg.gp_restarts, maxiter=cfg.gp_maxiter)
            t1 = time.perf_counter()
            belief = GaussianBelief(s, cfg.init_cov * np.eye(s.size))
            upd = improve_policy(model, params, belief, cfg, rng)
            t2 = time.perf_counter()
            params = upd.params
            log.updates.append({
                "day": t,
                "n_data": len(data),
                "J_before": upd.J_before,
                "J_after": upd.J_after,
                "noise_var": model.noise_variance.tolist(),
                "lengthscale_median": float(np.median(model.lengthscales)),
                "fit_seconds": t1 - t0,
                "policy_seconds": t2 - t1,
            })
            logger.info("day %d: %d transitions, J %.3f -> %.3f (fit %.1fs, policy %.1fs)", t,
                        len(data), upd.J_before, upd.J_after, t1 - t0, t2 - t1)
            if ckpt is not None:
                model.save(ckpt / f"gp_day{t:03d}.npz")
                np.savez(ckpt / f"policy_day{t:03d}.npz", A=params.A, b=params.b,
                         amplitude=params.amplitude)
                np.savez(ckpt / f"data_day{t:03d}.npz", inputs=data.inputs,
                         targets=data.targets)
    return log
