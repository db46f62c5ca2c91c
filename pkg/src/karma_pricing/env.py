"""Repeated parallel-arc routing game with Karma-constrained commuters.

Each simulated day: commuters decide whether to travel, travelers settle
into a Nash equilibrium by randomized sequential best response, Karma
balances are charged, and the aggregate state is observed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba
import numpy as np

from .network import NetworkConfig, bpr_discomfort, societal_cost
from .policy import constrain_prices

logger = logging.getLogger(__name__)

HOME = -1


class InfeasibleChoice(Exception):
    """No route pair satisfies the agent's Karma constraints."""


class InvariantError(RuntimeError):
    """A simulation invariant was violated; the episode cannot continue."""


class KarmaInvariantError(InvariantError):
    """A Karma balance went negative."""


@dataclass
class AgentState:
    karma: float
    k_ref: float
    sensitivity_rate: float = 1.0
    q_today: float = 0.0
    traveling_today: bool = False
    choice: int = HOME

    @property
    def q_mean(self) -> float:
        return 1.0 / self.sensitivity_rate


@dataclass
class Population:
    """Struct-of-arrays view of all ``M`` agents."""

    karma: np.ndarray
    k_ref: np.ndarray
    sensitivity_rate: np.ndarray = 1.0
    T_horizon: int = 5
    q_today: np.ndarray = field(default=None)
    traveling: np.ndarray = field(default=None)
    choice: np.ndarray = field(default=None)

    def __post_init__(self):
        self.karma = np.asarray(self.karma, dtype=float).copy()
        M = self.karma.size
        self.k_ref = np.broadcast_to(np.asarray(self.k_ref, dtype=float), (M,)).copy()
        self.sensitivity_rate = np.broadcast_to(
            np.asarray(self.sensitivity_rate, dtype=float), (M,)
        ).copy()
        if self.q_today is None:
            self.q_today = np.zeros(M)
        if self.traveling is None:
            self.traveling = np.zeros(M, dtype=bool)
        if self.choice is None:
            self.choice = np.full(M, HOME, dtype=np.int64)
        if np.any(self.karma < 0):
            raise KarmaInvariantError("initial Karma must be non-negative")

    @property
    def M(self) -> int:
        return self.karma.size

    @classmethod
    def sample(
        cls,
        M: int,
        rng: np.random.Generator,
        karma_low: float = 50.0,
        karma_high: float = 100.0,
        k_ref_mean: float = 50.0,
        k_ref_std: float = 10.0,
        sensitivity_rate: float = 1.0,
        T_horizon: int = 5,
    ) -> "Population":
        return cls(
            karma=rng.uniform(karma_low, karma_high, size=M),
            k_ref=rng.normal(k_ref_mean, k_ref_std, size=M),
            sensitivity_rate=np.full(M, float(sensitivity_rate)),
            T_horizon=T_horizon,
        )

    def agent(self, i: int) -> AgentState:
        return AgentState(
            karma=float(self.karma[i]),
            k_ref=float(self.k_ref[i]),
            sensitivity_rate=float(self.sensitivity_rate[i]),
            q_today=float(self.q_today[i]),
            traveling_today=bool(self.traveling[i]),
            choice=int(self.choice[i]),
        )

    def copy(self) -> "Population":
        return Population(
            self.karma, self.k_ref, self.sensitivity_rate, self.T_horizon,
            self.q_today.copy(), self.traveling.copy(), self.choice.copy(),
        )


@dataclass(frozen=True)
class ObservedState:
    x: np.ndarray
    K_mean: float
    K_std: float

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.x, [self.K_mean, self.K_std]])


# -- individual choice -------------------------------------------------------


def feasible_pairs(karma, k_ref, p, T) -> np.ndarray:
    """Boolean ``(n, n)`` mask of (today, plan) pairs meeting both budget rules."""
    p = np.asarray(p, dtype=float)
    spend = p[:, None] + T * p[None, :]
    return (karma - spend >= k_ref) & (p[:, None] <= karma)


def agent_best_choice(agent: AgentState, d, p, T_horizon: int) -> tuple[int, int]:
    """Solve the individual routing problem by enumerating all arc pairs.

    Returns ``(today, plan)``; ties go to the lowest index. Raises
    :class:`InfeasibleChoice` when no pair satisfies the constraints.
    """
    d = np.asarray(d, dtype=float)
    cost = agent.q_today * d[:, None] + T_horizon * agent.q_mean * d[None, :]
    feas = feasible_pairs(agent.karma, agent.k_ref, p, T_horizon)
    if not feas.any():
        raise InfeasibleChoice(f"karma {agent.karma:.3f} cannot cover any route pair")
    flat = np.where(feas, cost, np.inf).ravel()
    y, ybar = divmod(int(np.argmin(flat)), d.size)
    return y, ybar


def fallback_pairs(karma, p) -> np.ndarray:
    """Relaxed mask that keeps only the spend-today rule."""
    p = np.asarray(p, dtype=float)
    return np.broadcast_to((p <= karma)[:, None], (p.size, p.size)).copy()


def draw_daily_state(pop: Population, config: NetworkConfig, rng: np.random.Generator) -> Population:
    """Draw who travels today and the travelers' sensitivities (in place)."""
    M = pop.M
    go = rng.random(M) < config.p_go
    q = rng.exponential(1.0 / pop.sensitivity_rate)
    pop.traveling = go
    pop.q_today = np.where(go, q, 0.0)
    pop.choice = np.where(go, pop.choice, HOME)
    return pop


# -- equilibrium --------------------------------------------------------------


@numba.njit(cache=True)
def _arc_costs(i, counts, feas, q, qbar, T, d0, kappa, alpha, beta, M, out):
    """Cost of each arc for agent ``i`` given everyone else's counts (own flow excluded)."""
    n = counts.size
    d_on = np.empty(n)
    for k in range(n):
        d_on[k] = d0[k] * (1.0 + alpha * ((counts[k] + 1) / M / kappa[k]) ** beta)
    for j in range(n):
        best_plan = np.inf
        for k in range(n):
            if feas[i, j, k]:
                # the plan is a future day with this agent on arc k
                if d_on[k] < best_plan:
                    best_plan = d_on[k]
        if best_plan == np.inf:
            out[j] = np.inf
        else:
            out[j] = q[i] * d_on[j] + T * qbar[i] * best_plan


@numba.njit(cache=True)
def _sweep(order, choice, counts, feas, q, qbar, T, d0, kappa, alpha, beta, M, apply):
    """One best-response pass; returns the number of improving moves found."""
    n = counts.size
    costs = np.empty(n)
    moves = 0
    for i in order:
        a = choice[i]
        counts[a] -= 1
        _arc_costs(i, counts, feas, q, qbar, T, d0, kappa, alpha, beta, M, costs)
        best = 0
        for j in range(1, n):
            if costs[j] < costs[best]:
                best = j
        cur = costs[a]
        if costs[best] < cur - 1e-12 * (1.0 + abs(cur)):
            moves += 1
            if apply:
                a = best
                choice[i] = a
        counts[a] += 1
    return moves


@dataclass
class NashResult:
    x: np.ndarray
    converged: bool
    sweeps: int


def nash_equilibrium(
    pop: Population,
    config: NetworkConfig,
    p,
    rng: np.random.Generator,
    max_sweeps: int = 100,
) -> NashResult:
    """Settle travelers into a best-response fixed point at prices ``p``.

    Agents that cannot afford any route pair under the full constraints fall
    back to the spend-today rule alone; agents that cannot even pay for the
    cheapest arc stay home. Updates ``pop.choice`` in place.
    """
    p = np.asarray(p, dtype=float)
    n, M, T = config.n, pop.M, pop.T_horizon
    trav = np.flatnonzero(pop.traveling)

    feas = np.empty((trav.size, n, n), dtype=np.bool_)
    for r, i in enumerate(trav):
        f = feasible_pairs(pop.karma[i], pop.k_ref[i], p, T)
        if not f.any():
            f = fallback_pairs(pop.karma[i], p)
        feas[r] = f
    able = feas.reshape(trav.size, n * n).any(axis=1)
    if not able.all():
        pop.traveling[trav[~able]] = False
        pop.choice[trav[~able]] = HOME
        trav, feas = trav[able], feas[able]

    q = pop.q_today[trav]
    qbar = 1.0 / pop.sensitivity_rate[trav]
    choice = pop.choice[trav].copy()
    fresh = choice == HOME
    choice[fresh] = rng.integers(0, n, size=int(fresh.sum()))
    # start from an affordable arc
    for r in np.flatnonzero(~feas[np.arange(trav.size), choice].any(axis=1)):
        choice[r] = int(np.flatnonzero(feas[r].any(axis=1))[0])
    counts = np.bincount(choice, minlength=n).astype(np.int64)

    d0 = np.asarray(config.d0)
    kappa = np.asarray(config.kappa)
    converged = False
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        order = rng.permutation(trav.size)
        moves = _sweep(order, choice, counts, feas, q, qbar, float(T), d0, kappa,
                       config.alpha, config.beta, float(M), True)
        if moves == 0:
            converged = True
            break
    if not converged:
        logger.warning("best-response dynamics hit %d sweeps without a fixed point", max_sweeps)
    pop.choice[trav] = choice
    return NashResult(x=counts / M, converged=converged, sweeps=sweeps)


def count_improving_deviations(pop: Population, config: NetworkConfig, p) -> int:
    """Verification sweep: travelers who could strictly improve by switching."""
    p = np.asarray(p, dtype=float)
    n, M, T = config.n, pop.M, pop.T_horizon
    trav = np.flatnonzero(pop.traveling)
    feas = np.empty((trav.size, n, n), dtype=np.bool_)
    for r, i in enumerate(trav):
        f = feasible_pairs(pop.karma[i], pop.k_ref[i], p, T)
        feas[r] = f if f.any() else fallback_pairs(pop.karma[i], p)
    choice = pop.choice[trav].copy()
    counts = np.bincount(choice, minlength=n).astype(np.int64)
    return int(_sweep(np.arange(trav.size), choice, counts, feas, pop.q_today[trav],
                      1.0 / pop.sensitivity_rate[trav], float(T), np.asarray(config.d0),
                      np.asarray(config.kappa), config.alpha, config.beta, float(M), False))


def flows_of(pop: Population, n: int) -> np.ndarray:
    c = pop.choice[pop.choice != HOME]
    return np.bincount(c, minlength=n) / pop.M


def apply_karma_update(pop: Population, p) -> Population:
    """Charge (or reimburse) each traveler the price of the arc taken."""
    p = np.asarray(p, dtype=float)
    trav = pop.choice != HOME
    new = pop.karma.copy()
    new[trav] = new[trav] - p[pop.choice[trav]]
    if np.any(new < 0):
        bad = np.flatnonzero(new < 0)
        raise KarmaInvariantError(f"negative Karma for agents {bad[:10].tolist()}")
    pop.karma = new
    return pop


def observe(pop: Population, x) -> ObservedState:
    return ObservedState(
        x=np.asarray(x, dtype=float).copy(),
        K_mean=float(np.mean(pop.karma)),
        K_std=float(np.std(pop.karma)),
    )


# -- environment ---------------------------------------------------------------


@dataclass
class DayResult:
    state: ObservedState
    prices: np.ndarray
    cost: float
    converged: bool
    sweeps: int


class RoutingEnv:
    """One episode of the repeated routing game.

    ``step`` takes pre-constraint prices; the sign constraints on the most
    and least comfortable arcs are applied here.
    """

    def __init__(self, config: NetworkConfig, population: Population, rng: np.random.Generator,
                 max_sweeps: int = 100, check_invariants: bool = True):
        self.config = config
        self.pop = population
        self.rng = rng
        self.max_sweeps = max_sweeps
        self.check_invariants = check_invariants
        self.day = 0

    def set_config(self, config: NetworkConfig):
        if config.n != self.config.n:
            raise ValueError("arc count cannot change mid-episode")
        self.config = config

    def step(self, p_raw) -> DayResult:
        p = constrain_prices(p_raw, self.config.comfort_order())
        draw_daily_state(self.pop, self.config, self.rng)
        eq = nash_equilibrium(self.pop, self.config, p, self.rng, self.max_sweeps)
        if self.check_invariants and eq.converged:
            left = count_improving_deviations(self.pop, self.config, p)
            if left:
                raise InvariantError(f"day {self.day + 1}: {left} improving deviations remain")
        apply_karma_update(self.pop, p)
        self.day += 1
        x = eq.x
        if self.check_invariants:
            counts = x * self.pop.M
            if not np.allclose(counts, np.round(counts), atol=1e-9):
                raise InvariantError("flows are not multiples of 1/M")
        return DayResult(
            state=observe(self.pop, x),
            prices=p,
            cost=societal_cost(self.config, x),
            converged=eq.converged,
            sweeps=eq.sweeps,
        )

