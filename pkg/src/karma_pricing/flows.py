"""System-optimal and uncontrolled (Wardrop) flow distributions.

Both are minimizers of a smooth convex objective over the slice
``{x >= 0, sum(x) = P_go}`` and are solved with projected gradient
descent plus backtracking.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .network import (
    NetworkConfig,
    beckmann_potential,
    bpr_discomfort,
    marginal_cost,
    societal_cost,
)


class FlowSolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class FlowTarget:
    x_star: np.ndarray
    cost_at_optimum: float
    x_uc: np.ndarray
    cost_uncontrolled: float

    @property
    def relative_gap(self) -> float:
        """Cost reduction of the optimum relative to the uncontrolled cost."""
        return (self.cost_uncontrolled - self.cost_at_optimum) / self.cost_uncontrolled


def project_simplex(y: np.ndarray, total: float) -> np.ndarray:
    """Euclidean projection of ``y`` onto ``{x >= 0, sum(x) = total}`` (sort method)."""
    y = np.asarray(y, dtype=float)
    if total <= 0:
        return np.zeros_like(y)
    u = np.sort(y)[::-1]
    css = np.cumsum(u) - total
    idx = np.arange(1, y.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(y - theta, 0.0)


def _projected_gradient(
    f: Callable[[np.ndarray], float],
    grad: Callable[[np.ndarray], np.ndarray],
    n: int,
    total: float,
    tol: float = 1e-9,
    max_iter: int = 100_000,
) -> np.ndarray:
    if total > n:
        raise FlowSolverError(f"infeasible demand {total} on {n} arcs")
    x = np.full(n, total / n)
    step = 1.0
    fx = f(x)
    for _ in range(max_iter):
        g = grad(x)
        # gradient mapping at unit step decides convergence
        gm = x - project_simplex(x - g, total)
        if np.linalg.norm(gm) < tol:
            return x
        step *= 2.0
        while True:
            x_new = project_simplex(x - step * g, total)
            f_new = f(x_new)
            dx = x_new - x
            if f_new <= fx + g @ dx + (dx @ dx) / (2 * step) or step < 1e-14:
                break
            # near the optimum the decrease drowns in round-off; a local
            # Lipschitz bound on the gradient is still resolvable there
            if step * np.linalg.norm(grad(x_new) - g) <= np.linalg.norm(dx):
                break
            step *= 0.5
        if np.array_equal(x_new, x):
            return x
        x, fx = x_new, f_new
    raise FlowSolverError("projected gradient did not converge")


def solve_system_optimum(config: NetworkConfig) -> np.ndarray:
    """Flows minimizing total societal cost with every commuter served."""
    return _projected_gradient(
        lambda x: societal_cost(config, x),
        lambda x: marginal_cost(config, x),
        config.n,
        config.p_go,
    )


def solve_wardrop(config: NetworkConfig) -> np.ndarray:
    """User equilibrium at zero prices, as the Beckmann-potential minimizer."""
    return _projected_gradient(
        lambda x: beckmann_potential(config, x),
        lambda x: bpr_discomfort(config, x),
        config.n,
        config.p_go,
    )


def flow_targets(config: NetworkConfig) -> FlowTarget:
    x_star = solve_system_optimum(config)
    x_uc = solve_wardrop(config)
    return FlowTarget(
        x_star=x_star,
        cost_at_optimum=societal_cost(config, x_star),
        x_uc=x_uc,
        cost_uncontrolled=societal_cost(config, x_uc),
    )
