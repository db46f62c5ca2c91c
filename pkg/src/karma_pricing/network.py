"""Parallel-arc network description and BPR discomfort."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class NetworkConfig:
    """Parallel-arc network with BPR discomforts.

    Arc 0 must be the most comfortable arc and arc ``n - 1`` the least
    comfortable one (ascending free-flow discomfort, ties by descending
    capacity); see :meth:`comfort_order`.
    """

    d0: tuple[float, ...]
    kappa: tuple[float, ...]
    alpha: float = 0.15
    beta: float = 4.0
    p_min: float = -20.0
    p_max: float = 20.0
    p_home: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "d0", tuple(float(v) for v in self.d0))
        object.__setattr__(self, "kappa", tuple(float(v) for v in self.kappa))
        if len(self.d0) == 0 or len(self.d0) != len(self.kappa):
            raise ValueError("d0 and kappa must be non-empty and of equal length")
        if min(self.d0) <= 0 or min(self.kappa) <= 0:
            raise ValueError("d0 and kappa must be positive")
        if self.alpha <= 0 or self.beta < 1:
            raise ValueError("need alpha > 0 and beta >= 1")
        if not self.p_min < 0 < self.p_max:
            raise ValueError("need p_min < 0 < p_max")
        if not 0.0 <= self.p_home <= 1.0:
            raise ValueError("p_home must lie in [0, 1]")

    @property
    def n(self) -> int:
        return len(self.d0)

    @property
    def p_go(self) -> float:
        return 1.0 - self.p_home

    @property
    def amplitude(self) -> float:
        return max(abs(self.p_min), abs(self.p_max))

    def comfort_order(self) -> np.ndarray:
        """Arc indices sorted from most to least comfortable."""
        return np.array(
            sorted(range(self.n), key=lambda j: (self.d0[j], -self.kappa[j])), dtype=int
        )

    def with_changes(self, **kw) -> "NetworkConfig":
        return replace(self, **kw)


def bpr_discomfort(config: NetworkConfig, x) -> np.ndarray:
    """Per-arc travel discomfort ``d0 * (1 + alpha * (x / kappa) ** beta)``."""
    x = np.asarray(x, dtype=float)
    d0 = np.asarray(config.d0)
    kappa = np.asarray(config.kappa)
    return d0 * (1.0 + config.alpha * (x / kappa) ** config.beta)


def bpr_derivative(config: NetworkConfig, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    d0 = np.asarray(config.d0)
    kappa = np.asarray(config.kappa)
    b = config.beta
    return d0 * config.alpha * b * x ** (b - 1) / kappa**b


def societal_cost(config: NetworkConfig, x) -> float:
    """Total cost ``d(x) . x`` with the societal cost aligned to discomfort."""
    x = np.asarray(x, dtype=float)
    return float(bpr_discomfort(config, x) @ x)


def marginal_cost(config: NetworkConfig, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return bpr_discomfort(config, x) + x * bpr_derivative(config, x)


def beckmann_potential(config: NetworkConfig, x) -> float:
    """Sum over arcs of the integral of the discomfort from 0 to ``x_j``."""
    x = np.asarray(x, dtype=float)
    d0 = np.asarray(config.d0)
    kappa = np.asarray(config.kappa)
    b = config.beta
    return float(np.sum(d0 * (x + config.alpha * kappa * (x / kappa) ** (b + 1) / (b + 1))))
