"""Noisy projected SGD on a local cubic-regularized model.

The client model around the anchor ``theta0`` is

    phi(theta) = g.(theta - theta0) + 1/2 (theta - theta0)' H (theta - theta0)
                 + M/6 ||theta - theta0||^3

and :func:`solve` runs ``tau`` steps of
``theta <- P[theta - eta_s (grad phi(theta) + b_s)]`` with ``eta_s = 2 / (mu (s + 2))``
and ``b_s ~ N(0, sigma^2 I)``, returning the ``2(s+1)/(tau(tau+1))``-weighted
average of ``theta_0 .. theta_{tau-1}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError
from .model import BoxConstraint, project

# dense Hessians up to this dimension, Hessian-vector callables above
DENSE_HESSIAN_MAX_D = 512


@dataclass
class CubicModel:
    anchor: np.ndarray
    g_hat: np.ndarray
    H_hat: np.ndarray | Callable[[np.ndarray], np.ndarray]
    M: float
    mu: float

    def __post_init__(self):
        self.anchor = np.asarray(self.anchor, dtype=float)
        self.g_hat = np.asarray(self.g_hat, dtype=float)
        if not self.M > 0:
            raise ConfigurationError(f"cubic coefficient M must be positive, got {self.M}")
        if not self.mu > 0:
            raise ConfigurationError(f"mu must be positive, got {self.mu}")
        if self.g_hat.shape != self.anchor.shape:
            raise ConfigurationError("gradient and anchor dimensions differ")
        if not callable(self.H_hat):
            self.H_hat = np.asarray(self.H_hat, dtype=float)
            d = self.anchor.shape[0]
            if self.H_hat.shape != (d, d):
                raise ConfigurationError(f"Hessian of shape {self.H_hat.shape} for d={d}")

    def hvp(self, r: np.ndarray) -> np.ndarray:
        if callable(self.H_hat):
            return self.H_hat(r)
        return self.H_hat @ r


@dataclass
class SolverConfig:
    tau: int
    sigma_sq: float
    rng_stream: np.random.Generator | None = None

    def __post_init__(self):
        if self.tau < 1:
            raise ConfigurationError(f"tau must be >= 1, got {self.tau}")
        if self.sigma_sq < 0:
            raise ConfigurationError(f"sigma_sq must be >= 0, got {self.sigma_sq}")
        if self.sigma_sq > 0 and self.rng_stream is None:
            raise ConfigurationError("a noisy solve needs an rng stream")


def cubic_value(cm: CubicModel, theta) -> float:
    r = np.asarray(theta, dtype=float) - cm.anchor
    nr = np.linalg.norm(r)
    return float(cm.g_hat @ r + 0.5 * r @ cm.hvp(r) + cm.M / 6.0 * nr**3)


def cubic_gradient(cm: CubicModel, theta) -> np.ndarray:
    r = np.asarray(theta, dtype=float) - cm.anchor
    return cm.g_hat + cm.hvp(r) + 0.5 * cm.M * np.linalg.norm(r) * r


def weighted_average_state(prev, theta_s, s: int):
    """One step of the online weighted average, ``rho = 2/(s+1)``.

    Feeding ``theta_0, theta_1, ...`` at ``s = 1, 2, ...`` leaves
    ``sum_j 2(j+1)/(s(s+1)) theta_j`` after ``s`` calls.
    """
    if s < 1:
        raise ConfigurationError(f"s must be >= 1, got {s}")
    rho = 2.0 / (s + 1)
    # same as rho*theta + (1-rho)*prev, but a constant sequence stays bit-exact
    return prev + rho * (theta_s - prev)


def direct_weighted_average(thetas) -> np.ndarray:
    thetas = np.asarray(thetas, dtype=float)
    tau = thetas.shape[0]
    w = 2.0 * np.arange(1, tau + 1) / (tau * (tau + 1))
    return np.tensordot(w, thetas, axes=1)


def solve(cm: CubicModel, box: BoxConstraint, cfg: SolverConfig) -> np.ndarray:
    theta = project(box, cm.anchor)
    z = theta
    sigma = math.sqrt(cfg.sigma_sq)
    d = theta.shape[0]
    for s in range(cfg.tau):
        z = weighted_average_state(z, theta, s + 1)
        if s == cfg.tau - 1:
            break
        step = cubic_gradient(cm, theta)
        if sigma > 0:
            step = step + cfg.rng_stream.normal(0.0, sigma, size=d)
        theta = project(box, theta - 2.0 / (cm.mu * (s + 2)) * step)
    return z


def local_iterations(eps, m, k, T, delta0, L0, L1, M, D) -> float:
    """Real-valued local iteration count that balances solver error and noise."""
    if T < 1 or k < 1:
        raise ConfigurationError("need T >= 1 and k >= 1")
    num = (L0 + L1 * D + M * D * D / 2.0) ** 2 * eps**2 * m**2
    return num / (k * T * math.log(1.0 / delta0) * (L0 + L1 * D) ** 2)


def local_iterations_int(eps, m, k, T, delta0, L0, L1, M, D, tau_max=None) -> int:
    """:func:`local_iterations` rounded up, floored at 1 and capped at ``tau_max``."""
    tau = max(1, math.ceil(local_iterations(eps, m, k, T, delta0, L0, L1, M, D)))
    if tau_max is not None:
        tau = min(tau, int(tau_max))
    return tau
