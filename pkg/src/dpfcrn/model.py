"""Per-sample loss oracles, box geometry and the reference optimum.

Two loss models are provided:

* :class:`LogisticLoss` -- ``log(1 + exp(-b a.x)) + (reg/2) ||x||^2``
* :class:`QuadraticLoss` -- ``(curvature/2) ||x - c||^2`` with ``c`` either fixed
  or taken from the sample's feature vector.

Oracles take a single :class:`DataSample`; the ``batch_*`` helpers evaluate the
sample mean over a feature matrix and are what the client objective ``f_i`` and
the global objective ``f`` are built from.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, ConvergenceError

# max_z |d^3/dz^3 log(1 + e^-z)| = max |s(1-s)(1-2s)| = sqrt(3)/18
LOGISTIC_THIRD_DERIVATIVE_MAX = np.sqrt(3.0) / 18.0


@dataclass(frozen=True)
class DataSample:
    features: np.ndarray
    label: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=float))
        if self.label not in (-1.0, 1.0):
            raise ConfigurationError(f"label must be -1 or +1, got {self.label}")


@dataclass(frozen=True)
class ClientDataset:
    """``m`` samples stored row-wise; ``labels`` are in {-1, +1}."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.features, dtype=float))
        b = np.asarray(self.labels, dtype=float).reshape(-1)
        if a.shape[0] < 1:
            raise ConfigurationError("a client dataset needs at least one sample")
        if a.shape[0] != b.shape[0]:
            raise ConfigurationError(
                f"{a.shape[0]} feature rows but {b.shape[0]} labels"
            )
        if not np.all(np.isin(b, (-1.0, 1.0))):
            raise ConfigurationError("labels must be -1 or +1")
        object.__setattr__(self, "features", a)
        object.__setattr__(self, "labels", b)

    @property
    def m(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def sample(self, j: int) -> DataSample:
        return DataSample(self.features[j], float(self.labels[j]))


@dataclass(frozen=True)
class BoxConstraint:
    lower: np.ndarray
    upper: np.ndarray
    diameter_D: float

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.asarray(self.upper, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise ConfigurationError("box bounds must have the same length")
        if not np.all(lo < hi):
            raise ConfigurationError("box needs lower < upper in every coordinate")
        if not self.diameter_D > 0:
            raise ConfigurationError("diameter D must be positive")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def cube(cls, d: int, half_width: float = 0.5, diameter_D: float | None = None):
        """Symmetric box ``[-half_width, half_width]^d``.

        ``diameter_D`` defaults to the Euclidean diameter ``2 half_width sqrt(d)``.
        """
        if diameter_D is None:
            diameter_D = 2.0 * half_width * np.sqrt(d)
        return cls(np.full(d, -half_width), np.full(d, half_width), diameter_D)

    @property
    def d(self) -> int:
        return self.lower.shape[0]

    def contains(self, x, atol: float = 0.0) -> bool:
        x = np.asarray(x)
        return bool(np.all(x >= self.lower - atol) and np.all(x <= self.upper + atol))

    def uniform(self, rng: np.random.Generator, size=None) -> np.ndarray:
        shape = (self.d,) if size is None else (size, self.d)
        return rng.uniform(self.lower, self.upper, size=shape)


def project(box: BoxConstraint, x) -> np.ndarray:
    """Euclidean projection onto the box, i.e. a coordinatewise clamp."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != box.d:
        raise ConfigurationError(f"vector of length {x.shape[-1]} for a {box.d}-dim box")
    return np.clip(x, box.lower, box.upper)


@dataclass(frozen=True)
class LossConstants:
    """Constants of the regularity assumptions, all supplied by configuration."""

    L0: float
    L1: float
    L2: float
    mu: float
    d: int

    def __post_init__(self):
        for name in ("L0", "L1", "L2", "mu"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be strictly positive")
        if self.mu > self.L1:
            raise ConfigurationError(f"mu={self.mu} exceeds L1={self.L1}")

    @property
    def per_coord_grad_bound(self) -> float:
        return self.L0 / np.sqrt(self.d)

    @property
    def per_row_hess_bound(self) -> float:
        return self.L1 / np.sqrt(self.d)


def _check_dims(x, a):
    if x.shape[-1] != a.shape[-1]:
        raise ConfigurationError(
            f"model dimension {x.shape[-1]} does not match sample dimension {a.shape[-1]}"
        )


@dataclass(frozen=True)
class LogisticLoss:
    """Logistic loss with an L2 term carried by every sample."""

    reg: float = 1.0
    name: str = field(default="logistic", init=False)

    def value(self, x, s: DataSample) -> float:
        x = np.asarray(x, dtype=float)
        _check_dims(x, s.features)
        z = s.label * (s.features @ x)
        return float(np.logaddexp(0.0, -z) + 0.5 * self.reg * (x @ x))

    def gradient(self, x, s: DataSample) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        _check_dims(x, s.features)
        z = s.label * (s.features @ x)
        return -s.label * expit(-z) * s.features + self.reg * x

    def hessian(self, x, s: DataSample) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        _check_dims(x, s.features)
        z = s.label * (s.features @ x)
        w = expit(z) * expit(-z)
        return w * np.outer(s.features, s.features) + self.reg * np.eye(x.shape[0])

    def hvp(self, x, s: DataSample):
        """Hessian-vector product closure; avoids forming the d x d matrix."""
        x = np.asarray(x, dtype=float)
        z = s.label * (s.features @ x)
        w = expit(z) * expit(-z)
        a, reg = s.features, self.reg
        return lambda r: w * a * (a @ r) + reg * r

    def batch_value(self, x, features, labels) -> float:
        z = labels * (features @ x)
        return float(np.mean(np.logaddexp(0.0, -z)) + 0.5 * self.reg * (x @ x))

    def batch_gradient(self, x, features, labels) -> np.ndarray:
        z = labels * (features @ x)
        coef = -labels * expit(-z)
        return features.T @ coef / features.shape[0] + self.reg * x

    def batch_hessian(self, x, features, labels) -> np.ndarray:
        z = labels * (features @ x)
        w = expit(z) * expit(-z)
        h = (features.T * w) @ features / features.shape[0]
        return h + self.reg * np.eye(x.shape[0])

    def hessian_lipschitz(self, features) -> float:
        """Hessian-Lipschitz constant over all rows of ``features``."""
        norms = np.linalg.norm(np.atleast_2d(features), axis=1)
        return float(LOGISTIC_THIRD_DERIVATIVE_MAX * np.max(norms) ** 3)

    def strong_convexity(self) -> float:
        return self.reg


@dataclass(frozen=True)
class QuadraticLoss:
    """``(curvature/2) ||x - c||^2``; ``c`` is the sample's features unless fixed."""

    center: np.ndarray | None = None
    curvature: float = 1.0
    name: str = field(default="quadratic", init=False)

    def __post_init__(self):
        if self.center is not None:
            object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if not self.curvature > 0:
            raise ConfigurationError("curvature must be positive")

    def _c(self, features):
        return features if self.center is None else self.center

    def value(self, x, s: DataSample) -> float:
        x = np.asarray(x, dtype=float)
        _check_dims(x, s.features)
        r = x - self._c(s.features)
        return float(0.5 * self.curvature * (r @ r))

    def gradient(self, x, s: DataSample) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        _check_dims(x, s.features)
        return self.curvature * (x - self._c(s.features))

    def hessian(self, x, s: DataSample) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        _check_dims(x, s.features)
        return self.curvature * np.eye(x.shape[0])

    def hvp(self, x, s: DataSample):
        c = self.curvature
        return lambda r: c * r

    def batch_value(self, x, features, labels) -> float:
        r = x - self._c(features)
        return float(0.5 * self.curvature * np.mean(np.sum(np.atleast_2d(r) ** 2, axis=1)))

    def batch_gradient(self, x, features, labels) -> np.ndarray:
        c = self._c(features)
        cbar = c if c.ndim == 1 else c.mean(axis=0)
        return self.curvature * (x - cbar)

    def batch_hessian(self, x, features, labels) -> np.ndarray:
        return self.curvature * np.eye(x.shape[0])

    def hessian_lipschitz(self, features=None) -> float:
        return 0.0

    def strong_convexity(self) -> float:
        return self.curvature


LossModel = LogisticLoss | QuadraticLoss


def loss_value(model: LossModel, x, s: DataSample) -> float:
    return model.value(x, s)


def loss_gradient(model: LossModel, x, s: DataSample) -> np.ndarray:
    return model.gradient(x, s)


def loss_hessian(model: LossModel, x, s: DataSample) -> np.ndarray:
    return model.hessian(x, s)


def client_objective(model: LossModel, ds: ClientDataset, x) -> float:
    return model.batch_value(np.asarray(x, dtype=float), ds.features, ds.labels)


def client_gradient(model: LossModel, ds: ClientDataset, x) -> np.ndarray:
    return model.batch_gradient(np.asarray(x, dtype=float), ds.features, ds.labels)


def client_hessian(model: LossModel, ds: ClientDataset, x) -> np.ndarray:
    return model.batch_hessian(np.asarray(x, dtype=float), ds.features, ds.labels)


def global_objective(model: LossModel, datasets: Sequence[ClientDataset], x) -> float:
    return float(np.mean([client_objective(model, ds, x) for ds in datasets]))


def global_gradient(model: LossModel, datasets: Sequence[ClientDataset], x) -> np.ndarray:
    return np.mean([client_gradient(model, ds, x) for ds in datasets], axis=0)


def cubic_upper_bound(model: LossModel, ds: ClientDataset, v, w, M: float) -> float:
    """Cubic-regularized second-order model of ``f_i`` around ``w`` evaluated at ``v``.

    For ``M`` at least the Hessian-Lipschitz constant this upper-bounds ``f_i(v)``.
    """
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    r = v - w
    g = client_gradient(model, ds, w)
    h = client_hessian(model, ds, w)
    nr = np.linalg.norm(r)
    return float(client_objective(model, ds, w) + g @ r + 0.5 * r @ h @ r + M / 6.0 * nr**3)


def gradient_mapping_residual(model, datasets, box, x, gamma=1.0) -> float:
    """``||x - P(x - gamma grad f(x))||``; zero exactly at the constrained minimizer."""
    g = global_gradient(model, datasets, x)
    return float(np.linalg.norm(x - project(box, x - gamma * g)))


@dataclass(frozen=True)
class ReferenceOptimum:
    x: np.ndarray
    value: float
    residual: float
    iterations: int


def reference_optimum(
    datasets: Sequence[ClientDataset],
    model: LossModel,
    box: BoxConstraint,
    tol: float = 1e-10,
    max_iter: int = 1_000_000,
    x0=None,
) -> ReferenceOptimum:
    """Deterministic projected gradient descent with backtracking on the step.

    A step ``t`` is accepted when the local gradient-Lipschitz estimate
    ``||grad(x+) - grad(x)|| / ||x+ - x||`` is at most ``1/t``; this test stays
    meaningful at residuals far below the resolution of ``f`` itself.
    Stops once the gradient-mapping residual (``gamma = 1``) drops to ``tol``;
    ``value`` is the ``f(x*)`` baseline used for suboptimality curves.
    """
    if not tol > 0:
        raise ConfigurationError("tol must be positive")
    x = project(box, np.zeros(box.d) if x0 is None else np.asarray(x0, dtype=float))
    g = global_gradient(model, datasets, x)
    step = 1.0
    residual = np.inf
    for it in range(max_iter):
        residual = float(np.linalg.norm(x - project(box, x - g)))
        if residual <= tol:
            return ReferenceOptimum(x, global_objective(model, datasets, x), residual, it)
        while True:
            x_new = project(box, x - step * g)
            g_new = global_gradient(model, datasets, x_new)
            dx = np.linalg.norm(x_new - x)
            if dx == 0 or np.linalg.norm(g_new - g) * step <= dx or step < 1e-12:
                break
            step *= 0.5
        x, g = x_new, g_new
        step = min(step * 1.5, 1e6)
    raise ConvergenceError(f"reference optimum not reached in {max_iter} iterations", residual)
