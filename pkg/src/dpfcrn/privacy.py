"""Gaussian-mechanism calibration and privacy accounting.

Pipeline for one training run:

1. :func:`sensitivity` -- l2 sensitivity of one sparsified noisy gradient step,
   ``2 sqrt(k/d) (L0 + L1 D)``.
2. :func:`calibrate_noise` -- per-coordinate variance
   ``160 tau T k log(1.25/delta0) (L0 + L1 D)^2 / (eps^2 m^2 d)``.
3. :func:`per_step_epsilon` -> :func:`amplify_by_subsampling` (one of ``m``
   samples per round) -> :func:`compose` over all ``tau * T`` local steps.

:func:`audit_total` runs steps 3 on a calibration and reports whether the
composed loss stays within the configured epsilon.  All logs are natural.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .errors import CalibrationError, CompositionError, ConfigurationError

MAX_STEP_EPS = 0.9


@dataclass(frozen=True)
class DpParams:
    epsilon: float
    delta0: float
    delta_hat: float | None = None

    def __post_init__(self):
        if not 0 < self.epsilon <= 1:
            raise ConfigurationError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if not 0 < self.delta0 <= 1:
            raise ConfigurationError(f"delta0 must lie in (0, 1], got {self.delta0}")
        if self.delta_hat is not None and not 0 < self.delta_hat <= 1:
            raise ConfigurationError(f"delta_hat must lie in (0, 1], got {self.delta_hat}")


@dataclass(frozen=True)
class NoiseCalibration:
    sigma_sq: float
    sensitivity: float
    k: int
    d: int
    tau: int
    T: int
    m: int
    epsilon: float
    delta0: float
    L0: float
    L1: float
    D: float
    policy: str = "theorem"

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma_sq)

    @property
    def n_steps(self) -> int:
        return self.tau * self.T


def sensitivity(k: int, d: int, L0: float, L1: float, D: float) -> float:
    if not 1 <= k <= d:
        raise ConfigurationError(f"need 1 <= k <= d, got k={k}, d={d}")
    if not L0 > 0 or L1 < 0 or D < 0:
        raise ConfigurationError("need L0 > 0 and L1, D >= 0")
    return 2.0 * math.sqrt(k / d) * (L0 + L1 * D)


def theorem_sigma_sq(p: DpParams, k, d, tau, T, m, L0, L1, D) -> float:
    c = (L0 + L1 * D) ** 2
    return 160.0 * tau * T * k * math.log(1.25 / p.delta0) * c / (p.epsilon**2 * m**2 * d)


def calibrate_noise(p: DpParams, k: int, d: int, tau: int, T: int, m: int,
                    L0: float, L1: float, D: float) -> NoiseCalibration:
    """Smallest variance allowed by the noise condition, with all inputs kept for audit.

    Raises :class:`CalibrationError` when ``T < eps^2 / (4 tau)``.
    """
    if tau < 1 or T < 0 or m < 1:
        raise ConfigurationError(f"need tau >= 1, T >= 0, m >= 1 (tau={tau}, T={T}, m={m})")
    delta_s = sensitivity(k, d, L0, L1, D)
    if T > 0 and T < p.epsilon**2 / (4.0 * tau):
        raise CalibrationError(
            f"T >= eps^2/(4 tau) violated: T={T} < {p.epsilon**2 / (4.0 * tau):.6g}"
        )
    return NoiseCalibration(
        sigma_sq=theorem_sigma_sq(p, k, d, tau, T, m, L0, L1, D),
        sensitivity=delta_s, k=k, d=d, tau=tau, T=T, m=m,
        epsilon=p.epsilon, delta0=p.delta0, L0=L0, L1=L1, D=D,
    )


def per_step_epsilon(cal: NoiseCalibration, delta0: float) -> float:
    """Privacy loss of one local noisy step on the sampled data point."""
    if cal.sigma_sq <= 0:
        return math.inf
    num = 2.0 * math.sqrt(2.0 * cal.k * math.log(1.25 / delta0)) * (cal.L0 + cal.L1 * cal.D)
    return num / (cal.sigma * math.sqrt(cal.d))


def gaussian_mechanism_epsilon(sens: float, sigma: float, delta: float) -> float:
    """Epsilon of the Gaussian mechanism with l2 sensitivity ``sens`` and noise std ``sigma``."""
    if sigma <= 0:
        return math.inf
    return math.sqrt(2.0 * math.log(1.25 / delta)) * sens / sigma


def amplify_by_subsampling(eps: float, delta: float, m: int) -> tuple[float, float]:
    """Amplification from running on one uniformly drawn sample out of ``m``."""
    if not eps > 0 or m < 1:
        raise ConfigurationError(f"need eps > 0 and m >= 1 (eps={eps}, m={m})")
    if math.isinf(eps):
        return math.inf, delta / m
    if eps > 700.0 and m > 1:
        # expm1 overflows; log((m - 1 + e^eps) / m) stays exact at this scale
        return float(np.logaddexp(math.log(m - 1), eps)) - math.log(m), delta / m
    return math.log1p(math.expm1(eps) / m), delta / m


def _check_step(eps, delta):
    if not 0 < eps <= MAX_STEP_EPS:
        raise CompositionError(f"per-step epsilon {eps!r} outside (0, {MAX_STEP_EPS}]")
    if not 0 < delta <= 1:
        raise CompositionError(f"per-step delta {delta!r} outside (0, 1]")


def _composed_eps(sum_sq: float, delta_hat: float) -> float:
    return math.sqrt(2.0 * sum_sq * math.log(math.e + math.sqrt(sum_sq) / delta_hat)) + sum_sq


def compose(steps: Sequence[tuple[float, float]], delta_hat: float) -> tuple[float, float]:
    """Heterogeneous advanced composition.

    Returns ``(eps_total, delta_total)`` with
    ``eps_total = sqrt(sum 2 e_t^2 log(e + sqrt(sum e_t^2)/delta_hat)) + sum e_t^2`` and
    ``delta_total = 1 - (1 - delta_hat) prod (1 - d_t)``.  An empty list costs nothing.
    """
    if not steps:
        return 0.0, 0.0
    if not 0 < delta_hat <= 1:
        raise CompositionError(f"delta_hat {delta_hat!r} outside (0, 1]")
    sum_sq = 0.0
    log_keep = math.log1p(-delta_hat) if delta_hat < 1 else -math.inf
    for eps, delta in steps:
        _check_step(eps, delta)
        sum_sq += eps * eps
        log_keep += math.log1p(-delta) if delta < 1 else -math.inf
    return _composed_eps(sum_sq, delta_hat), -math.expm1(log_keep)


def compose_identical(eps: float, delta: float, count: int, delta_hat: float) -> tuple[float, float]:
    """:func:`compose` for ``count`` copies of one step, in O(1)."""
    if count == 0:
        return 0.0, 0.0
    _check_step(eps, delta)
    if not 0 < delta_hat <= 1:
        raise CompositionError(f"delta_hat {delta_hat!r} outside (0, 1]")
    sum_sq = count * eps * eps
    log_keep = (math.log1p(-delta_hat) if delta_hat < 1 else -math.inf) + count * math.log1p(-delta)
    return _composed_eps(sum_sq, delta_hat), -math.expm1(log_keep)


def default_delta_hat(sum_sq: float) -> float:
    """``sqrt(sum of squared per-step losses)``, capped at 1 to stay a valid slack."""
    return min(1.0, math.sqrt(sum_sq))


@dataclass
class PrivacyLedger:
    """Per-step (eps, delta) records, stored run-length as ``(eps, delta, count)``."""

    groups: list[tuple[float, float, int]]
    target_eps: float
    delta_hat: float = 0.0
    composed_eps: float = 0.0
    composed_delta: float = 0.0
    valid: bool = True
    reasons: list[str] = field(default_factory=list)
    inputs: dict = field(default_factory=dict)
    fixed_delta_hat: float | None = None

    @property
    def n_steps(self) -> int:
        return sum(c for _, _, c in self.groups)

    @property
    def per_step_eps(self) -> list[float]:
        return [e for e, _, c in self.groups for _ in range(c)]

    @property
    def per_step_delta(self) -> list[float]:
        return [dl for _, dl, c in self.groups for _ in range(c)]

    def recompute(self):
        """Recompose totals from the step records and refresh ``valid``."""
        self.reasons = []
        if self.n_steps == 0:
            self.delta_hat, self.composed_eps, self.composed_delta = 0.0, 0.0, 0.0
            self.valid = True
            return self
        sum_sq = sum(c * e * e for e, _, c in self.groups)
        if self.fixed_delta_hat is None:
            self.delta_hat = default_delta_hat(sum_sq)
        else:
            self.delta_hat = self.fixed_delta_hat
        worst = max(e for e, _, _ in self.groups)
        if not worst <= MAX_STEP_EPS:
            self.reasons.append(f"per-step epsilon {worst:.6g} exceeds {MAX_STEP_EPS}")
        if math.isinf(sum_sq):
            self.composed_eps = math.inf
            self.composed_delta = 1.0
        else:
            self.composed_eps = _composed_eps(sum_sq, self.delta_hat)
            log_keep = math.log1p(-self.delta_hat) if self.delta_hat < 1 else -math.inf
            for _, dl, c in self.groups:
                log_keep += c * math.log1p(-dl)
            self.composed_delta = -math.expm1(log_keep)
        if not self.composed_eps <= self.target_eps:
            self.reasons.append(
                f"composed epsilon {self.composed_eps:.6g} exceeds target {self.target_eps:.6g}"
            )
        self.valid = not self.reasons
        return self

    def spent_after(self, n_steps: int) -> tuple[float, float]:
        """Composed (eps, delta) after the first ``n_steps`` steps, same slack rule."""
        remaining = n_steps
        prefix = []
        for e, dl, c in self.groups:
            take = min(c, remaining)
            if take:
                prefix.append((e, dl, take))
            remaining -= take
        if not prefix:
            return 0.0, 0.0
        partial = PrivacyLedger(prefix, self.target_eps, fixed_delta_hat=self.fixed_delta_hat)
        return partial.recompute().composed()

    def composed(self) -> tuple[float, float]:
        return self.composed_eps, self.composed_delta

    def to_dict(self) -> dict:
        return {
            "inputs": self.inputs,
            "per_step": [{"eps": e, "delta": dl, "count": c} for e, dl, c in self.groups],
            "delta_hat": self.delta_hat,
            "composed": {"eps": self.composed_eps, "delta": self.composed_delta},
            "target_eps": self.target_eps,
            "fixed_delta_hat": self.fixed_delta_hat,
            "valid": self.valid,
            "reasons": list(self.reasons),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, doc: dict) -> "PrivacyLedger":
        groups = [(g["eps"], g["delta"], g["count"]) for g in doc["per_step"]]
        return cls(groups, doc["target_eps"], inputs=doc.get("inputs", {}),
                   fixed_delta_hat=doc.get("fixed_delta_hat")).recompute()


def audit_total(cal: NoiseCalibration, p: DpParams) -> PrivacyLedger:
    """Account all ``tau * T`` noisy local steps of one client.

    Each step is the Gaussian mechanism on the sampled point, amplified by the
    one-in-``m`` sampling, then composed with ``delta_hat = sqrt(sum eps'^2)``.
    An invalid ledger carries the failed checks in ``reasons``.
    """
    inputs = asdict(cal)
    inputs["sigma"] = cal.sigma
    if cal.n_steps == 0:
        return PrivacyLedger([], p.epsilon, inputs=inputs, fixed_delta_hat=p.delta_hat).recompute()
    eps_s = per_step_epsilon(cal, p.delta0)
    eps_amp, delta_amp = amplify_by_subsampling(eps_s, p.delta0, cal.m)
    inputs["per_step_eps_raw"] = eps_s
    ledger = PrivacyLedger([(eps_amp, delta_amp, cal.n_steps)], p.epsilon, inputs=inputs,
                           fixed_delta_hat=p.delta_hat)
    return ledger.recompute()


def calibrate_to_audit(cal: NoiseCalibration, p: DpParams, rtol: float = 1e-10) -> NoiseCalibration:
    """Smallest ``sigma_sq`` whose exact audit certifies ``p.epsilon``.

    The result spends the budget exactly (up to ``rtol``), so it may lie above
    or below the closed-form calibration it starts from.
    """
    if cal.n_steps == 0:
        return cal

    def excess(log_sigma):
        trial = replace(cal, sigma_sq=math.exp(2.0 * log_sigma))
        led = audit_total(trial, p)
        worst = led.groups[0][0]
        return max(led.composed_eps / p.epsilon, worst / MAX_STEP_EPS) - 1.0

    start = 0.5 * math.log(cal.sigma_sq) if cal.sigma_sq > 0 else 0.0
    lo = hi = start
    while excess(hi) > 0:
        hi += 1.0
    while excess(lo) <= 0:
        lo -= 1.0
    root = brentq(excess, lo, hi, xtol=rtol, rtol=rtol)
    sigma = math.exp(root)
    out = replace(cal, sigma_sq=sigma * sigma, policy="audited")
    while not audit_total(out, p).valid:
        sigma *= 1.0 + 10 * rtol
        out = replace(cal, sigma_sq=sigma * sigma, policy="audited")
    return out
