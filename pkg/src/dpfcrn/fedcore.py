"""Federated rounds: broadcast, local noisy cubic solves, sparsified uplink, server update.

Also hosts the first-order DP-Fed-SGD baseline, which shares the sparsifier,
the accountant and the :class:`RoundRecord` schema.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import BinaryIO, Callable

import numpy as np

from . import sparsify
from .config import ExperimentConfig, Problem, Schedule, build_problem, derive_schedule
from .errors import AuditError, ConfigurationError
from .gmsolver import DENSE_HESSIAN_MAX_D, CubicModel, SolverConfig, solve
from .model import BoxConstraint, ClientDataset, project
from .privacy import NoiseCalibration, PrivacyLedger
from .rng import DATA, MASK, SOLVER, make_rng

log = logging.getLogger(__name__)


@dataclass
class ClientHandle:
    """A client's local data plus its three independent random streams."""

    client_id: int
    dataset: ClientDataset
    data_rng: np.random.Generator
    solver_rng: np.random.Generator
    mask_rng: np.random.Generator

    @classmethod
    def create(cls, client_id: int, dataset: ClientDataset, seed: int) -> "ClientHandle":
        return cls(client_id, dataset,
                   make_rng(seed, client_id, DATA),
                   make_rng(seed, client_id, SOLVER),
                   make_rng(seed, client_id, MASK))


@dataclass(frozen=True)
class RoundRecord:
    round: int
    suboptimality: float
    test_accuracy: float
    uplink_bytes: int
    privacy_spent_so_far: tuple[float, float]


@dataclass
class FederationState:
    global_model: np.ndarray
    clients: list[ClientHandle]
    alpha: float = 1.0
    M: float = 1.0
    mu: float = 1.0
    round: int = 0
    history: list[RoundRecord] = field(default_factory=list)
    ledger: PrivacyLedger | None = None
    evaluate: Callable[[np.ndarray], tuple[float, float]] | None = None
    replay: BinaryIO | None = None

    @property
    def n(self) -> int:
        return len(self.clients)

    def _spent(self, steps_per_round: int) -> tuple[float, float]:
        if self.ledger is None:
            return float("nan"), float("nan")
        return self.ledger.spent_after(steps_per_round * self.round)

    def _record(self, uplink: int, steps_per_round: int) -> RoundRecord:
        if self.evaluate is None:
            sub, acc = float("nan"), float("nan")
        else:
            sub, acc = self.evaluate(self.global_model)
        rec = RoundRecord(self.round, sub, acc, uplink, self._spent(steps_per_round))
        self.history.append(rec)
        return rec


def _check(st: FederationState, box: BoxConstraint, k: int):
    d = box.d
    if st.global_model.shape != (d,):
        raise ConfigurationError(f"global model of shape {st.global_model.shape} for d={d}")
    if not 1 <= k <= d:
        raise ConfigurationError(f"k={k} outside [1, {d}]")
    for c in st.clients:
        if c.dataset.d != d:
            raise ConfigurationError(f"client {c.client_id} has d={c.dataset.d}, model has {d}")


def server_update(x_t, updates, n: int, box: BoxConstraint | None = None) -> np.ndarray:
    """``x_t + (1/n) sum expand(u)`` folded in list order, then projected if ``box`` is given."""
    acc = np.zeros_like(x_t)
    for u in updates:
        acc += sparsify.expand(u)
    x = x_t + acc / n
    return x if box is None else project(box, x)


def _upload(st, client, y, k, uplink):
    mask = sparsify.sample_mask(y.shape[0], k, client.mask_rng)
    u = sparsify.apply(y, mask, round=st.round, client_id=client.client_id)
    wire = sparsify.serialize(u)
    if st.replay is not None:
        st.replay.write(wire)
    return u, uplink + len(wire)


def run_round(st: FederationState, model, box: BoxConstraint, cal: NoiseCalibration,
              k: int) -> RoundRecord:
    """One DP-FCRN communication round; mutates ``st`` and returns the new record."""
    _check(st, box, k)
    if cal.d != box.d or cal.k != k:
        raise ConfigurationError("calibration does not match (d, k) of the round")
    x_t = st.global_model
    d = box.d
    updates = []
    uplink = 0
    for client in st.clients:
        j = int(client.data_rng.integers(client.dataset.m))
        s = client.dataset.sample(j)
        g = model.gradient(x_t, s)
        H = model.hessian(x_t, s) if d <= DENSE_HESSIAN_MAX_D else model.hvp(x_t, s)
        cm = CubicModel(x_t, g, H, st.M, st.mu)
        x_local = solve(cm, box, SolverConfig(cal.tau, cal.sigma_sq, client.solver_rng))
        u, uplink = _upload(st, client, st.alpha * (x_local - x_t), k, uplink)
        updates.append(u)
    st.global_model = server_update(x_t, updates, st.n, box)
    st.round += 1
    return st._record(uplink, cal.tau)


def run_fedsgd_round(st: FederationState, model, box: BoxConstraint, cal: NoiseCalibration,
                     k: int, lr: float) -> RoundRecord:
    """One DP-Fed-SGD round: noisy sampled gradients, sparsified, averaged, projected step."""
    _check(st, box, k)
    x_t = st.global_model
    sigma = cal.sigma
    updates = []
    uplink = 0
    for client in st.clients:
        j = int(client.data_rng.integers(client.dataset.m))
        g = model.gradient(x_t, client.dataset.sample(j))
        if sigma > 0:
            g = g + client.solver_rng.normal(0.0, sigma, size=box.d)
        u, uplink = _upload(st, client, g, k, uplink)
        updates.append(u)
    step = server_update(np.zeros_like(x_t), updates, st.n)
    st.global_model = project(box, x_t - lr * step)
    st.round += 1
    return st._record(uplink, 1)


@dataclass
class RunResult:
    records: list[RoundRecord]
    schedule: Schedule
    final_model: np.ndarray
    seed: int


def _evaluator(problem: Problem):
    f_star = problem.f_star

    def evaluate(x):
        return problem.objective(x) - f_star, problem.accuracy(x)

    return evaluate


def train(cfg: ExperimentConfig, seed: int | None = None, problem: Problem | None = None,
          replay: BinaryIO | None = None) -> RunResult:
    """Full training run for ``cfg.algorithm`` under one seed.

    Refuses to start (:class:`AuditError`) when a private run's ledger does not
    certify the configured epsilon.
    """
    seed = cfg.seeds[0] if seed is None else seed
    problem = build_problem(cfg) if problem is None else problem
    sched = derive_schedule(cfg, problem.m, problem.d)
    if cfg.private and not sched.ledger.valid:
        raise AuditError("privacy audit failed: " + "; ".join(sched.ledger.reasons), sched.ledger)
    st = FederationState(
        global_model=project(problem.box, np.zeros(problem.d)),
        clients=[ClientHandle.create(i, ds, seed) for i, ds in enumerate(problem.clients)],
        alpha=cfg.alpha, M=cfg.cubic_M, mu=cfg.mu,
        ledger=sched.ledger, evaluate=_evaluator(problem), replay=replay,
    )
    log.info("%s seed=%d: tau=%d T=%d k=%d sigma^2=%.4g", cfg.algorithm, seed,
             sched.tau, sched.T, sched.k, sched.sigma_sq)
    for _ in range(sched.T):
        if cfg.algorithm == "dpfcrn":
            run_round(st, problem.model, problem.box, sched.calibration, sched.k)
        else:
            run_fedsgd_round(st, problem.model, problem.box, sched.calibration, sched.k,
                             cfg.fedsgd_lr)
    return RunResult(st.history, sched, st.global_model, seed)


def run_training(cfg: ExperimentConfig) -> list[RoundRecord]:
    return train(cfg).records


def run_baseline_fedsgd(cfg: ExperimentConfig) -> list[RoundRecord]:
    return train(replace(cfg, algorithm="fedsgd")).records
