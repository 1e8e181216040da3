"""Experiment configuration, problem construction and parameter schedules."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import dataio
from .errors import ConfigurationError
from .gmsolver import local_iterations_int
from .model import (BoxConstraint, ClientDataset, LogisticLoss, QuadraticLoss,
                    ReferenceOptimum, global_objective, reference_optimum)
from .privacy import (DpParams, NoiseCalibration, PrivacyLedger, audit_total,
                      calibrate_noise, calibrate_to_audit)

ALGORITHMS = ("dpfcrn", "fedsgd")
NOISE_POLICIES = ("theorem", "audited")


@dataclass(frozen=True)
class ExperimentConfig:
    # dataset binding: {"kind": "synthetic" | "libsvm", ...}
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic"})
    loss: str = "logistic"
    reg: float = 1.0
    quadratic_center: float | list | None = None
    n: int = 40
    m: int | None = None
    d: int | None = None
    box_half_width: float = 0.5
    L0: float = 0.1
    L1: float = 1.0
    L2: float = 1.0
    M: float | None = None
    D: float = 0.1
    mu: float = 1.0
    epsilon: float = 0.8
    delta0: float = 0.01
    delta_hat: float | None = None
    k: int | None = None
    k_over_d: float | None = None
    alpha: float = 1.0
    T: int | None = None
    epochs: int | None = None
    algorithm: str = "dpfcrn"
    seeds: tuple = (0,)
    data_seed: int = 0
    output_dir: str = "out"
    tau: int | None = None
    tau_max: int = 1_000_000
    sigma_sq: float | None = None
    noise_calibration: str = "theorem"
    private: bool = True
    fedsgd_lr: float = 1.0
    ref_tol: float = 1e-10

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "dataset", dict(self.dataset))
        self.validate()

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"algorithm must be one of {ALGORITHMS}")
        if self.loss not in ("logistic", "quadratic"):
            raise ConfigurationError("loss must be 'logistic' or 'quadratic'")
        if self.noise_calibration not in NOISE_POLICIES:
            raise ConfigurationError(f"noise_calibration must be one of {NOISE_POLICIES}")
        if (self.T is None) == (self.epochs is None):
            raise ConfigurationError("set exactly one of T and epochs")
        if self.T is not None and self.T < 0 or self.epochs is not None and self.epochs < 0:
            raise ConfigurationError("T and epochs must be non-negative")
        if self.k is not None and self.k_over_d is not None:
            raise ConfigurationError("set at most one of k and k_over_d")
        if self.n < 1:
            raise ConfigurationError("n must be >= 1")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        for name in ("L0", "D", "mu", "box_half_width"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.L1 < 0 or self.L2 < 0:
            raise ConfigurationError("L1 and L2 must be non-negative")
        if self.cubic_M <= 0:
            raise ConfigurationError("cubic coefficient M must be positive")
        if self.alpha <= 0:
            raise ConfigurationError("alpha must be positive")
        if self.tau is not None and self.tau < 1:
            raise ConfigurationError("tau must be >= 1")
        if self.sigma_sq is not None and self.sigma_sq < 0:
            raise ConfigurationError("sigma_sq must be >= 0")
        if self.private:
            self.dp_params()
        kind = self.dataset.get("kind")
        if kind not in ("synthetic", "libsvm"):
            raise ConfigurationError("dataset.kind must be 'synthetic' or 'libsvm'")
        if kind == "synthetic" and (self.m is None or self.d is None):
            raise ConfigurationError("synthetic datasets need m and d")
        if kind == "libsvm" and "path" not in self.dataset:
            raise ConfigurationError("libsvm datasets need a path")

    @property
    def cubic_M(self) -> float:
        return self.L2 if self.M is None else self.M

    def dp_params(self) -> DpParams:
        return DpParams(self.epsilon, self.delta0, self.delta_hat)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["seeds"] = list(self.seeds)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        ds = doc.get("dataset", {})
        if ds.get("kind") == "libsvm" and not Path(ds["path"]).is_absolute():
            ds["path"] = str(Path(path).parent / ds["path"])
        return cls.from_dict(doc)

    def with_overrides(self, pairs) -> "ExperimentConfig":
        """Apply ``key=value`` strings; values parse as JSON, else stay strings.

        ``dataset.<name>=...`` edits the dataset binding.
        """
        doc = self.to_dict()
        for pair in pairs:
            key, sep, raw = pair.partition("=")
            if not sep:
                raise ConfigurationError(f"override {pair!r} is not key=value")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            if key.startswith("dataset."):
                doc["dataset"][key.split(".", 1)[1]] = value
            else:
                doc[key] = value
        return self.from_dict(doc)


@dataclass
class Problem:
    raw: dataio.RawDataset
    plan: dataio.PartitionPlan
    clients: list[ClientDataset]
    model: LogisticLoss | QuadraticLoss
    box: BoxConstraint
    optimum: ReferenceOptimum

    @property
    def d(self) -> int:
        return self.box.d

    @property
    def m(self) -> int:
        return self.plan.per_client_m

    @property
    def f_star(self) -> float:
        return self.optimum.value

    def objective(self, x) -> float:
        return global_objective(self.model, self.clients, x)

    def accuracy(self, x) -> float:
        pred = np.where(self.raw.features @ x >= 0, 1.0, -1.0)
        return float(np.mean(pred == self.raw.labels))


def load_dataset(cfg: ExperimentConfig) -> dataio.RawDataset:
    source = cfg.dataset
    if source["kind"] == "synthetic":
        return dataio.generate_synthetic(
            cfg.d, cfg.n * cfg.m,
            margin=float(source.get("margin", 10.0)),
            seed=int(source.get("seed", cfg.data_seed)),
            feature_scale=float(source.get("feature_scale", 1.0)),
            half_width=cfg.box_half_width,
        )
    raw = dataio.load_libsvm(source["path"], n_features=cfg.d)
    if source.get("normalize", False):
        raw = dataio.normalize_rows(raw)
    return raw


def build_loss(cfg: ExperimentConfig, d: int):
    if cfg.loss == "logistic":
        return LogisticLoss(reg=cfg.reg)
    center = cfg.quadratic_center
    if center is not None:
        center = np.broadcast_to(np.asarray(center, dtype=float), (d,)).copy()
    return QuadraticLoss(center=center, curvature=cfg.mu)


def _problem_key(cfg: ExperimentConfig) -> str:
    keys = ("dataset", "loss", "reg", "quadratic_center", "n", "m", "d",
            "box_half_width", "D", "mu", "data_seed", "ref_tol")
    return json.dumps({k: getattr(cfg, k) for k in keys}, sort_keys=True, default=str)


_PROBLEMS: dict[str, Problem] = {}


def _build_problem(cfg: ExperimentConfig) -> Problem:
    raw = load_dataset(cfg)
    plan = dataio.partition(raw, cfg.n, seed=cfg.data_seed)
    if cfg.m is not None and plan.per_client_m != cfg.m:
        if cfg.dataset["kind"] == "libsvm" and plan.per_client_m >= cfg.m:
            plan = dataio.PartitionPlan(cfg.n, cfg.m, tuple(b[:cfg.m] for b in plan.blocks),
                                        plan.dropped)
        else:
            raise ConfigurationError(f"dataset yields m={plan.per_client_m}, config asks m={cfg.m}")
    clients = dataio.client_datasets(raw, plan)
    box = BoxConstraint.cube(raw.d, cfg.box_half_width, diameter_D=cfg.D)
    model = build_loss(cfg, raw.d)
    opt = reference_optimum(clients, model, box, tol=cfg.ref_tol)
    return Problem(raw, plan, clients, model, box, opt)


def build_problem(cfg: ExperimentConfig) -> Problem:
    """Dataset, partition, loss, box and reference optimum; cached across seeds."""
    key = _problem_key(cfg)
    if key not in _PROBLEMS:
        if len(_PROBLEMS) >= 16:
            _PROBLEMS.pop(next(iter(_PROBLEMS)))
        _PROBLEMS[key] = _build_problem(cfg)
    return _PROBLEMS[key]


def resolve_k(cfg: ExperimentConfig, d: int) -> int:
    if cfg.k is not None:
        k = int(cfg.k)
    elif cfg.k_over_d is not None:
        k = max(1, int(round(cfg.k_over_d * d)))
    else:
        k = d
    if not 1 <= k <= d:
        raise ConfigurationError(f"k={k} outside [1, d={d}]")
    return k


@dataclass(frozen=True)
class Schedule:
    tau: int
    T: int
    sigma_sq: float
    k: int
    calibration: NoiseCalibration
    ledger: PrivacyLedger

    def to_dict(self) -> dict:
        return {"tau": self.tau, "T": self.T, "sigma_sq": self.sigma_sq, "k": self.k,
                "noise_policy": self.calibration.policy}


def rounds(cfg: ExperimentConfig, m: int) -> int:
    """Explicit ``T``, or ``epochs * m``: every client consumes one sample per round."""
    return int(cfg.T) if cfg.T is not None else int(cfg.epochs) * m


def derive_schedule(cfg: ExperimentConfig, m: int | None = None, d: int | None = None) -> Schedule:
    """Local iterations, rounds and noise variance for ``cfg``.

    ``tau`` comes from the iteration-count formula (rounded up, clamped to
    ``[1, tau_max]``) unless fixed in the config; the Fed-SGD baseline uses one
    noisy step per round with first-order sensitivity ``2 sqrt(k/d) L0``.
    """
    m = cfg.m if m is None else m
    d = cfg.d if d is None else d
    if m is None or d is None:
        raise ConfigurationError("m and d are needed to derive a schedule")
    T = rounds(cfg, m)
    k = resolve_k(cfg, d)
    if cfg.algorithm == "fedsgd":
        tau, L1 = 1, 0.0
    else:
        L1 = cfg.L1
        if cfg.tau is not None:
            tau = int(cfg.tau)
        elif T == 0:
            tau = 1
        else:
            tau = local_iterations_int(cfg.epsilon, m, k, T, cfg.delta0, cfg.L0, cfg.L1,
                                       cfg.cubic_M, cfg.D, cfg.tau_max)
    if cfg.private:
        p = cfg.dp_params()
        cal = calibrate_noise(p, k, d, tau, T, m, cfg.L0, L1, cfg.D)
        if cfg.sigma_sq is not None:
            cal = replace(cal, sigma_sq=float(cfg.sigma_sq), policy="override")
        elif cfg.noise_calibration == "audited":
            cal = calibrate_to_audit(cal, p)
        ledger = audit_total(cal, p)
    else:
        p = DpParams(min(max(cfg.epsilon, 1e-12), 1.0), min(max(cfg.delta0, 1e-12), 1.0))
        sigma_sq = 0.0 if cfg.sigma_sq is None else float(cfg.sigma_sq)
        base = calibrate_noise(p, k, d, tau, max(T, 1), m, cfg.L0, L1, cfg.D)
        cal = replace(base, sigma_sq=sigma_sq, T=T, policy="none")
        ledger = audit_total(cal, p)
    return Schedule(tau, T, cal.sigma_sq, k, cal, ledger)


def convergence_alpha(cfg: ExperimentConfig, m: int, k: int, T: int) -> float:
    """Bracketed expression of the server scaling schedule with its hidden constant set to 1.

    Heuristic only; the experiments use ``alpha = 1``.
    """
    c = (cfg.L0 + cfg.L1 * cfg.D) ** 2
    top = k * math.log(1.0 / cfg.delta0) * c * T
    bottom = cfg.epsilon**2 * m**2 * cfg.mu * (cfg.L0 + cfg.L1 * cfg.D + cfg.cubic_M * cfg.D**2 / 2) * cfg.D
    return top / bottom
