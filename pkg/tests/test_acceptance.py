"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The lines are collected in ``RESULTS`` and printed in the terminal summary
(see conftest.py). Running this file directly prints them as well.
"""
import math
import time
from itertools import product

import numpy as np
import pytest
from scipy.optimize import bisect

from dpfcrn import sparsify
from dpfcrn.config import ExperimentConfig
from dpfcrn.dataio import format_libsvm, generate_synthetic, parse_libsvm
from dpfcrn.experiment import MetricsTable, run_experiment
from dpfcrn.fedcore import train
from dpfcrn.gmsolver import (CubicModel, SolverConfig, cubic_value, direct_weighted_average,
                             local_iterations_int, solve, weighted_average_state)
from dpfcrn.model import (BoxConstraint, ClientDataset, DataSample, LogisticLoss, client_objective,
                          cubic_upper_bound, loss_gradient, loss_hessian, loss_value)
from dpfcrn.privacy import DpParams, audit_total, calibrate_noise
from dpfcrn.rng import make_rng

RESULTS: dict[int, str] = {}

DESK = dict(dataset={"kind": "synthetic"}, n=10, m=200, d=20, epsilon=0.8, delta0=0.01,
            epochs=2, seeds=[0, 1, 2, 3, 4], noise_calibration="audited")


def report(n, ok, detail):
    RESULTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(RESULTS[n])
    assert ok, RESULTS[n]


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def test_criterion_01_derivatives():
    t0 = time.perf_counter()
    rng = make_rng(101)
    loss = LogisticLoss()
    d, h = 6, 1e-5
    worst_g = worst_h = 0.0
    for _ in range(100):
        s = DataSample(rng.normal(size=d) / math.sqrt(d), float(rng.choice([-1.0, 1.0])))
        x = rng.uniform(-0.5, 0.5, d)
        E = np.eye(d) * h
        fd_g = np.array([(loss_value(loss, x + e, s) - loss_value(loss, x - e, s)) / (2 * h)
                         for e in E])
        fd_h = np.array([(loss_gradient(loss, x + e, s) - loss_gradient(loss, x - e, s)) / (2 * h)
                         for e in E])
        worst_g = max(worst_g, rel_err(fd_g, loss_gradient(loss, x, s)))
        worst_h = max(worst_h, rel_err(fd_h, loss_hessian(loss, x, s)))
    dt = time.perf_counter() - t0
    report(1, worst_g <= 1e-5 and worst_h <= 1e-4 and dt < 5,
           f"grad rel err {worst_g:.2e}, Hessian rel err {worst_h:.2e}, {dt:.2f}s")


def test_criterion_02_sparsifier_laws():
    t0 = time.perf_counter()
    worst_mean = worst_var = 0.0
    for d in range(1, 7):
        x = make_rng(200 + d).normal(size=d)
        for k in range(1, d + 1):
            outs = np.array([sparsify.expand(sparsify.apply(x, m)) for m in sparsify.all_masks(d, k)])
            worst_mean = max(worst_mean, float(np.max(np.abs(outs.mean(axis=0) - x))))
            var = np.mean(np.sum((outs - x) ** 2, axis=1))
            target = (d / k - 1) * float(x @ x)
            worst_var = max(worst_var, abs(var - target) / max(target, 1.0))
    dt = time.perf_counter() - t0
    report(2, worst_mean <= 1e-12 and worst_var <= 1e-12 and dt < 10,
           f"max bias {worst_mean:.1e}, max variance-identity err {worst_var:.1e}, {dt:.2f}s")


def test_criterion_03_calibration():
    p = DpParams(1.0, 0.01)
    cal = calibrate_noise(p, k=10, d=100, tau=10, T=100, m=1000, L0=0.1, L1=1.0, D=0.1)
    exact = 160 * 10 * 100 * 10 * math.log(1.25 / 0.01) * (0.1 + 0.1) ** 2 / (1.0 * 1000**2 * 100)
    err = abs(cal.sigma_sq - exact) / exact
    worst = 0.0
    for eps, k, d, tau, T, m in product((0.4, 1.0), (1, 3, 10), (50, 200), (1, 37), (5, 100),
                                        (100, 1000)):
        pp = DpParams(eps, 0.01)
        a = calibrate_noise(pp, k, d, tau, T, m, 0.1, 1.0, 0.1).sigma_sq
        b = calibrate_noise(pp, 2 * k, d, tau, T, m, 0.1, 1.0, 0.1).sigma_sq
        worst = max(worst, abs(a / b - 0.5))
    report(3, err <= 1e-9 and abs(cal.sigma_sq - 3.090e-3) < 5e-7 and worst == 0.0,
           f"sigma^2 = {cal.sigma_sq:.6e} (rel err {err:.1e}), max |ratio - 1/2| = {worst:.1e}")


def test_criterion_04_accountant_soundness():
    t0 = time.perf_counter()
    d = 100
    bad = []
    worst = 0.0
    for eps, kd, m in product((0.4, 0.6, 0.8, 1.0), (0.08, 0.1, 0.2, 1.0), (100, 1000)):
        k = round(kd * d)
        tau = local_iterations_int(eps, m, k, 50, 0.01, 0.1, 1.0, 1.0, 0.1)
        T = max(math.ceil(eps**2 / (4 * tau)), 50)
        if T != 50:
            tau = local_iterations_int(eps, m, k, T, 0.01, 0.1, 1.0, 1.0, 0.1)
        p = DpParams(eps, 0.01)
        led = audit_total(calibrate_noise(p, k, d, tau, T, m, 0.1, 1.0, 0.1), p)
        worst = max(worst, led.composed_eps / eps)
        if not led.composed_eps <= eps:
            bad.append(f"(eps={eps}, k/d={kd}, m={m}: {led.composed_eps:.3g})")
    dt = time.perf_counter() - t0
    detail = f"{32 - len(bad)}/32 cells certified, worst eps~/eps = {worst:.3g}, {dt:.2f}s"
    if bad:
        detail += "; over budget: " + " ".join(bad[:4]) + (" ..." if len(bad) > 4 else "")
    report(4, not bad and dt < 30, detail)


def _root_1d(g, h, M, lo, hi):
    def dphi(t):
        return g + h * t + 0.5 * M * t * abs(t)

    if dphi(lo) >= 0:
        return lo
    if dphi(hi) <= 0:
        return hi
    return bisect(dphi, lo, hi, xtol=1e-14)


def test_criterion_05_solver_oracles():
    rng = make_rng(505)
    box1 = BoxConstraint.cube(1)
    cubic_err = 0.0
    for _ in range(10):
        g, h, M, a = rng.uniform(-3, 3), rng.uniform(0.5, 3), rng.uniform(0.1, 10), rng.uniform(-0.4, 0.4)
        t_star = _root_1d(g, h, M, -0.5 - a, 0.5 - a)
        cm = CubicModel(np.array([a]), np.array([g]), np.array([[h]]), M=M, mu=h)
        z = solve(cm, box1, SolverConfig(10_000, 0.0))
        cubic_err = max(cubic_err, abs(z[0] - a - t_star))
    quad_err = 0.0
    for _ in range(5):
        A = rng.normal(size=(3, 3))
        H = A @ A.T / 3 + np.eye(3)
        theta0, v_star = rng.uniform(-0.2, 0.2, 3), rng.uniform(-0.2, 0.2, 3)
        g = H @ (theta0 - v_star)
        cm = CubicModel(theta0, g, H, M=1e-9, mu=float(np.linalg.eigvalsh(H).min()))
        z = solve(cm, BoxConstraint.cube(3), SolverConfig(10_000, 0.0))
        quad_err = max(quad_err, float(np.linalg.norm(z - (theta0 - np.linalg.solve(H, g)))))
    avg_err = 0.0
    for tau in (1, 2, 10, 100, 1000):
        th = rng.normal(size=(tau, 4))
        z = th[0]
        for s in range(1, tau):
            z = weighted_average_state(z, th[s], s + 1)
        avg_err = max(avg_err, float(np.max(np.abs(z - direct_weighted_average(th)))))
    report(5, cubic_err <= 1e-3 and quad_err <= 1e-3 and avg_err <= 1e-12,
           f"1-D cubic err {cubic_err:.1e}, quadratic err {quad_err:.1e}, average err {avg_err:.1e}")


def test_criterion_06_rate_shape():
    t0 = time.perf_counter()
    d, sigma_sq, seeds = 20, 0.1, 20
    rng = make_rng(606)
    cm = CubicModel(np.zeros(d), 0.2 * rng.normal(size=d), np.eye(d), M=1.0, mu=1.0)
    box = BoxConstraint.cube(d)
    f_opt = cubic_value(cm, solve(cm, box, SolverConfig(200_000, 0.0)))

    def gap(tau, stream):
        return np.mean([cubic_value(cm, solve(cm, box, SolverConfig(tau, sigma_sq, make_rng(s, stream))))
                        - f_opt for s in range(seeds)])

    g1, g2 = gap(100, 1), gap(200, 2)
    ratio = g1 / g2
    dt = time.perf_counter() - t0
    report(6, ratio >= 1.6 and dt < 60,
           f"gap(tau=100) = {g1:.3e}, gap(tau=200) = {g2:.3e}, ratio {ratio:.2f}, {dt:.1f}s")


@pytest.fixture(scope="module")
def desk_table():
    t0 = time.perf_counter()
    table = MetricsTable()
    for alg, kd in product(("dpfcrn", "fedsgd"), (0.1, 0.2, 1.0)):
        cfg = ExperimentConfig(**DESK, algorithm=alg, k_over_d=kd)
        table.extend(run_experiment(cfg))
    return table, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_07_end_to_end_trend(desk_table):
    table, dt = desk_table
    med = table.median_final("subopt")
    spent = table.final("eps_spent")
    lines, ok_a = [], True
    for kd in (0.1, 0.2, 1.0):
        a, b = med[("dpfcrn", 0.8, kd)], med[("fedsgd", 0.8, kd)]
        ok_a &= a < b
        lines.append(f"k/d={kd}: {a:.4g} vs fedsgd {b:.4g}")
    eps_ok = all(float(np.max(v)) <= 0.8 + 1e-12 for v in spent.values())
    ok_b = med[("dpfcrn", 0.8, 0.1)] <= med[("dpfcrn", 0.8, 1.0)]
    detail = (f"(a) {'ok' if ok_a else 'violated'} [{'; '.join(lines)}]; (b) {'ok' if ok_b else 'violated'} "
              f"[k/d=0.1 {med[('dpfcrn', 0.8, 0.1)]:.4g} vs k/d=1.0 {med[('dpfcrn', 0.8, 1.0)]:.4g}]; "
              f"audited eps <= 0.8: {eps_ok}; {dt:.1f}s")
    report(7, ok_a and ok_b and eps_ok and dt < 300, detail)


@pytest.mark.slow
def test_criterion_08_privacy_tradeoff():
    t0 = time.perf_counter()
    meds = []
    for eps in (0.4, 0.6, 0.8, 1.0):
        cfg = ExperimentConfig(**{**DESK, "epsilon": eps}, k_over_d=0.1)
        meds.append(run_experiment(cfg).median_final("subopt")[("dpfcrn", eps, 0.1)])
    dt = time.perf_counter() - t0
    ok = all(b <= a for a, b in zip(meds, meds[1:]))
    report(8, ok and dt < 600,
           "medians " + ", ".join(f"{m:.4g}" for m in meds) + f" for eps 0.4..1.0; {dt:.1f}s")


def test_criterion_09_cubic_bound():
    rng = make_rng(909)
    loss = LogisticLoss()
    worst = -math.inf
    for trial in range(1000):
        d = int(rng.integers(1, 8))
        raw = generate_synthetic(d, 5, seed=trial)
        ds = ClientDataset(raw.features, raw.labels)
        box = BoxConstraint.cube(d)
        M = loss.hessian_lipschitz(raw.features) * (1 + rng.uniform(0, 2))
        v, w = box.uniform(rng), box.uniform(rng)
        worst = max(worst, client_objective(loss, ds, v) - cubic_upper_bound(loss, ds, v, w, M))
    report(9, worst <= 1e-9, f"max f(v) - phi(v; w) over 1000 trials = {worst:.3e}")


def test_criterion_10_determinism_parser_bytes():
    cfg = ExperimentConfig(**{**DESK, "epochs": 1, "seeds": [0, 1]}, k_over_d=0.1)
    same = run_experiment(cfg).to_csv().encode() == run_experiment(cfg).to_csv().encode()
    rng = make_rng(1010)
    d = 15
    lines = []
    for _ in range(1000):
        nnz = int(rng.integers(0, d + 1))
        idx = np.sort(rng.choice(d, size=nnz, replace=False)) + 1
        vals = rng.normal(size=nnz) * 10.0 ** rng.integers(-6, 6, size=nnz)
        lines.append(" ".join([str(rng.choice(["+1", "-1", "0"]))]
                              + [f"{i}:{float(v)!r}" for i, v in zip(idx, vals)]))
    first = parse_libsvm("\n".join(lines) + "\n", n_features=d)
    round_trip = parse_libsvm(format_libsvm(first)) == first
    d, n = 40, 3
    base = dict(dataset={"kind": "synthetic"}, loss="quadratic", n=n, m=5, d=d, T=3,
                private=False, tau=5)
    ratios = []
    for k in (4, 8, 20):
        full = train(ExperimentConfig(**base, k=d)).records
        sparse = train(ExperimentConfig(**base, k=k)).records
        header = n * sparsify.HEADER.size
        ratios.append(all(a.uplink_bytes - header == (d / k) * (b.uplink_bytes - header)
                          for a, b in zip(full, sparse)))
    report(10, same and round_trip and all(ratios),
           f"byte-identical metrics.csv: {same}, 1000-line LIBSVM round trip: {round_trip}, "
           f"payload bytes scale as d/k: {all(ratios)}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
