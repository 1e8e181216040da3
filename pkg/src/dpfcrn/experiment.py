"""Multi-seed runs, metric tables and on-disk outputs (CSV, manifest, gnuplot script)."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, build_problem, derive_schedule
from .fedcore import train

log = logging.getLogger(__name__)

COLUMNS = ("algorithm", "eps", "k_over_d", "seed", "round", "subopt", "test_acc",
           "uplink_bytes", "eps_spent", "delta_spent")
OUTPUT_FILES = ("metrics.csv", "manifest.json", "plot.gp")

__all__ = ["COLUMNS", "MetricsRow", "MetricsTable", "derive_schedule", "emit_outputs",
           "read_metrics", "run_experiment"]


@dataclass(frozen=True)
class MetricsRow:
    algorithm: str
    eps: float
    k_over_d: float
    seed: int
    round: int
    subopt: float
    test_acc: float
    uplink_bytes: int
    eps_spent: float
    delta_spent: float


_CASTS = {f.name: f.type for f in fields(MetricsRow)}
_TYPES = {"str": str, "float": float, "int": int}


@dataclass
class MetricsTable:
    """Per-round rows for every (run, seed), ordered by run then round.

    ``manifest`` carries the config, derived schedule and ledger of each run;
    ``failure`` is set when a run aborted and the rows are partial.
    """

    rows: list[MetricsRow] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)
    failure: str | None = None

    def __len__(self):
        return len(self.rows)

    def extend(self, other: "MetricsTable") -> "MetricsTable":
        self.rows.extend(other.rows)
        for key, runs in other.manifest.get("runs", {}).items():
            self.manifest.setdefault("runs", {})[key] = runs
        self.failure = self.failure or other.failure
        return self

    def series(self) -> dict:
        """Group rows by ``(algorithm, eps, k_over_d)`` then seed, in first-seen order."""
        out: dict = {}
        for r in self.rows:
            out.setdefault((r.algorithm, r.eps, r.k_over_d), {}).setdefault(r.seed, []).append(r)
        return out

    def aggregate(self) -> dict:
        """Mean and standard deviation across seeds, per series and round.

        Seed runs of unequal length (a partial failure) are cut to the shortest.
        """
        out = {}
        for key, by_seed in self.series().items():
            runs = list(by_seed.values())
            n = min(len(r) for r in runs)
            sub = np.array([[row.subopt for row in r[:n]] for r in runs])
            acc = np.array([[row.test_acc for row in r[:n]] for r in runs])
            out[key] = {
                "round": np.array([row.round for row in runs[0][:n]]),
                "subopt_mean": sub.mean(axis=0), "subopt_std": sub.std(axis=0),
                "acc_mean": acc.mean(axis=0), "acc_std": acc.std(axis=0),
            }
        return out

    def final(self, column: str = "subopt") -> dict:
        """Last-round value of ``column`` per series, as an array over seeds."""
        return {key: np.array([getattr(rows[-1], column) for rows in by_seed.values()])
                for key, by_seed in self.series().items()}

    def median_final(self, column: str = "subopt") -> dict:
        return {key: float(np.median(v)) for key, v in self.final(column).items()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(getattr(r, c)) for c in COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsTable":
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != COLUMNS:
            raise ValueError(f"unexpected metrics columns {reader.fieldnames}")
        rows = [MetricsRow(**{c: _TYPES[_CASTS[c]](rec[c]) for c in COLUMNS}) for rec in reader]
        return cls(rows)


def _fmt(v):
    # repr keeps floats exact through a CSV round trip
    return repr(v) if isinstance(v, float) else str(v)


def read_metrics(path) -> MetricsTable:
    return MetricsTable.from_csv(Path(path).read_text())


def _run_key(cfg: ExperimentConfig, k_over_d: float) -> str:
    return f"{cfg.algorithm}/eps={cfg.epsilon!r}/k_over_d={k_over_d!r}"


def run_experiment(cfg: ExperimentConfig, seeds=None) -> MetricsTable:
    """Train ``cfg`` once per seed and collect every round into one table.

    On failure the exception is re-raised with the partial table attached as
    ``exc.partial`` and its ``failure`` marker set.
    """
    seeds = cfg.seeds if seeds is None else tuple(int(s) for s in seeds)
    problem = build_problem(cfg)
    sched = derive_schedule(cfg, problem.m, problem.d)
    k_over_d = sched.k / problem.d
    eps = float(cfg.epsilon)
    table = MetricsTable(manifest={"runs": {_run_key(cfg, k_over_d): {
        "config": replace(cfg, seeds=seeds).to_dict(),
        "schedule": sched.to_dict(),
        "ledger": sched.ledger.to_dict(),
        "dataset": problem.raw.manifest(),
        "reference_optimum": {"f_star": problem.f_star,
                              "residual": problem.optimum.residual},
    }}})
    for seed in seeds:
        try:
            res = train(cfg, seed, problem)
        except Exception as exc:
            table.failure = f"seed {seed}: {type(exc).__name__}: {exc}"
            exc.partial = table
            raise
        for rec in res.records:
            eps_spent, delta_spent = rec.privacy_spent_so_far
            table.rows.append(MetricsRow(
                cfg.algorithm, eps, k_over_d, int(seed), rec.round, float(rec.suboptimality),
                float(rec.test_accuracy), int(rec.uplink_bytes), float(eps_spent),
                float(delta_spent)))
        log.info("%s seed=%d final subopt %.4g", cfg.algorithm, seed,
                 res.records[-1].suboptimality if res.records else math.nan)
    return table


def _atomic_write(path: Path, text: str):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def gnuplot_script(table: MetricsTable) -> str:
    """Self-contained gnuplot script: aggregated data inline, mean curves with std bands."""
    agg = table.aggregate()
    lines = ["# mean over seeds with one-standard-deviation bands",
             "set datafile separator whitespace", "set key outside right", ""]
    names = []
    for i, (key, a) in enumerate(agg.items()):
        name = f"$run{i}"
        names.append((name, "%s eps=%g k/d=%g" % key))
        lines.append(f"{name} << EOD")
        for row in zip(a["round"], a["subopt_mean"], a["subopt_std"], a["acc_mean"], a["acc_std"]):
            lines.append(" ".join(repr(float(v)) for v in row))
        lines += ["EOD", ""]

    def panel(out, ylabel, mean_col, std_col, logscale):
        body = [f"set output '{out}'", "set xlabel 'round'", f"set ylabel '{ylabel}'",
                "set logscale y" if logscale else "unset logscale y"]
        parts = []
        for i, (name, title) in enumerate(names):
            parts.append(f"{name} using 1:(${mean_col}-${std_col}):(${mean_col}+${std_col}) "
                         f"with filledcurves fs transparent solid 0.2 lc {i + 1} notitle")
            parts.append(f"{name} using 1:{mean_col} with lines lw 2 lc {i + 1} title '{title}'")
        if parts:
            body.append("plot " + ", \\\n     ".join(parts))
        return body + [""]

    lines += ["set terminal pngcairo size 900,600"]
    lines += panel("suboptimality.png", "f(x_t) - f(x*)", 2, 3, True)
    lines += panel("accuracy.png", "test accuracy", 4, 5, False)
    return "\n".join(lines)


def emit_outputs(table: MetricsTable, out_dir) -> list[Path]:
    """Write ``metrics.csv``, ``manifest.json`` and ``plot.gp`` into ``out_dir``.

    Each file goes to a temporary sibling first and is renamed into place, so an
    I/O failure never leaves a half-written file behind.
    """
    if not table.rows and table.failure is None:
        raise ValueError("refusing to emit an empty metrics table")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = dict(table.manifest)
    manifest["status"] = "failed" if table.failure else "ok"
    if table.failure:
        manifest["failure"] = table.failure
    manifest["columns"] = list(COLUMNS)
    texts = {
        "metrics.csv": table.to_csv(),
        "manifest.json": json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n",
        "plot.gp": gnuplot_script(table),
    }
    paths = []
    for name in OUTPUT_FILES:
        path = out / name
        _atomic_write(path, texts[name])
        paths.append(path)
    return paths


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return str(v)
