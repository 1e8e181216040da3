"""Matplotlib figures for metric tables: convergence curves and the privacy/utility trade-off."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 8,
    "savefig.dpi": 150,
}


def _label(key):
    alg, eps, r = key
    name = "DP-FCRN" if alg == "dpfcrn" else "DP-Fed-SGD"
    return f"{name} eps={eps:g} k/d={r:g}"


def _band(ax, x, mean, std, label, logy=False):
    line, = ax.plot(x, mean, lw=1.5, label=label)
    lo = mean - std
    if logy:
        # a band reaching below zero would blank the log axis
        lo = np.where(lo > 0, lo, mean / 10)
    ax.fill_between(x, lo, mean + std, color=line.get_color(), alpha=0.2, lw=0)


def plot_curves(table, out_dir) -> list[Path]:
    """Suboptimality and accuracy against rounds, mean with a one-std band per series."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    agg = table.aggregate()
    paths = []
    with plt.rc_context(STYLE):
        for name, col, ylabel, logy in (("suboptimality.png", "subopt", r"$f(x_t) - f(x^*)$", True),
                                        ("accuracy.png", "acc", "test accuracy", False)):
            fig, ax = plt.subplots()
            for key, a in agg.items():
                _band(ax, a["round"], a[f"{col}_mean"], a[f"{col}_std"], _label(key), logy)
            if logy and any(np.all(a["subopt_mean"] > 0) for a in agg.values()):
                ax.set_yscale("log")
            ax.set_xlabel("round")
            ax.set_ylabel(ylabel)
            if agg:
                ax.legend(loc="best")
            fig.tight_layout()
            fig.savefig(out / name)
            plt.close(fig)
            paths.append(out / name)
    return paths


def plot_tradeoff(table, out_dir, name="tradeoff.png") -> Path | None:
    """Median final suboptimality against epsilon, one line per (algorithm, k/d).

    Returns ``None`` when the table holds a single epsilon.
    """
    med = table.median_final("subopt")
    groups: dict = {}
    for (alg, eps, r), v in med.items():
        groups.setdefault((alg, r), []).append((eps, v))
    if all(len(v) < 2 for v in groups.values()):
        return None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for (alg, r), pts in groups.items():
            pts.sort()
            e, v = zip(*pts)
            ax.plot(e, v, marker="o", label=_label((alg, float("nan"), r)).replace(" eps=nan", ""))
        ax.set_xlabel(r"$\varepsilon$")
        ax.set_ylabel("median final suboptimality")
        ax.legend(loc="best")
        fig.tight_layout()
        fig.savefig(out / name)
        plt.close(fig)
    return out / name


def render_all(table, out_dir) -> list[Path]:
    paths = plot_curves(table, out_dir)
    extra = plot_tradeoff(table, out_dir)
    return paths + ([extra] if extra else [])
