"""PNG figures for the report command (needs the ``plots`` extra)."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.8),
    "figure.dpi": 120,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}


def plot_curves(rows: list[dict], path: Path) -> str:
    """Seed-averaged test accuracy per round, one line per (setting, strategy, lambda2)."""
    groups = defaultdict(lambda: defaultdict(list))
    for r in rows:
        groups[(r["setting"], r["strategy"], r["lambda2"])][r["round"]].append(r["accuracy"])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for (setting, strategy, lam), by_round in sorted(groups.items()):
            rounds = sorted(by_round)
            means = [sum(by_round[t]) / len(by_round[t]) for t in rounds]
            label = strategy if strategy != "flea" else f"flea (l2={lam:g})"
            ax.plot(rounds, means, label=f"{label}, {setting}" if len({k[0] for k in groups}) > 1 else label)
        ax.set_xlabel("round")
        ax.set_ylabel("test accuracy")
        if groups:
            ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path).name


def plot_sweep(rows: list[dict], path: Path) -> str:
    """Final accuracy against mean distance correlation, points labelled by lambda2."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for r in rows:
            ax.scatter(r["mean_dcor"], r["final_mean"], color="C0")
            ax.annotate(f"{r['lambda2']:g}", (r["mean_dcor"], r["final_mean"]),
                        textcoords="offset points", xytext=(4, 4), fontsize=7)
        ax.set_xlabel("mean distance correlation")
        ax.set_ylabel("final accuracy")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path).name
