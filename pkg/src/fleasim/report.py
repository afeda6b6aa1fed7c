"""Cross-run comparison tables, learning curves and the lambda2 sweep.

Everything is written as CSV (plus an aligned text table). PNG figures are
optional and need matplotlib, which is imported only when asked for.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

from .metrics import read_metrics_csv

TABLE_COLUMNS = [
    "setting", "strategy", "lambda2", "n_seeds",
    "final_mean", "final_std", "best_mean", "best_std", "mean_dcor", "run_dir",
]


def _load_run(run_dir: Path) -> dict | None:
    path = run_dir / "summary.json"
    if not path.is_file():
        return None
    summary = json.loads(path.read_text())
    summary["run_dir"] = str(run_dir)
    return summary


def _curves(run_dir: Path, summary: dict) -> list[dict]:
    rows = []
    for seed in summary["seeds"]:
        path = run_dir / f"seed_{seed}" / "metrics.csv"
        if not path.is_file():
            continue
        for rec in read_metrics_csv(path):
            rows.append({
                "setting": summary["setting"],
                "strategy": rec.strategy,
                "lambda2": summary["lambda2"],
                "seed": rec.seed,
                "round": rec.round,
                "accuracy": rec.accuracy,
                "mean_dcor": rec.mean_dcor,
                "exposure_eps": rec.exposure_eps,
            })
    return rows


def _write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def format_table(rows: list[dict]) -> str:
    head = ["setting", "strategy", "lambda2", "seeds", "final acc", "best acc", "c_bar"]
    body = [
        [
            r["setting"], r["strategy"], f"{r['lambda2']:g}", str(r["n_seeds"]),
            f"{100 * r['final_mean']:.2f} +- {100 * r['final_std']:.2f}",
            f"{100 * r['best_mean']:.2f} +- {100 * r['best_std']:.2f}",
            f"{r['mean_dcor']:.3f}",
        ]
        for r in rows
    ]
    widths = [max(len(line[i]) for line in [head, *body]) for i in range(len(head))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip() for line in [head, *body]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def report(run_dirs: Sequence[str | Path], out_dir: str | Path, *, figures: bool = False) -> dict:
    """Write table.csv/.txt, curves.csv, sweep.csv and report.json into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table, curves, absent = [], [], []
    for d in map(Path, run_dirs):
        summary = _load_run(d)
        if summary is None:
            absent.append(str(d))
            continue
        table.append({
            "setting": summary["setting"],
            "strategy": summary["strategy"],
            "lambda2": summary["lambda2"],
            "n_seeds": summary["n_ok"],
            "final_mean": summary["final_accuracy"]["mean"],
            "final_std": summary["final_accuracy"]["std"],
            "best_mean": summary["best_accuracy"]["mean"],
            "best_std": summary["best_accuracy"]["std"],
            "mean_dcor": summary["mean_dcor"]["mean"],
            "run_dir": summary["run_dir"],
        })
        curves.extend(_curves(d, summary))
    table.sort(key=lambda r: (r["setting"], r["strategy"], r["lambda2"]))
    _write_csv(out / "table.csv", TABLE_COLUMNS, table)
    (out / "table.txt").write_text(format_table(table))
    _write_csv(out / "curves.csv", ["setting", "strategy", "lambda2", "seed", "round", "accuracy", "mean_dcor", "exposure_eps"], curves)
    sweep = [
        {k: r[k] for k in ("setting", "strategy", "lambda2", "mean_dcor", "final_mean", "best_mean")}
        for r in sorted(table, key=lambda r: (r["setting"], r["strategy"], r["lambda2"]))
        if r["strategy"] == "flea"
    ]
    _write_csv(out / "sweep.csv", ["setting", "strategy", "lambda2", "mean_dcor", "final_mean", "best_mean"], sweep)
    written = ["table.csv", "table.txt", "curves.csv", "sweep.csv"]
    if figures:
        from .figures import plot_curves, plot_sweep

        written += [plot_curves(curves, out / "curves.png"), plot_sweep(sweep, out / "sweep.png")]
    result = {"rows": len(table), "absent": absent, "files": written}
    (out / "report.json").write_text(json.dumps(result, indent=2))
    return result
