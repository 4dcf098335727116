"""Render benchmark reports to a CSV table and a PNG chart.

Works headless: the Agg backend is forced before pyplot loads, so report
rendering never needs a display.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .bench import STRATEGIES, BenchReport  # noqa: E402

CSV_COLUMNS = (
    "model", "strategy", "num_models", "batch", "dtype", "repeats",
    "mean_ns", "std_ns", "min_ns", "max_ns",
    "dispatches_per_round", "ops_per_round", "peak_bytes", "merge_ns", "glue_count",
)


def write_csv(reports: list[BenchReport], path: str | Path) -> Path:
    """One row per report, stable column order."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for rep in sorted(reports, key=_sort_key):
            row = rep.to_json()
            writer.writerow({k: ("" if row.get(k) is None else row.get(k, ""))
                             for k in CSV_COLUMNS})
    return path


def _sort_key(rep: BenchReport):
    return (rep.model, rep.num_models, rep.batch, STRATEGIES.index(rep.strategy))


def render_png(reports: list[BenchReport], path: str | Path) -> Path:
    """Grouped bars of mean round time (error bars: standard deviation).

    Groups are (model, M, B) configurations; one bar per strategy. A second
    axis panel shows dispatches per round, the structural metric the wall
    clock approximates.
    """
    if not reports:
        raise ValueError("no reports to plot")
    path = Path(path)
    configs = sorted({(r.model, r.num_models, r.batch) for r in reports})
    strategies = [s for s in STRATEGIES if any(r.strategy == s for r in reports)]
    by_key = {(r.model, r.num_models, r.batch, r.strategy): r for r in reports}

    fig, (ax_time, ax_ops) = plt.subplots(
        1, 2, figsize=(max(7.0, 1.8 * len(configs) + 3.0), 4.2))
    width = 0.8 / max(1, len(strategies))
    for si, strat in enumerate(strategies):
        xs, means, stds, ops = [], [], [], []
        for ci, cfg in enumerate(configs):
            rep = by_key.get((*cfg, strat))
            if rep is None:
                continue
            xs.append(ci + (si - (len(strategies) - 1) / 2) * width)
            means.append(rep.mean_ns / 1e6)
            stds.append(rep.std_ns / 1e6)
            ops.append(rep.dispatches_per_round)
        ax_time.bar(xs, means, width=width, yerr=stds, capsize=3, label=strat)
        ax_ops.bar(xs, ops, width=width, label=strat)

    labels = [f"{m}\nM={n} B={b}" for m, n, b in configs]
    for ax, title, ylabel in (
        (ax_time, "mean round latency", "ms per round"),
        (ax_ops, "kernel dispatches", "dispatches per round"),
    ):
        ax.set_xticks(range(len(configs)))
        ax.set_xticklabels(labels, fontsize=8)
        ax.set_title(title)
        ax.set_ylabel(ylabel)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_report(reports: list[BenchReport], out_dir: str | Path,
                  basename: str = "bench") -> tuple[Path, Path]:
    """Write ``<basename>.csv`` and ``<basename>.png`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = write_csv(reports, out / f"{basename}.csv")
    png_path = render_png(reports, out / f"{basename}.png")
    return csv_path, png_path
