"""Figure rendering for evaluation and pattern reports.

Each figure is written next to a CSV carrying the plotted numbers, so the
delimited data stays available without parsing images.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import container  # noqa: E402
from .errors import DataError  # noqa: E402


def render_error_curves(report_csv: str | Path, outdir: str | Path) -> list[Path]:
    """Per-model error-vs-time curves from an evaluation report CSV."""
    rows = []
    with open(report_csv, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        needed = {"model", "fragment_start", "hour", "mae", "rmse"}
        if reader.fieldnames is None or not needed.issubset(reader.fieldnames):
            raise DataError(f"{report_csv}: not an evaluation report CSV")
        rows = list(reader)
    if not rows:
        raise DataError(f"{report_csv}: empty report")

    by_model: dict[str, list[dict]] = defaultdict(list)
    for row in rows:
        by_model[row["model"]].append(row)

    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for metric, ax in zip(("mae", "rmse"), axes):
        for model, model_rows in sorted(by_model.items()):
            values = [float(r[metric]) for r in model_rows]
            ax.plot(range(len(values)), values, marker="o", markersize=3, label=model)
        ax.set_xlabel("fragment")
        ax.set_ylabel(metric.upper())
        ax.grid(True, alpha=0.3)
    axes[0].legend()
    fig.tight_layout()
    png = out / "error_curves.png"
    fig.savefig(png, dpi=150)
    plt.close(fig)
    written.append(png)
    return written


def render_basis_report(bases_path: str | Path, outdir: str | Path) -> list[Path]:
    """Base-matrix mass ranking and, when region geometry was available at
    pattern time, the per-base flow mass by centroid distance."""
    bases = container.read_matrices(bases_path)
    meta = container.read_meta(bases_path)
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    masses = bases.sum(axis=(1, 2))
    with open(out / "base_mass.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["base", "mass"])
        for k, mass in enumerate(masses):
            writer.writerow([k, repr(float(mass))])
    written.append(out / "base_mass.csv")

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(np.arange(len(masses)), masses, color="tab:blue")
    ax.set_xlabel("base matrix")
    ax.set_ylabel("total flow mass")
    ax.set_xticks(np.arange(len(masses)))
    ax.set_xticklabels([f"B{k + 1}" for k in range(len(masses))])
    fig.tight_layout()
    fig.savefig(out / "base_mass.png", dpi=150)
    plt.close(fig)
    written.append(out / "base_mass.png")

    hist = meta.get("distance_histogram")
    if hist:
        edges = np.asarray(hist["edges_m"], dtype=float)
        mass = np.asarray(hist["mass"], dtype=float)
        centers = 0.5 * (edges[:-1] + edges[1:])
        with open(out / "base_distance_hist.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_low_m", "bin_high_m"]
                            + [f"B{k + 1}" for k in range(len(mass))])
            for j in range(len(centers)):
                writer.writerow([repr(float(edges[j])), repr(float(edges[j + 1]))]
                                + [repr(float(mass[k, j])) for k in range(len(mass))])
        written.append(out / "base_distance_hist.csv")

        fig, ax = plt.subplots(figsize=(7, 4))
        bottom = np.zeros(len(centers))
        width = 0.9 * (edges[1] - edges[0]) if len(edges) > 1 else 1.0
        for k in range(len(mass)):
            ax.bar(centers, mass[k], width=width, bottom=bottom, label=f"B{k + 1}")
            bottom += mass[k]
        ax.set_xlabel("straight-line distance between region centroids (m)")
        ax.set_ylabel("flow mass")
        ax.legend(fontsize=8, ncol=2)
        fig.tight_layout()
        fig.savefig(out / "base_distance_hist.png", dpi=150)
        plt.close(fig)
        written.append(out / "base_distance_hist.png")
    return written
