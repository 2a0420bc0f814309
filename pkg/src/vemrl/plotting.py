"""Matplotlib figures for run reports, rendered off-screen to PNG files."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _save(fig, path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_vem_curve(curve_csv, out) -> Path:
    rows = _read_csv(curve_csv)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot([int(r["epoch"]) for r in rows], [float(r["mse"]) for r in rows], marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training MSE")
    ax.set_yscale("log")
    ax.set_title("value model fit")
    return _save(fig, out)


def plot_policy_diagnostics(diag_csv, out) -> Path:
    rows = _read_csv(diag_csv)
    it = [int(r["iteration"]) for r in rows]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.2))
    a1.plot(it, [float(r["objective"]) for r in rows], lw=1)
    a1.set_xlabel("iteration")
    a1.set_ylabel("clipped surrogate")
    a2.plot(it, [float(r["entropy"]) for r in rows], lw=1, color="tab:orange")
    a2.set_xlabel("iteration")
    a2.set_ylabel("policy entropy")
    return _save(fig, out)


def plot_success_rates(reports: Sequence[dict], out) -> Path:
    """Grouped bars of task SR per method, one group per evaluation mode."""
    modes = sorted({r["mode"] for r in reports})
    methods = list(dict.fromkeys(r["method"] for r in reports))
    width = 0.8 / max(len(methods), 1)
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    for j, m in enumerate(methods):
        vals = [next((r["task_sr"] for r in reports if r["mode"] == mode and r["method"] == m), 0.0) for mode in modes]
        ax.bar([i + j * width for i in range(len(modes))], vals, width, label=m)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(modes))], modes)
    ax.set_ylim(0, 1)
    ax.set_ylabel("task success rate")
    ax.legend(fontsize=8)
    return _save(fig, out)


def plot_bound(reports: Sequence[dict], c_fit: float, out) -> Path:
    """Suboptimality against eps + shift, with the fitted line through the origin."""
    x = [r["epsilon"] + r["shift"] for r in reports]
    y = [r["gap"] for r in reports]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    sc = ax.scatter(x, y, c=[r["noise"] for r in reports], s=10, cmap="viridis")
    fig.colorbar(sc, ax=ax, label="noise level")
    if x:
        hi = max(x)
        ax.plot([0, hi], [0, c_fit * hi], "k--", lw=1, label=f"c_fit = {c_fit:.3g}")
        ax.legend(fontsize=8)
    ax.set_xlabel("epsilon + shift")
    ax.set_ylabel("J(pi*) - J(pi_hat)")
    return _save(fig, out)
