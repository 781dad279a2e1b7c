"""Matplotlib figures for report tables and ablation sweeps (rendered to files only)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps PNG output byte-stable across runs
_SAVE_KW = {"dpi": 120, "metadata": {"Software": None}}


def model_iou_figure(table, path) -> Path:
    """Grouped bars: one group per mode, one bar per model, with 95% CI whiskers."""
    modes = [m for m, _ in table._cols]
    labels = [label for _, label in table._cols]
    models = sorted(table.rows)
    width = 0.8 / max(len(models), 1)
    fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(modes), 3.6))
    for i, model in enumerate(models):
        xs, ys, errs = [], [], []
        for j, mode in enumerate(modes):
            v = table.rows[model].get(mode)
            if v is None:
                continue
            xs.append(j + (i - (len(models) - 1) / 2) * width)
            ys.append(v[0])
            errs.append(v[1])
        ax.bar(xs, ys, width=width, yerr=errs, capsize=3, label=model)
    ax.set_xticks(range(len(modes)), labels)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("mean IoU")
    ax.set_title("single piece" if table.title == "single" else "two pieces")
    ax.legend(fontsize=8, loc="lower right")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def ablation_figure(rows: Sequence[dict], path) -> Path:
    """Horizontal bars of final IoU per setting; failed cells are drawn empty."""
    names, vals = [], []
    for r in rows:
        names.append(f"{r['Setting Number']}: {r['Description']}")
        try:
            vals.append(float(r["IoU (final)"]))
        except ValueError:
            vals.append(0.0)
    fig, ax = plt.subplots(figsize=(6.0, 0.9 + 0.35 * len(rows)))
    y = range(len(rows))
    ax.barh(list(y), vals, color="0.35")
    for yi, v in zip(y, vals):
        ax.text(min(v + 0.01, 0.98), yi, f"{v:.3f}", va="center", fontsize=7)
    ax.set_yticks(list(y), names, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlim(0, 1.0)
    ax.set_xlabel("final IoU")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path
