"""Result export: delimited tables, structured JSON, and matplotlib figures.

Every render helper writes a PNG next to the delimited output so a report
directory is self-contained.  The CSV columns are named exactly `R@{K}` and
`Rs@{K}`.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .evaluation import RecallTable, SweepTable  # noqa: E402


def write_recall_csv(path: str | Path, table: RecallTable) -> Path:
    path = Path(path)
    cells = table.cells()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(cells))
        writer.writerow([f"{v:.6f}" for v in cells.values()])
    return path


def write_recall_json(path: str | Path, table: RecallTable) -> Path:
    path = Path(path)
    doc = {
        "recall_at": {str(k): v for k, v in sorted(table.recall_at.items())},
        "subset_recall_at": {str(k): v for k, v in sorted(table.subset_recall_at.items())},
        "n_queries": table.n_queries,
        "n_subset_queries": table.n_subset_queries,
    }
    if table.groups:
        doc["groups"] = {
            name: {
                "recall_at": {str(k): v for k, v in sorted(g.recall_at.items())},
                "subset_recall_at": {str(k): v for k, v in sorted(g.subset_recall_at.items())},
            }
            for name, g in table.groups.items()
        }
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return path


def render_recall_figure(path: str | Path, table: RecallTable, title: str = "Recall") -> Path:
    path = Path(path)
    cells = table.cells()
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(cells)), 3.2))
    names = list(cells)
    values = [cells[n] for n in names]
    bars = ax.bar(names, values, color=["#4878d0" if n.startswith("R@") else "#ee854a" for n in names])
    ax.bar_label(bars, fmt="%.3f", fontsize=8)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("recall")
    ax.set_title(f"{title} (n={table.n_queries})")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_training_curves(path: str | Path, records: Sequence[dict], title: str = "Training") -> Path:
    path = Path(path)
    steps = [r["step"] for r in records]
    fig, (ax_loss, ax_lr) = plt.subplots(
        2, 1, figsize=(6.4, 4.8), sharex=True, height_ratios=[3, 1]
    )
    for key, color in (("L", "#333333"), ("Lc", "#4878d0"), ("La", "#ee854a")):
        ax_loss.plot(steps, [r[key] for r in records], label=key, color=color, linewidth=1.0)
    ax_loss.set_ylabel("loss")
    ax_loss.legend(loc="upper right", fontsize=8)
    ax_loss.set_title(title)
    ax_lr.plot(steps, [r["lr"] for r in records], color="#6acc64", linewidth=1.0)
    ax_lr.set_ylabel("lr")
    ax_lr.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _cell_columns(table: SweepTable) -> list[int]:
    ks: set[int] = set()
    for row in table.rows:
        for cell in row.cells:
            if cell.table is not None:
                ks.update(cell.table.recall_at)
    return sorted(ks)


def write_sweep_cells_csv(path: str | Path, table: SweepTable) -> Path:
    path = Path(path)
    ks = _cell_columns(table)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([table.axis, "seed", "status"] + [f"R@{k}" for k in ks])
        for row in table.rows:
            for cell in row.cells:
                if cell.table is None:
                    writer.writerow([cell.value, cell.seed, f"error: {cell.error}"] + [""] * len(ks))
                else:
                    writer.writerow(
                        [cell.value, cell.seed, "ok"]
                        + [f"{cell.table.recall_at.get(k, float('nan')):.6f}" for k in ks]
                    )
    return path


def write_sweep_summary_csv(path: str | Path, table: SweepTable) -> Path:
    path = Path(path)
    ks = _cell_columns(table)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([table.axis, "n_ok", "n_failed"] + [f"R@{k}" for k in ks])
        for row in table.rows:
            mean = row.mean_recall_at()
            n_ok = sum(1 for c in row.cells if c.table is not None)
            writer.writerow(
                [row.value, n_ok, len(row.cells) - n_ok]
                + [("" if k not in mean else f"{mean[k]:.6f}") for k in ks]
            )
    return path


def render_sweep_figure(
    path: str | Path, table: SweepTable, k: int = 1, title: Optional[str] = None
) -> Path:
    path = Path(path)
    labels = [str(row.value) for row in table.rows]
    means = [row.mean_recall_at().get(k) for row in table.rows]
    seeds_xy: list[tuple[int, float]] = []
    for i, row in enumerate(table.rows):
        for cell in row.cells:
            if cell.table is not None and k in cell.table.recall_at:
                seeds_xy.append((i, cell.table.recall_at[k]))
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(labels)), 3.4))
    xs = range(len(labels))
    if seeds_xy:
        ax.scatter(*zip(*seeds_xy), s=12, color="#b0b0b0", zorder=1, label="seeds")
    kept = [(x, m) for x, m in zip(xs, means) if m is not None]
    if kept:
        ax.plot(*zip(*kept), marker="o", color="#4878d0", zorder=2, label="mean")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_xlabel(table.axis)
    ax.set_ylabel(f"R@{k}")
    ax.set_ylim(0.0, 1.05)
    ax.set_title(title or f"Sweep over {table.axis}")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
