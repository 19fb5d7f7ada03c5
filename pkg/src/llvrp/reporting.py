"""Figures for training runs: per-context gap curves, loss curves, and
scheduler traces, rendered next to the CSVs they summarize."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def _read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def render_history(history_csv: str | Path, out_dir: str | Path) -> list[Path]:
    """Gap-per-context and loss figures plus a per-context summary CSV."""
    rows = _read_csv(history_csv)
    if not rows:
        raise ValueError(f"{history_csv} has no data rows")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    epochs = [int(r["epoch"]) for r in rows]
    gap_cols = sorted(c for c in rows[0] if c.startswith("val_gap_"))
    boundaries = [int(r["epoch"]) for i, r in enumerate(rows)
                  if i > 0 and r["context_index"] != rows[i - 1]["context_index"]]

    written: list[Path] = []
    fig, axis = plt.subplots(figsize=(7, 4))
    for col in gap_cols:
        axis.plot(epochs, [100 * float(r[col]) for r in rows],
                  label=col.replace("val_gap_", "context "))
    for b in boundaries:
        axis.axvline(b - 0.5, color="grey", linestyle=":", linewidth=0.8)
    axis.set_xlabel("epoch")
    axis.set_ylabel("validation gap (%)")
    axis.legend()
    fig.tight_layout()
    gaps_png = out_dir / "gaps.png"
    fig.savefig(gaps_png, dpi=120)
    plt.close(fig)
    written.append(gaps_png)

    fig, axis = plt.subplots(figsize=(7, 4))
    axis.plot(epochs, [float(r["loss"]) for r in rows], label="policy loss")
    axis.plot(epochs, [float(r["reg_loss"]) for r in rows], label="regularizer")
    for b in boundaries:
        axis.axvline(b - 0.5, color="grey", linestyle=":", linewidth=0.8)
    axis.set_xlabel("epoch")
    axis.set_ylabel("loss")
    axis.legend()
    fig.tight_layout()
    loss_png = out_dir / "loss.png"
    fig.savefig(loss_png, dpi=120)
    plt.close(fig)
    written.append(loss_png)

    summary = out_dir / "summary.csv"
    with open(summary, "w") as fh:
        fh.write("context,final_gap,best_gap\n")
        for col in gap_cols:
            idx = col.replace("val_gap_", "")
            series = [float(r[col]) for r in rows]
            fh.write(f"{idx},{series[-1]:.6f},{min(series):.6f}\n")
    written.append(summary)
    return written


def render_schedule(trace_csv: str | Path, out_dir: str | Path) -> list[Path]:
    """Replay-probability and sampled-count figures from a scheduler trace."""
    rows = _read_csv(trace_csv)
    if not rows:
        raise ValueError(f"{trace_csv} has no data rows")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    contexts = sorted({int(r["context"]) for r in rows})

    written: list[Path] = []
    for field, ylabel, fname in (("p", "replay probability", "schedule_probs.png"),
                                 ("count", "sampled instances", "schedule_counts.png")):
        fig, axis = plt.subplots(figsize=(7, 4))
        for ctx in contexts:
            pts = [(int(r["epoch"]), float(r[field])) for r in rows if int(r["context"]) == ctx]
            axis.plot([p[0] for p in pts], [p[1] for p in pts], label=f"context {ctx}")
        axis.set_xlabel("epoch")
        axis.set_ylabel(ylabel)
        axis.legend()
        fig.tight_layout()
        path = Path(out_dir) / fname
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
