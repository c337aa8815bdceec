"""Training-run reports: loss curves as PNG figures plus a flat CSV of the
per-step metrics, rendered from the JSONL stream the trainer writes."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

__all__ = ["load_metrics", "write_metrics_csv", "render_training_report"]


def load_metrics(metrics_path) -> list[dict]:
    records = []
    for line in Path(metrics_path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        if d.get("non_finite"):
            continue
        records.append(d)
    return records


def write_metrics_csv(records: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "grad_norm", "wall_time", "null_fraction"])
        for r in records:
            nulls = r.get("null_text", [])
            frac = sum(nulls) / len(nulls) if nulls else 0.0
            writer.writerow([r["step"], r["loss"], r.get("grad_norm", ""),
                             r.get("wall_time", ""), f"{frac:.3f}"])
    return path


def _rolling_mean(x: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(x) < 2:
        return x.copy()
    window = min(window, len(x))
    kernel = np.ones(window) / window
    pad = np.concatenate([np.full(window - 1, x[0]), x])
    return np.convolve(pad, kernel, mode="valid")


def render_training_report(metrics_path, out_dir, smooth: int = 20) -> dict:
    """Render loss/grad-norm figures and the metrics CSV next to each other.

    Returns {"figure": ..., "csv": ..., "steps": n}.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = load_metrics(metrics_path)
    csv_path = write_metrics_csv(records, out_dir / "metrics.csv")
    fig_path = out_dir / "loss_curve.png"

    fig, axes = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    if records:
        steps = np.array([r["step"] for r in records])
        loss = np.array([r["loss"] for r in records])
        axes[0].plot(steps, loss, lw=0.8, alpha=0.45, label="loss")
        axes[0].plot(steps, _rolling_mean(loss, smooth), lw=1.8,
                     label=f"rolling mean ({min(smooth, len(loss))})")
        gnorm = np.array([r.get("grad_norm", np.nan) for r in records], dtype=float)
        axes[1].plot(steps, gnorm, lw=0.9, color="tab:orange", label="adapter grad norm")
    axes[0].set_ylabel("training loss")
    axes[0].legend(loc="upper right", fontsize=8)
    axes[1].set_ylabel("grad norm")
    axes[1].set_xlabel("step")
    axes[1].legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    return {"figure": str(fig_path), "csv": str(csv_path), "steps": len(records)}
