"""Static SVG charts rendered from the metrics CSVs and nothing else.

The chart type is picked from the CSV header row: an open-loop summary
becomes a bar chart of metrics relative to the No-prediction baseline, a
closed-loop summary becomes grouped bars of the six metrics, and a training
log becomes loss curves over epochs. Rendering is presentation only; every
number shown exists in the CSV.

SVG output is kept reproducible: fixed hash salt, no creation date.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "drivestack"
import matplotlib.pyplot as plt  # noqa: E402 - backend must be set first

from . import cli as cli_mod  # noqa: E402
from . import simulator  # noqa: E402

_SAVE_KWARGS = {"format": "svg", "metadata": {"Date": None}}


def _read(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path} is empty")
    header = tuple(rows[0])
    records = [dict(zip(header, row)) for row in rows[1:]]
    return header, records


def _floats(records, column):
    return [float(r[column]) for r in records]


def _bar_positions(n_groups, n_bars):
    width = 0.8 / n_bars
    offsets = [(i - (n_bars - 1) / 2) * width for i in range(n_bars)]
    return width, offsets


def plot_open_loop(records, out_dir: Path):
    """Relative plan/control loss per run, baseline pinned at zero."""
    runs = [r["run"] for r in records]
    metrics = ("rel_plan_loss", "rel_ctr_loss")
    fig, ax = plt.subplots(figsize=(1.8 + 1.1 * len(runs), 3.4))
    width, offsets = _bar_positions(len(runs), len(metrics))
    for off, metric in zip(offsets, metrics):
        vals = _floats(records, metric)
        ax.bar([i + off for i in range(len(runs))], vals, width,
               label=metric.replace("rel_", "relative ").replace("_", " "))
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xticks(range(len(runs)))
    ax.set_xticklabels(runs, rotation=20, ha="right")
    ax.set_ylabel("difference vs no_prediction")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = out_dir / "open_loop_metrics.svg"
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)
    return [path]


def plot_closed_loop(records, out_dir: Path):
    runs = [r["run"] for r in records]
    metrics = simulator.METRIC_NAMES
    fig, ax = plt.subplots(figsize=(2.2 + 1.3 * len(runs), 3.6))
    width, offsets = _bar_positions(len(runs), len(metrics))
    for off, metric in zip(offsets, metrics):
        vals = [v if math.isfinite(v) else 0.0 for v in _floats(records, metric)]
        ax.bar([i + off for i in range(len(runs))], vals, width,
               label=metric.replace("_", " "))
    ax.set_xticks(range(len(runs)))
    ax.set_xticklabels(runs, rotation=20, ha="right")
    ax.set_ylabel("per simulated second")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    path = out_dir / "closed_loop_metrics.svg"
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)
    return [path]


def plot_training_log(records, out_dir: Path):
    epochs = _floats(records, "epoch")
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    ax.plot(epochs, _floats(records, "train_loss"), label="train loss")
    for col in ("val_pred_loss", "val_plan_loss", "val_ctr_loss"):
        vals = _floats(records, col)
        if any(math.isfinite(v) for v in vals):
            ax.plot(epochs, vals, label=col.replace("_", " "))
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = out_dir / "training_log.svg"
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)
    return [path]


def render(csv_path, out_dir) -> list:
    """Dispatch on the header row; unknown layouts are a data error."""
    header, records = _read(csv_path)
    out_dir = Path(out_dir)
    if not records:
        raise ValueError(f"{csv_path} has a header but no rows")
    if header == cli_mod.OPEN_LOOP_SUMMARY_COLUMNS:
        return plot_open_loop(records, out_dir)
    if header == cli_mod.CLOSED_LOOP_SUMMARY_COLUMNS:
        return plot_closed_loop(records, out_dir)
    if header == cli_mod.TRAINING_LOG_COLUMNS:
        return plot_training_log(records, out_dir)
    raise ValueError(f"unrecognized metrics CSV header in {csv_path}: "
                     f"{','.join(header)}")
