"""SVG charts and CSV exports built from a run store."""

from __future__ import annotations

import logging
import re
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from complexity import write_csv  # noqa: E402
from run_store import CURVE_COLUMNS, RunStore  # noqa: E402
from stability import EDF, EDF_COLUMNS, RunRecord, compute_edf  # noqa: E402

logger = logging.getLogger(__name__)

SCATTER_COLUMNS = ("model", "optimizer", "epochs", "lr", "wd", "lr_wd", "top1_err")


def _slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", label).strip("_")


def group_label(record: RunRecord) -> str:
    return f"{record.model_name} {record.optimizer} {record.epochs:g}ep"


def sweep_edfs(records: Iterable[RunRecord]) -> dict[str, EDF]:
    """One EDF per (model, optimizer, epochs) group with at least one finished run."""
    groups: dict[str, list[float]] = defaultdict(list)
    for record in records:
        groups[group_label(record)].append(record.final_top1_err)
    return {label: compute_edf(errors) for label, errors in sorted(groups.items())}


def plot_edfs(edfs: Mapping[str, EDF], path: Path) -> Path:
    """Step curves of cumulative fraction against error delta, one line per group."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, edf in edfs.items():
        ax.step([0.0, *edf.deltas], [0.0, *edf.cum_fracs], where="post", label=label)
    ax.set_xlabel("top-1 error delta to best (%)")
    ax.set_ylabel("cumulative fraction of runs")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(fontsize="small")
    return _save(fig, path)


def plot_training_curves(curves: Mapping[str, Sequence[Sequence[float]]], path: Path) -> Path:
    """Training loss and validation error against epoch."""
    fig, (loss_ax, err_ax) = plt.subplots(1, 2, figsize=(9, 4))
    for label, rows in curves.items():
        if not rows:
            continue
        epochs = [row[0] for row in rows]
        loss_ax.plot(epochs, [row[1] for row in rows], label=label)
        err_ax.plot(epochs, [row[2] for row in rows], label=f"{label} raw")
        err_ax.plot(epochs, [row[3] for row in rows], linestyle="--", label=f"{label} EMA")
    loss_ax.set_xlabel("epoch")
    loss_ax.set_ylabel("train loss")
    err_ax.set_xlabel("epoch")
    err_ax.set_ylabel("val top-1 error (%)")
    for ax in (loss_ax, err_ax):
        ax.grid(alpha=0.3)
        ax.legend(fontsize="x-small")
    return _save(fig, path)


def plot_lr_wd_scatter(records: Sequence[RunRecord], path: Path) -> Path:
    """Error against lr, wd and lr*wd on log axes."""
    fig, axes = plt.subplots(1, 3, figsize=(12, 4), sharey=True)
    by_model: dict[str, list[RunRecord]] = defaultdict(list)
    for record in records:
        by_model[record.model_name].append(record)
    for model, runs in sorted(by_model.items()):
        errors = [r.final_top1_err for r in runs]
        axes[0].scatter([r.lr for r in runs], errors, s=12, label=model)
        axes[1].scatter([r.wd for r in runs], errors, s=12, label=model)
        axes[2].scatter([r.lr * r.wd for r in runs], errors, s=12, label=model)
    for ax, xlabel in zip(axes, ("lr", "wd", "lr * wd")):
        ax.set_xscale("log")
        ax.set_xlabel(xlabel)
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("top-1 error (%)")
    axes[0].legend(fontsize="small")
    return _save(fig, path)


def scatter_rows(records: Iterable[RunRecord]) -> list[tuple[object, ...]]:
    return [
        (r.model_name, r.optimizer, r.epochs, r.lr, r.wd, r.lr * r.wd, r.final_top1_err)
        for r in records
    ]


def _save(fig: plt.Figure, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    logger.info("Wrote %s", path)
    return path


def write_report(store: RunStore, out_dir: Path) -> dict[str, list[Path]]:
    """
    Render every chart the store supports, with the CSV behind each.

    Args:
        store: Store to read records and curves from.
        out_dir: Directory receiving ``*.svg`` and ``*.csv`` files.

    Returns:
        Written paths keyed by "svg" and "csv".

    """
    records = store.get_all_records()
    written: dict[str, list[Path]] = {"svg": [], "csv": []}
    if not records:
        logger.warning("Store %s holds no runs; nothing to report", store.root)
        return written

    edfs = sweep_edfs(records)
    written["svg"].append(plot_edfs(edfs, out_dir / "edf.svg"))
    for label, edf in edfs.items():
        written["csv"].append(write_csv(edf.rows(), EDF_COLUMNS, out_dir / f"edf_{_slug(label)}.csv"))

    written["svg"].append(plot_lr_wd_scatter(records, out_dir / "lr_wd_scatter.svg"))
    written["csv"].append(write_csv(scatter_rows(records), SCATTER_COLUMNS, out_dir / "lr_wd_scatter.csv"))

    curves = {f"{group_label(r)} {r.run_id[-8:]}": store.read_curve(r.run_id) for r in records}
    written["svg"].append(plot_training_curves(curves, out_dir / "training_curves.svg"))
    for label, rows in curves.items():
        if rows:
            written["csv"].append(write_csv(rows, CURVE_COLUMNS, out_dir / f"curve_{_slug(label)}.csv"))
    return written
