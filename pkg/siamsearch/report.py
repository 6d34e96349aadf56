"""
Summary CSV and SVG plots from merged metrics.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

from .errors import RangeError  # noqa: E402
from .metrics import SearchLog  # noqa: E402
from .ops import catalog  # noqa: E402
from .storage import ReportStore  # noqa: E402

logger = logging.getLogger(__name__)

# keep svg text as <text> elements
plt.rcParams["svg.fonttype"] = "none"


@dataclass
class ReportPaths:
    summary: Path
    loss_curves: Path
    skip_fraction: Path | None = None


def loss_curve_figure(store: ReportStore) -> Figure:
    """One panel per phase, one line per run; legend entries are the run names."""
    phases = store.phases()
    if not phases:
        raise RangeError("no metric rows to plot")
    fig, axes = plt.subplots(1, len(phases), figsize=(5 * len(phases), 3.8), squeeze=False)
    for ax, phase in zip(axes[0], phases):
        for run in store.runs():
            points = store.curve(run, phase)
            if not points:
                continue
            epochs, losses = zip(*points)
            ax.plot(epochs, losses, marker="o", markersize=3, linewidth=1.2, label=run)
        ax.set_title(f"{phase} loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
    fig.tight_layout()
    return fig


def skip_fraction_figure(store: ReportStore) -> Figure | None:
    curves = {run: store.skip_curve(run) for run in store.runs()}
    curves = {run: pts for run, pts in curves.items() if pts}
    if not curves:
        return None
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for run, points in curves.items():
        epochs, fractions = zip(*points)
        ax.step(epochs, fractions, where="post", marker="o", markersize=3, label=run)
    ax.set_ylim(-0.05, 1.05)
    ax.set_xlabel("search epoch")
    ax.set_ylabel("skip fraction")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return fig


def _save(fig: Figure, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
    return path


def write_report(metrics_paths: Sequence[Path | str], out_dir: Path | str) -> ReportPaths:
    """Merge metrics files and emit summary.csv, loss_curves.svg and, with search rows, skip_fraction.svg."""
    if not metrics_paths:
        raise RangeError("report needs at least one metrics file")
    out_dir = Path(out_dir)
    with ReportStore() as store:
        for path in metrics_paths:
            store.add_metrics_file(path)
        paths = ReportPaths(
            summary=store.export_summary(out_dir / "summary.csv"),
            loss_curves=_save(loss_curve_figure(store), out_dir / "loss_curves.svg"),
        )
        skip_fig = skip_fraction_figure(store)
        if skip_fig is not None:
            paths.skip_fraction = _save(skip_fig, out_dir / "skip_fraction.svg")
    logger.info("Report written to %s", out_dir)
    return paths


def plot_loss_series(losses: Sequence[float], path: Path | str, title: str = "pretrain loss") -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(range(len(losses)), losses, marker="o", markersize=3)
    ax.set_title(title)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_alphas(log: SearchLog, path: Path | str, space: str = "S") -> Path:
    """Heatmap of the final softmax(alpha) per cell: layers down, candidate kinds across."""
    if not log.records:
        raise RangeError("search log is empty")
    final = log.records[-1].alphas
    kinds = [str(k) for k in catalog(space)]
    fig, axes = plt.subplots(1, len(final), figsize=(5.5 * len(final), 3.2), squeeze=False)
    for ax, (role, layers) in zip(axes[0], final.items()):
        weights = np.asarray(layers)
        image = ax.imshow(weights, cmap="viridis", vmin=0.0, vmax=max(weights.max(), 1e-6), aspect="auto")
        ax.set_title(f"{role} cell")
        ax.set_xticks(range(len(kinds)), kinds, rotation=45, ha="right", fontsize=7)
        ax.set_yticks(range(len(layers)), [f"layer {i}" for i in range(len(layers))], fontsize=7)
        fig.colorbar(image, ax=ax, fraction=0.046)
    fig.tight_layout()
    return _save(fig, Path(path))
