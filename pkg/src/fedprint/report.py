"""Figure rendering for run artifacts.

Reads the metrics/matrix JSON a run directory already contains and drops
PNG figures next to the delimited output: validation-accuracy curves,
confusion-matrix heatmaps, per-aggregator degradation curves, and the
aggregator head-to-head comparison.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import InvalidInputError
from .fingerprint import MODELS

_ACCURACY_LIMITS = (-0.02, 1.02)


def _save(fig: plt.Figure, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_confusion(confusion: Sequence[Sequence[int]], path: Path, title: str) -> Path:
    matrix = np.asarray(confusion)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    image = ax.imshow(matrix, cmap="Blues")
    fig.colorbar(image, ax=ax, fraction=0.046)
    labels = [m.value for m in MODELS]
    ax.set_xticks(range(len(labels)), labels)
    ax.set_yticks(range(len(labels)), labels)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title)
    threshold = matrix.max() / 2 if matrix.max() else 0.5
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            ax.text(
                j,
                i,
                str(matrix[i, j]),
                ha="center",
                va="center",
                color="white" if matrix[i, j] > threshold else "black",
                fontsize=8,
            )
    return _save(fig, path)


def plot_federated_curves(metrics: Mapping[str, Any], path: Path) -> Path:
    """Per-organization validation accuracy across rounds."""
    rounds = metrics["rounds"]
    if not rounds:
        raise InvalidInputError("no rounds to plot")
    org_ids = sorted(rounds[0]["org_validation_accuracy"], key=int)
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [r["round"] for r in rounds]
    for org_id in org_ids:
        ax.plot(
            xs,
            [r["org_validation_accuracy"][org_id] for r in rounds],
            label=f"org {org_id}",
            linewidth=1.2,
        )
    ax.plot(
        xs,
        [r["test_accuracy"] for r in rounds],
        label="global test",
        color="black",
        linestyle="--",
        linewidth=1.5,
    )
    ax.set_xlabel("round")
    ax.set_ylabel("accuracy")
    ax.set_ylim(*_ACCURACY_LIMITS)
    ax.set_title("Validation accuracy per organization")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_centralized_curves(metrics: Mapping[str, Any], path: Path) -> Path:
    epochs = metrics["epochs"]
    if not epochs:
        raise InvalidInputError("no epochs to plot")
    xs = [e["epoch"] for e in epochs]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(xs, [e["validation_accuracy"] for e in epochs], label="validation accuracy")
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy")
    ax.set_ylim(*_ACCURACY_LIMITS)
    ax.grid(alpha=0.3)
    twin = ax.twinx()
    twin.plot(xs, [e["train_loss"] for e in epochs], color="tab:red", label="train loss")
    twin.set_ylabel("train loss", color="tab:red")
    ax.set_title("Centralized training")
    return _save(fig, path)


def _matrix_accuracy(
    cells: Sequence[Mapping[str, Any]], aggregator: str, n_malicious: int
) -> tuple[list[float], list[float]]:
    """(poison fractions, accuracies) for one aggregator/malicious-count line,
    prefixed with the clean baseline at fraction 0."""
    points: dict[float, float] = {}
    for cell in cells:
        if "error" in cell or cell["aggregator"] != aggregator:
            continue
        if cell["n_malicious"] == 0:
            points.setdefault(0.0, cell["test_accuracy"])
        elif cell["n_malicious"] == n_malicious:
            points[cell["poison_fraction"]] = cell["test_accuracy"]
    fractions = sorted(points)
    return fractions, [points[f] for f in fractions]


def plot_matrix_degradation(report: Mapping[str, Any], out_dir: Path) -> list[Path]:
    """One figure per aggregator: accuracy vs poison fraction, one line per
    malicious-organization count."""
    cells = report["cells"]
    aggregators = sorted({c["aggregator"] for c in cells})
    counts = sorted({c["n_malicious"] for c in cells if c["n_malicious"] > 0})
    paths = []
    for aggregator in aggregators:
        fig, ax = plt.subplots(figsize=(6, 4))
        for count in counts:
            fractions, accuracies = _matrix_accuracy(cells, aggregator, count)
            if not fractions:
                continue
            ax.plot(
                [f * 100 for f in fractions],
                accuracies,
                marker="o",
                label=f"{count} malicious org(s)",
            )
        ax.set_xlabel("poisoning percentage")
        ax.set_ylabel("test accuracy")
        ax.set_ylim(*_ACCURACY_LIMITS)
        ax.set_title(f"{aggregator} under label flipping")
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
        paths.append(_save(fig, out_dir / f"degradation_{aggregator}.png"))
    return paths


def plot_aggregator_comparison(report: Mapping[str, Any], out_dir: Path) -> list[Path]:
    """One figure per malicious-organization count comparing all aggregators."""
    cells = report["cells"]
    aggregators = sorted({c["aggregator"] for c in cells})
    counts = sorted({c["n_malicious"] for c in cells if c["n_malicious"] > 0})
    paths = []
    for count in counts:
        fig, ax = plt.subplots(figsize=(6, 4))
        for aggregator in aggregators:
            fractions, accuracies = _matrix_accuracy(cells, aggregator, count)
            if not fractions:
                continue
            ax.plot(
                [f * 100 for f in fractions],
                accuracies,
                marker="o",
                label=aggregator,
            )
        ax.set_xlabel("poisoning percentage")
        ax.set_ylabel("test accuracy")
        ax.set_ylim(*_ACCURACY_LIMITS)
        ax.set_title(f"Aggregators with {count} malicious organization(s)")
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
        paths.append(_save(fig, out_dir / f"comparison_m{count}.png"))
    return paths


def render_run_report(run_dir: str | Path) -> list[Path]:
    """Render every figure the artifacts in ``run_dir`` support."""
    run_dir = Path(run_dir)
    produced: list[Path] = []
    metrics_path = run_dir / "metrics.json"
    matrix_path = run_dir / "matrix.json"
    if metrics_path.exists():
        metrics = json.loads(metrics_path.read_text(encoding="utf-8"))
        if metrics.get("mode") == "federated" and metrics.get("rounds"):
            produced.append(plot_federated_curves(metrics, run_dir / "curves.png"))
        elif metrics.get("mode") == "centralized" and metrics.get("epochs"):
            produced.append(plot_centralized_curves(metrics, run_dir / "curves.png"))
        final = metrics.get("final", {})
        if "confusion" in final:
            produced.append(
                plot_confusion(
                    final["confusion"],
                    run_dir / "confusion.png",
                    f"{metrics.get('mode', 'run')} test confusion",
                )
            )
    if matrix_path.exists():
        report = json.loads(matrix_path.read_text(encoding="utf-8"))
        produced.extend(plot_matrix_degradation(report, run_dir))
        produced.extend(plot_aggregator_comparison(report, run_dir))
    if not produced:
        raise InvalidInputError(f"no metrics.json or matrix.json in {run_dir}")
    return produced
