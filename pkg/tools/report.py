"""Report emission: metrics JSON, PR CSVs and SVG plots for a run directory"""

from __future__ import annotations

import logging
from dataclasses import asdict
from pathlib import Path
from typing import Any

import matplotlib
from matplotlib.figure import Figure

from gan import read_fid_curve
from metrics import MetricsReport, read_pr_csv
from validation import REPORT_INPUTS, require_artifact, validate_run_dir

from .runs import read_json, write_json

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

REPORT_SOURCES = ("metrics.json", "history.json", "fid_curve.csv")
SVG_SETTINGS = {"svg.hashsalt": "gprkit", "svg.fonttype": "path"}


def _save_svg(fig: Figure, path: Path) -> Path:
    with matplotlib.rc_context(SVG_SETTINGS):
        fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def plot_loss_curve(epochs: list[dict[str, Any]], path: Path) -> Path:
    fig = Figure(figsize=(6, 4))
    ax = fig.subplots()
    xs = [e["epoch"] for e in epochs]
    for key, label in (("box_loss", "box"), ("cls_loss", "cls"), ("total", "total")):
        ax.plot(xs, [e[key] for e in epochs], label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    return _save_svg(fig, path)


def plot_pr_curves(curves: dict[str, list[tuple[float, float]]], path: Path) -> Path:
    fig = Figure(figsize=(5, 5))
    ax = fig.subplots()
    for name, points in curves.items():
        ax.plot([p[0] for p in points], [p[1] for p in points], label=name)
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.legend()
    return _save_svg(fig, path)


def plot_fid_curve(rows: list[dict[str, float]], path: Path) -> Path:
    fig = Figure(figsize=(6, 4))
    ax = fig.subplots()
    ax.plot([r["step"] for r in rows], [r["fid"] for r in rows], marker="o")
    ax.set_xlabel("step")
    ax.set_ylabel("FID")
    return _save_svg(fig, path)


def emit_report(run_dir: str | Path) -> dict[str, Any]:
    """Implementation for report command

    Needs metrics.json or fid_curve.csv; everything else is optional.
    report.json carries no wall-clock values.
    """
    root = Path(run_dir)
    require_artifact(validate_run_dir(root), [str(root / name) for name in REPORT_INPUTS], "report inputs")
    present = {name for name in REPORT_SOURCES if (root / name).is_file()}

    report: dict[str, Any] = {}
    if "metrics.json" in present:
        metrics = MetricsReport.from_json(read_json(root / "metrics.json"))
        report["metrics"] = metrics.to_json()
        curves = {}
        for name in metrics.class_names:
            if (root / f"pr_{name}.csv").is_file():
                curves[name] = list(read_pr_csv(root / f"pr_{name}.csv").points)
        if curves:
            plot_pr_curves(curves, root / "pr_curves.svg")
    if "history.json" in present:
        history = read_json(root / "history.json")
        report["loss_curve"] = history["epochs"]
        report["seed"] = history.get("seed")
        report["dataset"] = history.get("dataset")
        report["model"] = history.get("model")
        if history["epochs"]:
            plot_loss_curve(history["epochs"], root / "loss_curve.svg")
    if "fid_curve.csv" in present:
        rows = [asdict(r) for r in read_fid_curve(root / "fid_curve.csv")]
        report["fid_curve"] = rows
        plot_fid_curve(rows, root / "fid_curve.svg")

    write_json(root / "report.json", report)
    logger.info("report written to %s", root / "report.json")
    return report
