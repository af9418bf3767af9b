"""Detector training and checkpoint evaluation"""

from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path
from typing import Any

from config import ExperimentConfig
from detector import evaluate, load_detector
from synthgpr import load_manifest

from .report import emit_report
from .runs import dataset_hash, load_pretrained, load_split, prepare_run, require_checkpoint, run_detector, timed, write_json, write_metrics

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())


def train_detector_impl(config: ExperimentConfig, data_root: str | None = None) -> dict[str, Any]:
    """Implementation for train-detector command

    Trains the variant described by ``[detector]`` (toggles included) on
    ``dataset.dir`` unless ``data_root`` names another dataset, optionally
    starting from ``detector.pretrained``.
    """
    run_dir = prepare_run(config, "train_detector")
    root = Path(data_root or config.dataset.dir)
    init = load_pretrained(config.detector.pretrained) if config.detector.pretrained else None
    timings: dict[str, float] = {}
    with timed(timings, "train_detector"):
        run = run_detector(config, config.detector.spec, root, run_dir, config.run.seed, init_from=init)
    write_json(run_dir / "timing.json", timings)
    emit_report(run_dir)
    return {
        "checkpoint": str(run.checkpoint),
        "best_epoch": run.fit.best_epoch,
        "val_map50": run.fit.best_map50,
        "test_map50": run.report.map50,
        "precision": run.report.precision,
        "recall": run.report.recall,
    }


def eval_impl(config: ExperimentConfig, checkpoint: str | None = None, split: str | None = None) -> dict[str, Any]:
    """Implementation for eval command"""
    run_dir = prepare_run(config, "eval")
    path = checkpoint or config.eval.checkpoint
    require_checkpoint(path, "detector", "eval.checkpoint")
    split_name = split or config.eval.split
    root = Path(config.dataset.dir)
    items = load_split(root, split_name)
    class_names = load_manifest(root).class_names

    model, params, meta = load_detector(path)
    report = evaluate(items, model, params, class_names, config.eval.iou_threshold)
    report = replace(report, seed=meta.get("seed"), config={"checkpoint": str(path), "split": split_name})
    write_metrics(run_dir, report)
    write_json(run_dir / "eval.json", {"checkpoint": str(path), "split": split_name, "dataset": dataset_hash(root)})
    emit_report(run_dir)
    return {"split": split_name, "map50": report.map50, "precision": report.precision, "recall": report.recall}
