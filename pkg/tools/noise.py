"""Noise-robustness evaluation of a baseline and an MCGA checkpoint"""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Any

from config import ExperimentConfig
from detector import evaluate, load_detector
from synthgpr import LabeledImage, add_gaussian_noise, load_manifest, sample_seed

from .runs import load_split, prepare_run, require_checkpoint, write_json

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

FIELDS = ("model", "map_clean", "map_noisy", "delta", "confidence_clean", "confidence_noisy", "map_weak")


def noisy_copy(items: list[LabeledImage], sigma: float, seed: int) -> list[LabeledImage]:
    """Same annotations, N(0, sigma^2) gray-level noise per image; a fresh list"""
    return [
        LabeledImage(item.index, add_gaussian_noise(item.image, sigma, sample_seed(seed, item.index)), item.annotations)
        for item in items
    ]


def noise_eval_impl(config: ExperimentConfig) -> dict[str, Any]:
    """Implementation for noise-eval command"""
    run_dir = prepare_run(config, "noise_eval")
    checkpoints = {"baseline": config.noise.baseline_checkpoint, "mcga": config.noise.mcga_checkpoint}
    for name, path in checkpoints.items():
        require_checkpoint(path, "detector", f"noise.{name}_checkpoint")

    root = Path(config.dataset.dir)
    manifest = load_manifest(root)
    clean = load_split(root, config.noise.split)
    noisy = noisy_copy(clean, config.noise.sigma, config.run.seed)
    weak = load_split(root, "test_weak") if "test_weak" in manifest.splits else None

    rows: list[dict[str, Any]] = []
    for name, path in checkpoints.items():
        model, params, _ = load_detector(path)
        before = evaluate(clean, model, params, manifest.class_names, config.eval.iou_threshold)
        after = evaluate(noisy, model, params, manifest.class_names, config.eval.iou_threshold)
        row: dict[str, Any] = {
            "model": name,
            "map_clean": before.map50,
            "map_noisy": after.map50,
            "delta": before.map50 - after.map50,
            "confidence_clean": before.mean_confidence,
            "confidence_noisy": after.mean_confidence,
            "map_weak": None,
        }
        if weak is not None:
            row["map_weak"] = evaluate(weak, model, params, manifest.class_names, config.eval.iou_threshold).map50
        rows.append(row)
        logger.info("%s: mAP@50 clean %.4f noisy %.4f", name, before.map50, after.map50)

    write_json(run_dir / "noise.json", {"sigma": config.noise.sigma, "split": config.noise.split, "rows": rows})
    with (run_dir / "noise.csv").open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return {"sigma": config.noise.sigma, "rows": rows}
