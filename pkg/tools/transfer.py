"""Shapes pretraining versus training from scratch"""

from __future__ import annotations

import logging
from typing import Any

from config import ExperimentConfig
from detector import FitResult

from .runs import load_pretrained, median, prepare_run, require_dataset, run_detector, write_json

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())


def epochs_to_target(result: FitResult, target: float) -> int | None:
    """First epoch whose validation mAP@50 reaches ``target``; None if never"""
    for log in result.history:
        if log.val_map50 >= target:
            return log.epoch
    return None


def transfer_impl(config: ExperimentConfig) -> dict[str, Any]:
    """Implementation for transfer command

    Both arms of a seed fine-tune with the same seed, hence the same data
    order; they differ only in their initial weights.
    """
    run_dir = prepare_run(config, "transfer")
    require_dataset(config.dataset.shapes_dir)
    require_dataset(config.dataset.dir)
    spec = config.detector.spec
    settings = config.transfer
    per_seed: dict[str, dict[str, Any]] = {}

    for seed in settings.seeds:
        seed_dir = run_dir / f"seed{seed}"
        pre = run_detector(
            config, spec, config.dataset.shapes_dir, seed_dir / "pretrain", seed, epochs=settings.pretrain_epochs, eval_split="val"
        )
        entry: dict[str, Any] = {"pretrain_map50": pre.report.map50}
        if settings.finetune_epochs > 0:
            weights = load_pretrained(pre.checkpoint)
            tuned = run_detector(
                config, spec, config.dataset.dir, seed_dir / "finetune", seed, epochs=settings.finetune_epochs, init_from=weights
            )
            scratch = run_detector(config, spec, config.dataset.dir, seed_dir / "scratch", seed, epochs=settings.finetune_epochs)
            entry.update(
                finetune_epochs_to_target=epochs_to_target(tuned.fit, settings.target_map50),
                scratch_epochs_to_target=epochs_to_target(scratch.fit, settings.target_map50),
                finetune_map50=tuned.report.map50,
                scratch_map50=scratch.report.map50,
            )
        per_seed[str(seed)] = entry

    summary: dict[str, Any] = {"target_map50": settings.target_map50, "per_seed": per_seed}
    if settings.finetune_epochs > 0:
        never = float(settings.finetune_epochs + 1)
        for arm in ("finetune", "scratch"):
            reached = [e[f"{arm}_epochs_to_target"] for e in per_seed.values()]
            summary[f"{arm}_median_epochs"] = median([never if r is None else float(r) for r in reached])
    write_json(run_dir / "transfer.json", summary)
    return summary
