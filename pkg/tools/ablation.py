"""Ablation grid: augmentation, MCFF, GAM and pretraining toggles"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from blocks import ParamStore
from config import ExperimentConfig
from metrics import MetricsReport
from tensorcore import parallel_map

from .runs import load_pretrained, prepare_run, require_dataset, row_summary, run_detector, spec_variant, write_json

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())


@dataclass(frozen=True)
class AblationRow:
    name: str
    augment: bool
    mcff: bool
    gam: bool
    pretrain: bool


ROWS = (
    AblationRow("base", False, False, False, False),
    AblationRow("+aug", True, False, False, False),
    AblationRow("+aug+mcff", True, True, False, False),
    AblationRow("+aug+gam", True, False, True, False),
    AblationRow("+aug+both", True, True, True, False),
    AblationRow("+aug+both+pretrain", True, True, True, True),
)


def row_dir(run_dir: Path, row: AblationRow, seed: int) -> Path:
    return run_dir / "rows" / row.name.replace("+", "plus_").strip("_") / f"seed{seed}"


def _pretrained_weights(config: ExperimentConfig, run_dir: Path) -> ParamStore:
    """Pretrained full-stack weights from detector.pretrained, or a shapes pretraining run"""
    if config.detector.pretrained:
        return load_pretrained(config.detector.pretrained)
    require_dataset(config.dataset.shapes_dir)
    spec = spec_variant(config.detector.spec, mcff=True, gam=True)
    run = run_detector(
        config,
        spec,
        config.dataset.shapes_dir,
        run_dir / "pretrain",
        config.run.seed,
        epochs=config.transfer.pretrain_epochs,
        eval_split="val",
    )
    return load_pretrained(run.checkpoint)


def ablate_impl(config: ExperimentConfig) -> dict[str, Any]:
    """Implementation for ablate command"""
    run_dir = prepare_run(config, "ablate")
    require_dataset(config.dataset.dir)
    require_dataset(config.dataset.augmented_dir)
    pretrained = _pretrained_weights(config, run_dir)

    jobs = [(row, seed) for row in ROWS for seed in config.ablation.seeds]

    def run_job(job: tuple[AblationRow, int]) -> MetricsReport:
        row, seed = job
        root = config.dataset.augmented_dir if row.augment else config.dataset.dir
        spec = spec_variant(config.detector.spec, row.mcff, row.gam)
        init_from = pretrained if row.pretrain else None
        return run_detector(config, spec, root, row_dir(run_dir, row, seed), seed, init_from=init_from).report

    reports = parallel_map(run_job, jobs, config.run.threads)
    by_row: dict[str, dict[int, MetricsReport]] = {row.name: {} for row in ROWS}
    for (row, seed), report in zip(jobs, reports):
        by_row[row.name][seed] = report

    table = [{"row": row.name, **row_summary(by_row[row.name])} for row in ROWS]
    write_json(run_dir / "ablation.json", {"seeds": list(config.ablation.seeds), "rows": table})
    with (run_dir / "ablation.csv").open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["row", "precision", "recall", "map50"])
        writer.writerows([r["row"], repr(r["precision"]), repr(r["recall"]), repr(r["map50"])] for r in table)
    logger.info("ablation grid finished: %d rows x %d seeds", len(ROWS), len(config.ablation.seeds))
    return {"rows": table}
