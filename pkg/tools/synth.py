"""Dataset synthesis"""

from __future__ import annotations

import dataclasses
import logging
from pathlib import Path
from typing import Any

from config import ExperimentConfig
from synthgpr import generate_dataset

from .runs import dataset_hash, prepare_run, write_json

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())


def synth_impl(config: ExperimentConfig, shapes: bool = False) -> dict[str, Any]:
    """Implementation for synth command

    Writes the GPR dataset to ``dataset.dir``, or with ``shapes`` the
    generic-shapes pretraining set to ``dataset.shapes_dir``. Config is
    validated before anything is written.
    """
    run_dir = prepare_run(config, "synth_shapes" if shapes else "synth")
    plan = config.dataset.plan
    root = Path(config.dataset.dir)
    if shapes:
        plan = dataclasses.replace(plan, mode="shapes")
        root = Path(config.dataset.shapes_dir)

    manifest = generate_dataset(plan, root, threads=config.run.threads)
    summary: dict[str, Any] = {
        "dataset": str(root),
        "mode": manifest.mode,
        "class_names": list(manifest.class_names),
        "splits": {
            name: {"total": info.stop - info.start, "counts": dict(zip(manifest.class_names, info.counts))}
            for name, info in manifest.splits.items()
        },
        "manifest_hash": dataset_hash(root),
    }
    write_json(run_dir / "summary.json", summary)
    logger.info("synthesized %s dataset at %s", manifest.mode, root)
    return summary
