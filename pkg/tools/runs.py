"""Run directories, JSON artifacts, dataset hashing and shared detector runs"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from collections.abc import Iterator, Mapping, Sequence
from contextlib import contextmanager
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any

import numpy as np

from blocks import ParamStore, describe
from config import ExperimentConfig, echo_config
from detector import DetectorSpec, FitResult, FitSettings, build_detector, evaluate, fit, load_detector, save_detector
from errors import MissingArtifactError
from metrics import MetricsReport, write_pr_csv
from synthgpr import LabeledImage, load_manifest, read_dataset
from validation import require, validate_checkpoint, validate_config, validate_dataset_dir

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())


def prepare_run(config: ExperimentConfig, command: str) -> Path:
    """Validate the config and create ``<out>/<command>`` with its config echo"""
    require(validate_config(config), "config")
    run_dir = Path(config.run.out) / command
    echo_config(config, run_dir)
    return run_dir


def write_json(path: str | Path, data: Any) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return target


def read_json(path: str | Path) -> Any:
    source = Path(path)
    if not source.is_file():
        raise MissingArtifactError([str(source)], "run artifact")
    return json.loads(source.read_text(encoding="utf-8"))


def dataset_hash(root: str | Path) -> str:
    """Git blob hash of the dataset manifest bytes"""
    manifest = Path(root) / "manifest.json"
    if not manifest.is_file():
        raise MissingArtifactError([str(manifest)], "dataset")
    data = manifest.read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def require_dataset(root: str | Path) -> None:
    if not validate_dataset_dir(root)["valid"]:
        raise MissingArtifactError([str(Path(root) / "manifest.json")], "dataset")


def load_split(root: str | Path, split: str) -> list[LabeledImage]:
    require_dataset(root)
    return read_dataset(root, split)


def require_checkpoint(path: str | Path, kind: str, key: str) -> None:
    """Missing file -> MissingArtifactError naming the config key; wrong contents -> ConfigError"""
    if not path:
        raise MissingArtifactError([f"<unset {key}>"], f"{kind} checkpoint")
    if not Path(path).is_file():
        raise MissingArtifactError([str(path)], f"{kind} checkpoint ({key})")
    require(validate_checkpoint(path, kind), key)


@contextmanager
def timed(timings: dict[str, float], label: str) -> Iterator[None]:
    """Record wall-clock seconds; kept out of reproducible artifacts"""
    start = time.perf_counter()
    try:
        yield
    finally:
        timings[label] = round(time.perf_counter() - start, 3)


# ---------------------------------------------------------------------------
# detector runs shared by train-detector, ablate and transfer
# ---------------------------------------------------------------------------
@dataclass
class DetectorRun:
    run_dir: Path
    checkpoint: Path
    report: MetricsReport
    fit: FitResult


def history_rows(result: FitResult) -> list[dict[str, Any]]:
    return [asdict(log) for log in result.history]


def write_metrics(run_dir: Path, report: MetricsReport) -> None:
    write_json(run_dir / "metrics.json", report.to_json())
    for name, curve in report.pr_curves.items():
        write_pr_csv(run_dir / f"pr_{name}.csv", curve)


def run_detector(
    config: ExperimentConfig,
    spec: DetectorSpec,
    data_root: str | Path,
    run_dir: Path,
    seed: int,
    epochs: int | None = None,
    init_from: ParamStore | None = None,
    eval_split: str = "test",
) -> DetectorRun:
    """Train on ``data_root`` train/val, keep the best-val state, evaluate it on ``eval_split``"""
    train = load_split(data_root, "train")
    val = load_split(data_root, "val")
    held_out = load_split(data_root, eval_split)
    class_names = load_manifest(data_root).class_names

    model, params = build_detector(spec, seed)
    if init_from is not None:
        skipped = params.copy_from(init_from)
        logger.info("initialized from pretrained weights, %d tensor(s) not transferred", len(skipped))
    settings: FitSettings = replace(config.detector.fit, seed=seed)
    if epochs is not None:
        settings = replace(settings, epochs=epochs)

    result = fit(model, params, train, val, class_names, settings)
    params.load_state(result.best_state)
    report = evaluate(held_out, model, params, class_names, config.eval.iou_threshold)
    report = replace(report, seed=seed, config={"spec": asdict(spec), "fit": asdict(settings), "split": eval_split})

    run_dir.mkdir(parents=True, exist_ok=True)
    checkpoint = save_detector(
        run_dir / "checkpoints" / "best.mcga",
        model,
        params,
        {"epoch": result.best_epoch, "val_map50": result.best_map50},
    )
    write_json(
        run_dir / "history.json",
        {
            "seed": seed,
            "best_epoch": result.best_epoch,
            "epochs": history_rows(result),
            "dataset": dataset_hash(data_root),
            "model": describe(params),
        },
    )
    write_metrics(run_dir, report)
    logger.info("%s: mAP@50 %.4f on %s", run_dir, report.map50, eval_split)
    return DetectorRun(run_dir, checkpoint, report, result)


def load_pretrained(path: str | Path) -> ParamStore:
    require_checkpoint(path, "detector", "detector.pretrained")
    _, params, _ = load_detector(path)
    return params


def median(values: Sequence[float]) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))


def spec_variant(spec: DetectorSpec, mcff: bool, gam: bool) -> DetectorSpec:
    return replace(spec, mcff_in_neck=mcff, gam_stage=(spec.gam_stage or 1) if gam else None, gam_in_neck=spec.gam_in_neck and gam)


def row_summary(reports: Mapping[int, MetricsReport]) -> dict[str, Any]:
    return {
        "precision": median([r.precision for r in reports.values()]),
        "recall": median([r.recall for r in reports.values()]),
        "map50": median([r.map50 for r in reports.values()]),
        "per_seed": {str(s): {"precision": r.precision, "recall": r.recall, "map50": r.map50} for s, r in reports.items()},
    }
