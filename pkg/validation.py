"""Config, dataset, checkpoint and run-directory validation utilities"""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable
from pathlib import Path
from typing import TypedDict

from checkpoint import MAGIC
from config import ExperimentConfig
from errors import ConfigError, ContractError, MissingArtifactError
from synthgpr import SPLITS, validate_plan

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

REPORT_INPUTS = ("metrics.json", "fid_curve.csv")
EMBEDDERS = ("frozen", "pixel")


class ValidationResult(TypedDict):
    """Result of validation operation"""
    valid: bool
    error: str | None


def _ok() -> ValidationResult:
    return {"valid": True, "error": None}


def _fail(message: str) -> ValidationResult:
    return {"valid": False, "error": message}


def require(result: ValidationResult, context: str = "") -> None:
    """Raise ConfigError for an invalid result"""
    if not result["valid"]:
        prefix = f"{context}: " if context else ""
        raise ConfigError(f"{prefix}{result['error']}")


def validate_config(config: ExperimentConfig) -> ValidationResult:
    """Check value ranges and cross-section consistency of a parsed config

    Returns:
        dict: {"valid": bool, "error": str or None}
    """
    problems: list[str] = []
    if config.run.threads < 1:
        problems.append(f"[run] threads must be >= 1, got {config.run.threads}")
    if config.run.seed < 0:
        problems.append(f"[run] seed must be non-negative, got {config.run.seed}")

    plan = config.dataset.plan
    for label, check in (
        ("dataset", lambda: validate_plan(plan)),
        ("gan", lambda: config.gan.spec.validate()),
        ("detector", lambda: config.detector.spec.validate()),
    ):
        try:
            check()
        except ConfigError as e:
            problems.append(f"[{label}] {e}")

    lo, hi = plan.prior.host_eps
    if not 0 < lo <= hi:
        problems.append(f"[scene] host_eps must be an increasing positive range, got {plan.prior.host_eps}")

    settings = config.gan.settings
    if settings.steps < 0 or settings.batch_size < 1 or settings.checkpoint_interval < 1:
        problems.append("[gan] steps must be >= 0, batch_size and checkpoint_interval >= 1")
    if settings.eval_samples < 2:
        problems.append(f"[gan] eval_samples must be >= 2, got {settings.eval_samples}")
    if settings.embedder not in EMBEDDERS:
        problems.append(f"[gan] embedder must be one of {EMBEDDERS}, got {settings.embedder!r}")
    if config.gan.augment_target < 0:
        problems.append(f"[gan] augment_target must be >= 0, got {config.gan.augment_target}")
    if not 0.0 < config.gan.auto_box_fraction < 1.0:
        problems.append(f"[gan] auto_box_fraction must lie in (0, 1), got {config.gan.auto_box_fraction}")

    fit = config.detector.fit
    if fit.epochs < 0 or fit.batch_size < 1 or fit.learning_rate <= 0:
        problems.append("[detector] epochs must be >= 0, batch_size >= 1 and learning_rate > 0")
    if tuple(config.detector.spec.input_size) != plan.image_size:
        problems.append(
            f"[detector] input_size {config.detector.spec.input_size} differs from the dataset image size {plan.image_size}"
        )
    if (plan.shapes.height, plan.shapes.width) != tuple(config.detector.spec.input_size):
        problems.append("[shapes] height and width must match [detector] input_size for pretraining")

    if not 0.0 < config.eval.iou_threshold <= 1.0:
        problems.append(f"[eval] iou_threshold must lie in (0, 1], got {config.eval.iou_threshold}")
    for label, split in (("eval", config.eval.split), ("noise", config.noise.split)):
        if split not in SPLITS:
            problems.append(f"[{label}] split must be one of {SPLITS}, got {split!r}")
    if config.noise.sigma < 0:
        problems.append(f"[noise] sigma must be non-negative, got {config.noise.sigma}")
    if not config.ablation.seeds or not config.transfer.seeds:
        problems.append("[ablation] and [transfer] seed lists must not be empty")
    if config.transfer.pretrain_epochs < 0 or config.transfer.finetune_epochs < 0:
        problems.append("[transfer] epoch counts must be >= 0")
    if not 0.0 < config.transfer.target_map50 <= 1.0:
        problems.append(f"[transfer] target_map50 must lie in (0, 1], got {config.transfer.target_map50}")

    if problems:
        return _fail("; ".join(problems))
    return _ok()


def validate_dataset_dir(root: str | Path) -> ValidationResult:
    """Dataset root must hold a readable manifest.json"""
    manifest = Path(root) / "manifest.json"
    if not manifest.is_file():
        return _fail(f"Dataset manifest not found: {manifest}")
    try:
        data = json.loads(manifest.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        return _fail(f"Unreadable dataset manifest {manifest}: {e}")
    missing = [key for key in ("splits", "class_names", "image_size", "mode", "seed") if key not in data]
    if missing:
        return _fail(f"Dataset manifest {manifest} lacks: {', '.join(missing)}")
    return _ok()


def validate_checkpoint(path: str | Path, kind: str) -> ValidationResult:
    """Checkpoint file exists, carries the container magic and the expected kind

    Only the header line is read.
    """
    source = Path(path)
    if not source.is_file():
        return _fail(f"Checkpoint not found: {source}")
    with source.open("rb") as fh:
        head = fh.readline()
    try:
        header = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        return _fail(f"{source} has no readable checkpoint header")
    if header.get("magic") != MAGIC:
        return _fail(f"{source}: bad magic {header.get('magic')!r}, expected {MAGIC}")
    found = header.get("meta", {}).get("kind")
    if found != kind:
        return _fail(f"{source} holds a {found!r} checkpoint, expected {kind!r}")
    return _ok()


def validate_run_dir(root: str | Path, accepted: Iterable[str] = REPORT_INPUTS) -> ValidationResult:
    """Run directory holds at least one artifact a report can be built from"""
    base = Path(root)
    names = list(accepted)
    if not any((base / name).is_file() for name in names):
        return _fail(f"Run directory {base} has none of: {', '.join(names)}")
    return _ok()


def require_artifact(result: ValidationResult, paths: list[str], context: str) -> None:
    """Raise MissingArtifactError for a failed existence check, ContractError otherwise"""
    if result["valid"]:
        return
    existing = [p for p in paths if Path(p).exists()]
    if len(existing) < len(paths):
        raise MissingArtifactError([p for p in paths if p not in existing], context)
    raise ContractError(result["error"] or context)
