"""DCGAN training with FID / energy tracking and the class-balanced augmented dataset"""

from __future__ import annotations

import logging
from dataclasses import asdict
from pathlib import Path
from typing import Any

from boxes import GroundTruth
from config import ExperimentConfig
from gan import (
    CurveRow,
    TrainState,
    balance_counts,
    class_pools,
    evaluate_quality,
    load_gan,
    read_fid_curve,
    save_gan,
    synthesize,
    train_gan,
    write_fid_curve,
    write_sample_grid,
)
from imageio_pgm import Gray
from synthgpr import (
    SPLITS,
    DatasetManifest,
    LabeledImage,
    SplitInfo,
    load_manifest,
    read_dataset,
    sample_seed,
    staged_dataset,
    write_split,
)

from .report import emit_report
from .runs import dataset_hash, load_split, prepare_run, require_checkpoint, write_json

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())


def write_augmented_dataset(
    source: Path, target: Path, generated: dict[int, list[tuple[Gray, GroundTruth]]], extra: dict[str, Any]
) -> DatasetManifest:
    """Copy of ``source`` whose train split also holds the generated images, re-indexed class-major"""
    manifest = load_manifest(source)
    with staged_dataset(target) as staging:
        out = _write_augmented(source, target, staging, manifest, generated, extra)
    logger.info("augmented dataset written to %s", target)
    return out


def _write_augmented(
    source: Path,
    target: Path,
    staging: Path,
    manifest: DatasetManifest,
    generated: dict[int, list[tuple[Gray, GroundTruth]]],
    extra: dict[str, Any],
) -> DatasetManifest:
    splits: dict[str, SplitInfo] = {}
    cursor = 0
    for split in SPLITS:
        if split not in manifest.splits:
            continue
        items = read_dataset(source, split)
        by_class: dict[int, list[tuple[Gray, tuple[GroundTruth, ...]]]] = {k: [] for k in range(len(manifest.class_names))}
        for item in items:
            key = item.annotations[0].class_id if item.annotations else 0
            by_class[key].append((item.image, item.annotations))
        if split == "train":
            for class_id, samples in generated.items():
                by_class[class_id].extend((image, (gt,)) for image, gt in samples)
        start = cursor
        written: list[LabeledImage] = []
        for class_id in sorted(by_class):
            for image, gts in by_class[class_id]:
                relabeled = tuple(GroundTruth(g.box, g.class_id, cursor) for g in gts)
                written.append(LabeledImage(cursor, image, relabeled))
                cursor += 1
        write_split(staging, written)
        counts = tuple(len(by_class[k]) for k in sorted(by_class))
        splits[split] = SplitInfo(start, cursor, counts)

    config = dict(manifest.config)
    config["augmentation"] = extra
    out = DatasetManifest(target, splits, manifest.class_names, manifest.image_size, manifest.mode, manifest.seed, config)
    write_json(staging / "manifest.json", out.to_json())
    return out


def earlier_curve(checkpoint: Path, step: int) -> list[CurveRow]:
    """Curve rows recorded before ``step`` in the run that wrote ``checkpoint``"""
    path = checkpoint.resolve().parent.parent / "fid_curve.csv"
    if not path.is_file():
        logger.warning("no fid_curve.csv next to %s, the resumed curve starts at step %d", checkpoint, step)
        return []
    return [row for row in read_fid_curve(path) if row.step < step]


def train_gan_impl(config: ExperimentConfig, resume: str | None = None) -> dict[str, Any]:
    """Implementation for train-gan command"""
    run_dir = prepare_run(config, "train_gan")
    data_root = Path(config.dataset.dir)
    train_items = load_split(data_root, "train")
    manifest = load_manifest(data_root)
    spec, settings = config.gan.spec, config.gan.settings

    states: dict[int, TrainState] | None = None
    rows: list[CurveRow] = []
    if resume:
        require_checkpoint(resume, "gan", "--resume")
        spec, states = load_gan(resume)
        rows = earlier_curve(Path(resume), max((s.step for s in states.values()), default=0))
    pools = class_pools(train_items, spec.image_size, len(manifest.class_names))

    checkpoint_paths: list[str] = []

    def on_checkpoint(step: int, current: dict[int, TrainState]) -> None:
        path = save_gan(run_dir / "checkpoints" / f"gan_step{step:06d}.mcga", current, spec)
        checkpoint_paths.append(str(path))
        for class_id, state in current.items():
            write_sample_grid(
                run_dir / "samples" / f"class{class_id}_step{step:06d}.pgm",
                state,
                spec,
                settings.grid_samples,
                sample_seed(spec.seed, class_id),
            )
        row = evaluate_quality(current, pools, spec, settings)
        rows.append(row)
        write_fid_curve(run_dir / "fid_curve.csv", rows)
        logger.info("step %d: FID %.4f energy real %.1f generated %.1f", step, row.fid, row.energy_real, row.energy_gen)

    train_gan(pools, spec, settings, on_checkpoint, states)

    summary: dict[str, Any] = {
        "checkpoints": checkpoint_paths,
        "curve": [asdict(r) for r in rows],
        "dataset": dataset_hash(data_root),
    }
    if config.gan.augment_target > 0:
        final = load_gan(checkpoint_paths[-1])[1]
        real_counts = {k: manifest.splits["train"].counts[k] for k in final}
        needed = balance_counts(real_counts, config.gan.augment_target)
        generated = {
            k: synthesize(final[k], spec, n, sample_seed(spec.seed, 1000 + k), manifest.image_size, config.gan.auto_box_fraction)
            for k, n in needed.items()
        }
        extra = {"target": config.gan.augment_target, "generated": {str(k): len(v) for k, v in generated.items()}}
        write_augmented_dataset(data_root, Path(config.dataset.augmented_dir), generated, extra)
        summary["augmented"] = {"dir": config.dataset.augmented_dir, **extra}
    write_json(run_dir / "summary.json", summary)
    emit_report(run_dir)
    return summary
