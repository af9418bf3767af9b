from __future__ import annotations

import json
import logging
from collections.abc import Callable
from dataclasses import dataclass
from typing import Any

import typer
from dotenv import load_dotenv

load_dotenv()

from config import ExperimentConfig, Overrides, load_config, log_level_from_env
from errors import exit_code_for

# Import tool implementations
from tools import (
    synth_impl,
    train_gan_impl,
    train_detector_impl,
    eval_impl,
    noise_eval_impl,
    ablate_impl,
    transfer_impl,
    emit_report,
)

logger = logging.getLogger("gprkit")

app = typer.Typer(
    name="gprkit",
    help="GPR defect-detection experiments: synthesis, DCGAN augmentation, MCGA detector training and evaluation.",
    no_args_is_help=True,
    add_completion=False,
)


@dataclass
class GlobalOptions:
    config_path: str | None
    overrides: Overrides


def _emit(summary: dict[str, Any]) -> None:
    typer.echo(json.dumps(summary, indent=2, sort_keys=True, default=str))


def _run(ctx: typer.Context, command: Callable[[ExperimentConfig], dict[str, Any]]) -> None:
    """Load the config, run one command and map failures onto exit codes"""
    options: GlobalOptions = ctx.obj
    try:
        config = load_config(options.config_path, options.overrides)
        summary = command(config)
    except Exception as e:
        code = exit_code_for(e)
        logger.error("%s: %s", ctx.command.name, e)
        logger.debug("traceback", exc_info=True)
        raise typer.Exit(code) from e
    _emit(summary)


@app.callback()
def main(
    ctx: typer.Context,
    config: str | None = typer.Option(None, "--config", help="TOML experiment config"),
    seed: int | None = typer.Option(None, "--seed", min=0, help="Overrides run.seed"),
    out: str | None = typer.Option(None, "--out", help="Overrides run.out"),
    threads: int | None = typer.Option(None, "--threads", min=1, help="Worker threads; 1 for bitwise determinism"),
    log_level: str | None = typer.Option(None, "--log-level", help="Defaults to $GPRKIT_LOG_LEVEL or INFO"),
) -> None:
    logging.basicConfig(
        level=(log_level or log_level_from_env()).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )
    ctx.obj = GlobalOptions(config, Overrides(seed=seed, out=out, threads=threads))


@app.command()
def synth(
    ctx: typer.Context,
    shapes: bool = typer.Option(False, "--shapes", help="Generate the generic-shapes pretraining set instead"),
) -> None:
    """Synthesize the labeled B-scan dataset

    Writes images, labels and manifest.json under dataset.dir (or
    dataset.shapes_dir with --shapes). Re-running with the same config and
    seed reproduces the tree byte for byte.
    """
    _run(ctx, lambda config: synth_impl(config, shapes=shapes))


@app.command("train-gan")
def train_gan(
    ctx: typer.Context,
    resume: str | None = typer.Option(None, "--resume", help="GAN checkpoint to continue from"),
) -> None:
    """Train one DCGAN per defect class, tracking FID and energy gradient

    Checkpoints, sample grids and fid_curve.csv land in <out>/train_gan.
    With gan.augment_target > 0 the class-balanced augmented dataset is
    written to dataset.augmented_dir.
    """
    _run(ctx, lambda config: train_gan_impl(config, resume=resume))


@app.command("train-detector")
def train_detector(
    ctx: typer.Context,
    data: str | None = typer.Option(None, "--data", help="Dataset directory; defaults to dataset.dir"),
) -> None:
    """Train the detector variant described by [detector]"""
    _run(ctx, lambda config: train_detector_impl(config, data_root=data))


@app.command("eval")
def evaluate(
    ctx: typer.Context,
    checkpoint: str | None = typer.Option(None, "--checkpoint", help="Detector checkpoint; defaults to eval.checkpoint"),
    split: str | None = typer.Option(None, "--split", help="Dataset split; defaults to eval.split"),
) -> None:
    """Evaluate a detector checkpoint: per-class AP, mAP@50, precision, recall and confusion"""
    _run(ctx, lambda config: eval_impl(config, checkpoint=checkpoint, split=split))


@app.command()
def ablate(ctx: typer.Context) -> None:
    """Run the six-row ablation grid over ablation.seeds

    Rows toggle GAN augmentation, MCFF, GAM and shapes pretraining;
    medians across seeds go to ablation.json and ablation.csv.
    """
    _run(ctx, ablate_impl)


@app.command("noise-eval")
def noise_eval(ctx: typer.Context) -> None:
    """Compare baseline and MCGA checkpoints on clean versus noisy inputs"""
    _run(ctx, noise_eval_impl)


@app.command()
def transfer(ctx: typer.Context) -> None:
    """Shapes pretraining then fine-tuning, against training from scratch"""
    _run(ctx, transfer_impl)


@app.command()
def report(
    ctx: typer.Context,
    run_dir: str = typer.Argument(..., help="Run directory holding metrics.json or fid_curve.csv"),
) -> None:
    """Re-emit report.json and SVG plots for an existing run directory"""
    _run(ctx, lambda _config: emit_report(run_dir))


if __name__ == "__main__":
    app()
