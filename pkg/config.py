"""Experiment configuration: TOML sections mapped onto frozen dataclasses"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import tomllib
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from detector import DetectorSpec, FitSettings
from errors import ConfigError, MissingArtifactError
from gan import GanSettings, GanSpec
from synthgpr import DatasetPlan, ScenePrior, ShapesPrior

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

ENV_LOG_LEVEL = "GPRKIT_LOG_LEVEL"
ENV_THREADS = "GPRKIT_THREADS"
SECTIONS = ("run", "dataset", "scene", "shapes", "gan", "detector", "eval", "ablation", "noise", "transfer")


@dataclass(frozen=True)
class RunSection:
    out: str = "runs/default"
    seed: int = 7
    threads: int = 1


@dataclass(frozen=True)
class DatasetSection:
    dir: str = "data/gpr"
    augmented_dir: str = "data/gpr_aug"
    shapes_dir: str = "data/shapes"
    plan: DatasetPlan = field(default_factory=DatasetPlan)


@dataclass(frozen=True)
class GanSection:
    spec: GanSpec = field(default_factory=GanSpec)
    settings: GanSettings = field(default_factory=GanSettings)
    augment_target: int = 0
    auto_box_fraction: float = 0.5


@dataclass(frozen=True)
class DetectorSection:
    spec: DetectorSpec = field(default_factory=DetectorSpec)
    fit: FitSettings = field(default_factory=FitSettings)
    pretrained: str = ""


@dataclass(frozen=True)
class EvalSection:
    iou_threshold: float = 0.5
    split: str = "test"
    checkpoint: str = ""


@dataclass(frozen=True)
class AblationSection:
    seeds: tuple[int, ...] = (1, 2, 3)


@dataclass(frozen=True)
class NoiseSection:
    sigma: float = 25.0
    split: str = "test"
    baseline_checkpoint: str = ""
    mcga_checkpoint: str = ""


@dataclass(frozen=True)
class TransferSection:
    pretrain_epochs: int = 50
    finetune_epochs: int = 60
    target_map50: float = 0.5
    seeds: tuple[int, ...] = (1, 2, 3)


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    gan: GanSection = field(default_factory=GanSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    transfer: TransferSection = field(default_factory=TransferSection)
    source: bytes = field(default=b"", repr=False, compare=False)

    def to_json(self) -> dict[str, Any]:
        resolved = asdict(self)
        resolved.pop("source")
        return resolved


@dataclass(frozen=True)
class Overrides:
    seed: int | None = None
    out: str | None = None
    threads: int | None = None


# ---------------------------------------------------------------------------
# table -> dataclass
# ---------------------------------------------------------------------------
def _coerce(section: str, key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"[{section}] {key} must be true or false, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"[{section}] {key} must be a list, got {value!r}")
        items = [_coerce(section, key, v, default[0]) if default else v for v in value]
        return tuple(items)
    if default is not None and not isinstance(value, type(default)):
        raise ConfigError(f"[{section}] {key} expects {type(default).__name__}, got {value!r}")
    return value


def _build(cls: type[Any], table: Mapping[str, Any], section: str, skip: frozenset[str] = frozenset()) -> Any:
    """Instantiate ``cls`` from the keys of ``table`` it declares; other keys are left to the caller"""
    template = cls()
    values: dict[str, Any] = {}
    for f in dataclasses.fields(cls):
        if f.name in skip or f.name not in table:
            continue
        value = table[f.name]
        default = getattr(template, f.name)
        if f.name == "gam_stage":
            values[f.name] = None if value in (0, False) else _coerce(section, f.name, value, 1)
        else:
            values[f.name] = _coerce(section, f.name, value, default)
    return dataclasses.replace(template, **values)


def _check_keys(section: str, table: Mapping[str, Any], *classes: type[Any], extra: tuple[str, ...] = ()) -> None:
    known = {f.name for cls in classes for f in dataclasses.fields(cls)} | set(extra)
    unknown = sorted(set(table) - known)
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s): {', '.join(unknown)}")


def parse_config(text: str, overrides: Overrides | None = None) -> ExperimentConfig:
    """Build an ExperimentConfig from TOML text; every default is filled in"""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"config is not valid TOML: {e}") from e
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    for name, table in doc.items():
        if not isinstance(table, dict):
            raise ConfigError(f"'{name}' must be a [section] table")
    tables: dict[str, dict[str, Any]] = {name: doc.get(name, {}) for name in SECTIONS}
    overrides = overrides or Overrides()

    _check_keys("run", tables["run"], RunSection)
    run = _build(RunSection, tables["run"], "run")
    if "threads" not in tables["run"] and os.environ.get(ENV_THREADS):
        try:
            run = dataclasses.replace(run, threads=int(os.environ[ENV_THREADS]))
        except ValueError as e:
            raise ConfigError(f"{ENV_THREADS} must be an integer, got {os.environ[ENV_THREADS]!r}") from e
    run = dataclasses.replace(
        run,
        seed=run.seed if overrides.seed is None else overrides.seed,
        out=run.out if overrides.out is None else overrides.out,
        threads=run.threads if overrides.threads is None else overrides.threads,
    )

    _check_keys("scene", tables["scene"], ScenePrior)
    _check_keys("shapes", tables["shapes"], ShapesPrior)
    ds_table = tables["dataset"]
    _check_keys("dataset", ds_table, DatasetSection, DatasetPlan)
    nested = sorted({"plan", "prior", "shapes"} & set(ds_table))
    if nested:
        raise ConfigError(f"[dataset] unknown key(s): {', '.join(nested)}; use the [scene] and [shapes] sections")
    plan = _build(DatasetPlan, ds_table, "dataset", skip=frozenset({"prior", "shapes"}))
    plan = dataclasses.replace(
        plan,
        seed=plan.seed if "seed" in ds_table else run.seed,
        prior=_build(ScenePrior, tables["scene"], "scene"),
        shapes=_build(ShapesPrior, tables["shapes"], "shapes"),
    )
    dataset = dataclasses.replace(_build(DatasetSection, ds_table, "dataset", skip=frozenset({"plan"})), plan=plan)

    gan_table = tables["gan"]
    _check_keys("gan", gan_table, GanSpec, GanSettings, extra=("augment_target", "auto_box_fraction"))
    gan_spec = _build(GanSpec, gan_table, "gan")
    if "seed" not in gan_table:
        gan_spec = dataclasses.replace(gan_spec, seed=run.seed)
    gan = GanSection(
        gan_spec,
        _build(GanSettings, gan_table, "gan"),
        _coerce("gan", "augment_target", gan_table.get("augment_target", 0), 0),
        _coerce("gan", "auto_box_fraction", gan_table.get("auto_box_fraction", 0.5), 0.5),
    )

    det_table = tables["detector"]
    _check_keys("detector", det_table, DetectorSpec, FitSettings, extra=("pretrained",))
    fit = _build(FitSettings, det_table, "detector")
    if "seed" not in det_table:
        fit = dataclasses.replace(fit, seed=run.seed)
    detector = DetectorSection(
        _build(DetectorSpec, det_table, "detector"),
        fit,
        _coerce("detector", "pretrained", det_table.get("pretrained", ""), ""),
    )

    built: dict[str, Any] = {}
    for name, cls in (
        ("eval", EvalSection),
        ("ablation", AblationSection),
        ("noise", NoiseSection),
        ("transfer", TransferSection),
    ):
        _check_keys(name, tables[name], cls)
        built[name] = _build(cls, tables[name], name)

    return ExperimentConfig(run, dataset, gan, detector, source=text.encode("utf-8"), **built)


def load_config(path: str | Path | None, overrides: Overrides | None = None) -> ExperimentConfig:
    """Read a config file; ``None`` yields the defaults"""
    if path is None:
        return parse_config("", overrides)
    source = Path(path)
    if not source.is_file():
        raise MissingArtifactError([str(source)], "config")
    raw = source.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ConfigError(f"{source}: config must be UTF-8 text") from e
    return dataclasses.replace(parse_config(text, overrides), source=raw)


def echo_config(config: ExperimentConfig, run_dir: str | Path) -> Path:
    """Write the verbatim input and the fully resolved settings into the run directory"""
    target = Path(run_dir)
    target.mkdir(parents=True, exist_ok=True)
    (target / "config.toml").write_bytes(config.source)
    resolved = json.dumps(config.to_json(), indent=2, sort_keys=True) + "\n"
    (target / "config_resolved.json").write_text(resolved, encoding="utf-8")
    logger.debug("config echoed to %s", target)
    return target


def log_level_from_env(default: str = "INFO") -> str:
    return os.environ.get(ENV_LOG_LEVEL, default).upper()
