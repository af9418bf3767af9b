"""Synthetic GPR B-scans: layered media, defect signatures, noise, background removal and dataset trees.

Times are in nanoseconds, depths and positions in meters, the wavelet center
frequency in MHz. Propagation speed in a medium of relative permittivity eps
is ``C_M_PER_NS / sqrt(eps)``.
"""

from __future__ import annotations

import json
import logging
import math
import shutil
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Literal

import numpy as np
import numpy.typing as npt
from scipy.ndimage import gaussian_filter

from boxes import CLASS_NAMES, SHAPE_CLASS_NAMES, BBox, GroundTruth
from errors import ConfigError, ContractError, MissingArtifactError, SceneError
from imageio_pgm import Gray, read_pgm, to_uint8, write_pgm
from tensorcore import parallel_map

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

C_M_PER_NS = 0.3
FORMAT_VERSION = 1
SPLITS = ("train", "val", "test", "test_weak")

Field = npt.NDArray[np.float64]
DefectKind = Literal["cavity", "concave", "crack"]


@dataclass(frozen=True)
class MaterialLayer:
    top_depth: float
    epsilon_r: float


@dataclass(frozen=True)
class DefectSpec:
    kind: DefectKind
    x0: float
    depth: float
    extent: float
    epsilon_inclusion: float = 1.0
    multiples: int = 2
    dip_deg: float = 50.0
    amplitude: float = 1.0

    @property
    def class_id(self) -> int:
        return CLASS_NAMES.index(self.kind)


@dataclass(frozen=True)
class SceneSpec:
    layers: tuple[MaterialLayer, ...] = ()
    defects: tuple[DefectSpec, ...] = ()
    traces: int = 96
    samples_per_trace: int = 96
    dx: float = 0.02
    dt: float = 0.15
    fc: float = 1500.0
    noise_sigma: float = 0.0
    seed: int = 0
    echo_decay: float = 0.5
    concave_boost: float = 1.5
    crack_gain: float = 2.0
    beam_exponent: float = 8.0
    box_threshold: float = 0.1
    window_percentile: float = 99.0

    @property
    def time_window(self) -> float:
        return self.samples_per_trace * self.dt

    @property
    def positions(self) -> Field:
        return np.arange(self.traces, dtype=np.float64) * self.dx

    @property
    def times(self) -> Field:
        return np.arange(self.samples_per_trace, dtype=np.float64) * self.dt


@dataclass(eq=False)
class Sample:
    """Quantized B-scan, its annotations and the noiseless float field it came from"""

    image: Gray
    annotations: tuple[GroundTruth, ...]
    field: Field


# ---------------------------------------------------------------------------
# physics
# ---------------------------------------------------------------------------
def reflection_coeff(eps1: float, eps2: float) -> float:
    if eps1 <= 0 or eps2 <= 0:
        raise ValueError(f"permittivity must be positive, got {eps1} and {eps2}")
    r1, r2 = math.sqrt(eps1), math.sqrt(eps2)
    return (r1 - r2) / (r1 + r2)


def ricker_wavelet(fc: float, t: float | Field) -> Field:
    """(1 - 2 pi^2 fc^2 t^2) exp(-pi^2 fc^2 t^2); fc and t in reciprocal units"""
    if fc <= 0:
        raise ValueError(f"wavelet frequency must be positive, got {fc}")
    arg = (math.pi * fc * np.asarray(t, dtype=np.float64)) ** 2
    return np.asarray((1.0 - 2.0 * arg) * np.exp(-arg))


def hyperbola_trace(x0: float, d: float, v: float, x: float | Field) -> Field:
    """Two-way travel time to a point scatterer at lateral x0, depth d"""
    if v <= 0 or d <= 0:
        raise ValueError(f"velocity and depth must be positive, got v={v} d={d}")
    offset = np.asarray(x, dtype=np.float64) - x0
    return np.asarray((2.0 / v) * np.sqrt(d * d + offset * offset))


def velocity(eps: float) -> float:
    return C_M_PER_NS / math.sqrt(eps)


def host_epsilon(spec: SceneSpec, depth: float) -> float:
    """Permittivity of the layer containing ``depth``; the first layer reaches the surface"""
    if not spec.layers:
        return 1.0
    eps = spec.layers[0].epsilon_r
    for layer in spec.layers:
        if layer.top_depth <= depth:
            eps = layer.epsilon_r
    return eps


@dataclass(frozen=True)
class Interface:
    depth: float
    time: float
    coeff: float
    eps_below: float


def interfaces(spec: SceneSpec) -> list[Interface]:
    out: list[Interface] = []
    elapsed, previous = 0.0, 0.0
    for upper, lower in zip(spec.layers, spec.layers[1:]):
        elapsed += 2.0 * (lower.top_depth - previous) / velocity(upper.epsilon_r)
        previous = lower.top_depth
        out.append(Interface(lower.top_depth, elapsed, reflection_coeff(upper.epsilon_r, lower.epsilon_r), lower.epsilon_r))
    return out


def apex_time(defect: DefectSpec, spec: SceneSpec) -> float:
    return 2.0 * defect.depth / velocity(host_epsilon(spec, defect.depth))


def _taper(depth: float | Field, offset: Field, exponent: float) -> Field:
    d = np.asarray(depth, dtype=np.float64)
    return np.asarray((d / np.sqrt(d * d + offset * offset)) ** exponent)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------
def validate_scene(spec: SceneSpec) -> None:
    if spec.traces < 2 or spec.samples_per_trace < 2:
        raise SceneError(f"scene needs at least 2x2 samples, got {spec.samples_per_trace}x{spec.traces}")
    if spec.dx <= 0 or spec.dt <= 0 or spec.fc <= 0:
        raise SceneError(f"dx, dt and fc must be positive: dx={spec.dx} dt={spec.dt} fc={spec.fc}")
    if spec.noise_sigma < 0:
        raise SceneError(f"noise_sigma must be non-negative, got {spec.noise_sigma}")
    if not 0.0 < spec.box_threshold < 1.0:
        raise SceneError(f"box_threshold must lie in (0, 1), got {spec.box_threshold}")
    depths = [layer.top_depth for layer in spec.layers]
    if any(b <= a for a, b in zip(depths, depths[1:])):
        raise SceneError(f"layers must be sorted by increasing top_depth, got {depths}")
    if any(layer.epsilon_r < 1.0 for layer in spec.layers):
        raise SceneError("layer permittivity must be >= 1")
    window = spec.time_window
    for item in interfaces(spec):
        if item.time >= window:
            raise SceneError(f"interface at {item.depth} m reflects at {item.time:.2f} ns beyond the {window:.2f} ns window")
    width = spec.positions[-1]
    for index, defect in enumerate(spec.defects):
        where = f"defect {index} ({defect.kind})"
        if defect.extent <= 0 or defect.depth <= 0:
            raise SceneError(f"{where}: depth and extent must be positive")
        if defect.epsilon_inclusion < 1.0:
            raise SceneError(f"{where}: inclusion permittivity must be >= 1")
        if not 0.0 <= defect.x0 <= width:
            raise SceneError(f"{where}: x0={defect.x0} outside the {width:.3f} m profile")
        deepest = defect.depth
        if defect.kind == "crack":
            half = 0.5 * defect.extent * math.sin(math.radians(defect.dip_deg))
            if defect.depth - half <= 0:
                raise SceneError(f"{where}: crack reaches above the surface")
            deepest = defect.depth + half
        if defect.kind == "concave" and not interfaces(spec):
            raise SceneError(f"{where}: a concave defect needs a layer interface to deform")
        t_deep = 2.0 * deepest / velocity(host_epsilon(spec, deepest))
        if t_deep >= window:
            raise SceneError(f"{where}: two-way time {t_deep:.2f} ns exceeds the {window:.2f} ns window")


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------
def _event(spec: SceneSpec, tau: Field, amplitude: Field) -> Field:
    t = spec.times[:, None]
    return amplitude[None, :] * ricker_wavelet(spec.fc / 1000.0, t - tau[None, :])


def _nearest_interface(spec: SceneSpec, depth: float) -> int:
    found = interfaces(spec)
    return int(np.argmin([abs(item.depth - depth) for item in found]))


def _segment(defect: DefectSpec, x: Field) -> npt.NDArray[np.bool_]:
    half = 0.5 * defect.extent
    return (x >= defect.x0 - half) & (x <= defect.x0 + half)


def _cavity(defect: DefectSpec, spec: SceneSpec) -> Field:
    x = spec.positions
    eps = host_epsilon(spec, defect.depth)
    coeff = reflection_coeff(eps, defect.epsilon_inclusion) * defect.amplitude
    offset = np.maximum(np.abs(x - defect.x0) - 0.5 * defect.extent, 0.0)
    tau = hyperbola_trace(0.0, defect.depth, velocity(eps), offset)
    amp = coeff * _taper(defect.depth, offset, spec.beam_exponent)
    out = _event(spec, tau, amp)
    for k in range(1, defect.multiples + 1):
        out += _event(spec, (k + 1) * tau, amp * spec.echo_decay**k)
    return out


def _concave(defect: DefectSpec, spec: SceneSpec) -> Field:
    x = spec.positions
    horizon = interfaces(spec)[_nearest_interface(spec, defect.depth)]
    coeff = horizon.coeff * defect.amplitude
    v_below = velocity(horizon.eps_below)
    start = defect.x0 - 0.5 * defect.extent
    mask = _segment(defect, x)

    sag = horizon.depth + (defect.depth - horizon.depth) * np.sin(math.pi * (x - start) / defect.extent) ** 2
    tau = horizon.time + 2.0 * (sag - horizon.depth) / v_below
    amp = np.where(mask, spec.concave_boost * coeff, 0.0)
    out = _event(spec, tau, amp)
    for k in range(1, defect.multiples + 1):
        out += _event(spec, (k + 1) * tau, amp * spec.echo_decay**k)

    v_mean = 2.0 * horizon.depth / horizon.time
    for end in (start, start + defect.extent):
        offset = x - end
        tau_d = hyperbola_trace(end, horizon.depth, v_mean, x)
        out += _event(spec, tau_d, 0.5 * coeff * _taper(horizon.depth, offset, spec.beam_exponent))
    return out


def _crack(defect: DefectSpec, spec: SceneSpec) -> Field:
    x = spec.positions
    theta = math.radians(defect.dip_deg)
    half_x = 0.5 * defect.extent * math.cos(theta)
    half_z = 0.5 * defect.extent * math.sin(theta)
    eps = host_epsilon(spec, defect.depth)
    v = velocity(eps)
    coeff = reflection_coeff(eps, defect.epsilon_inclusion) * spec.crack_gain * defect.amplitude

    # steep segments span less than a trace; keep at least the column through x0
    reach = max(half_x, 0.5 * spec.dx)
    mask = np.abs(x - defect.x0) <= reach
    along = np.clip(x, defect.x0 - half_x, defect.x0 + half_x)
    z = defect.depth - half_z + (along - (defect.x0 - half_x)) * math.tan(theta) if half_x > 0 else np.full_like(x, defect.depth)
    out = _event(spec, 2.0 * z / v, np.where(mask, coeff, 0.0))

    for end_x, end_z in ((defect.x0 - half_x, defect.depth - half_z), (defect.x0 + half_x, defect.depth + half_z)):
        offset = x - end_x
        tau_d = hyperbola_trace(end_x, end_z, v, x)
        out += _event(spec, tau_d, 0.5 * coeff * _taper(end_z, offset, spec.beam_exponent))
    return out


RENDERERS = {"cavity": _cavity, "concave": _concave, "crack": _crack}


def defect_contribution(defect: DefectSpec, spec: SceneSpec) -> Field:
    """The noiseless field added by one defect on its own"""
    return RENDERERS[defect.kind](defect, spec)


def _layer_field(spec: SceneSpec) -> Field:
    out = np.zeros((spec.samples_per_trace, spec.traces))
    x = spec.positions
    found = interfaces(spec)
    suppressed = [np.zeros(spec.traces, dtype=bool) for _ in found]
    for defect in spec.defects:
        if defect.kind == "concave":
            suppressed[_nearest_interface(spec, defect.depth)] |= _segment(defect, x)
    for item, mask in zip(found, suppressed):
        amp = np.where(mask, 0.0, item.coeff)
        out += _event(spec, np.full(spec.traces, item.time), amp)
    return out


def _box_from_contribution(contribution: Field, threshold: float, where: str) -> BBox:
    magnitude = np.abs(contribution)
    peak = float(magnitude.max()) if magnitude.size else 0.0
    if peak <= 0.0:
        raise SceneError(f"{where}: rendered footprint is empty")
    rows, cols = np.nonzero(magnitude >= threshold * peak)
    return BBox.from_corners(float(cols.min()), float(rows.min()), float(cols.max() + 1), float(rows.max() + 1))


def derive_boxes(defect: DefectSpec, spec: SceneSpec, threshold: float | None = None) -> BBox:
    """Tight box around the defect's own pixels at or above ``threshold`` of its peak"""
    level = spec.box_threshold if threshold is None else threshold
    if not 0.0 < level < 1.0:
        raise ContractError(f"box threshold must lie in (0, 1), got {level}")
    return _box_from_contribution(defect_contribution(defect, spec), level, defect.kind)


def quantization_scale(field: Field, percentile: float = 99.0) -> float:
    """Symmetric amplitude window; zero maps to gray 128.

    Clamping at +-max(|p1|, |p99|) instead of windowing p1..p99 keeps zero
    amplitude on mid-gray, so background removal and the energy gradient
    see the same baseline in every image.
    """
    if not np.any(field):
        return 0.0
    lo, hi = np.percentile(field, [100.0 - percentile, percentile])
    scale = max(abs(float(lo)), abs(float(hi)))
    return scale if scale > 0 else float(np.abs(field).max())


def render_scene(spec: SceneSpec) -> Sample:
    validate_scene(spec)
    contributions = [defect_contribution(d, spec) for d in spec.defects]
    field = _layer_field(spec)
    for contribution in contributions:
        field = field + contribution

    scale = quantization_scale(field, spec.window_percentile)
    unit = scale if scale > 0 else 1.0
    noisy = field
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        noisy = field + rng.normal(0.0, spec.noise_sigma * unit / 127.0, size=field.shape)
    image = to_uint8(128.0 + 127.0 * noisy / unit)

    annotations = tuple(
        GroundTruth(_box_from_contribution(c, spec.box_threshold, d.kind), d.class_id)
        for d, c in zip(spec.defects, contributions)
    )
    return Sample(image, annotations, field)


def add_gaussian_noise(image: Gray, sigma: float, seed: int) -> Gray:
    """N(0, sigma^2) per pixel, clamped to [0, 255] and rounded"""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return image.copy()
    rng = np.random.default_rng(seed)
    return to_uint8(image.astype(np.float64) + rng.normal(0.0, sigma, size=image.shape))


def background_removal(image: npt.NDArray[Any], window_traces: int) -> Field:
    """Subtract a sliding mean along each row; the window keeps its length at the edges"""
    if window_traces < 1:
        raise ValueError(f"window_traces must be >= 1, got {window_traces}")
    data = np.asarray(image, dtype=np.float64)
    width = data.shape[1]
    span = min(window_traces, width)
    starts = np.clip(np.arange(width) - window_traces // 2, 0, width - span)
    csum = np.concatenate([np.zeros((data.shape[0], 1)), np.cumsum(data, axis=1)], axis=1)
    means = (csum[:, starts + span] - csum[:, starts]) / span
    return data - means


# ---------------------------------------------------------------------------
# generic shapes
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ShapesPrior:
    height: int = 96
    width: int = 96
    extra_shapes: tuple[int, int] = (0, 2)
    size_range: tuple[int, int] = (10, 32)
    clutter_sigma: float = 1.5
    clutter_amplitude: float = 0.25


def _shape_mask(kind: int, rng: np.random.Generator, prior: ShapesPrior) -> npt.NDArray[np.bool_]:
    h, w = prior.height, prior.width
    lo, hi = prior.size_range
    sw, sh = (int(v) for v in rng.integers(lo, hi + 1, size=2))
    left = int(rng.integers(0, w - sw + 1))
    top = int(rng.integers(0, h - sh + 1))
    yy, xx = np.mgrid[0:h, 0:w]
    match kind:
        case 0:
            return (xx >= left) & (xx < left + sw) & (yy >= top) & (yy < top + sh)
        case 1:
            cx, cy = left + sw / 2.0, top + sh / 2.0
            return ((xx + 0.5 - cx) / (sw / 2.0)) ** 2 + ((yy + 0.5 - cy) / (sh / 2.0)) ** 2 <= 1.0
        case _:
            mask = np.zeros((h, w), dtype=bool)
            steps = np.linspace(0.0, 1.0, 4 * max(sw, sh))
            descending = bool(rng.integers(0, 2))
            ys = top + (1.0 - steps if descending else steps) * (sh - 1)
            xs = left + steps * (sw - 1)
            for dy in (0, 1):
                mask[np.clip(np.rint(ys).astype(int) + dy, 0, h - 1), np.rint(xs).astype(int)] = True
            return mask


def render_shapes(class_id: int, seed: int, prior: ShapesPrior) -> tuple[Gray, tuple[GroundTruth, ...]]:
    """Rectangle / ellipse / line targets on smoothed clutter"""
    rng = np.random.default_rng(seed)
    clutter = gaussian_filter(rng.normal(size=(prior.height, prior.width)), prior.clutter_sigma)
    spread = float(np.abs(clutter).max()) or 1.0
    canvas = 0.5 + prior.clutter_amplitude * clutter / spread
    kinds = [class_id] + [int(k) for k in rng.integers(0, 3, size=int(rng.integers(prior.extra_shapes[0], prior.extra_shapes[1] + 1)))]
    labels: list[GroundTruth] = []
    for kind in kinds:
        mask = _shape_mask(kind, rng, prior)
        if not mask.any():
            continue
        level = float(rng.uniform(0.85, 1.0)) if rng.random() < 0.5 else float(rng.uniform(0.0, 0.15))
        canvas[mask] = level
        rows, cols = np.nonzero(mask)
        labels.append(GroundTruth(BBox.from_corners(float(cols.min()), float(rows.min()), float(cols.max() + 1), float(rows.max() + 1)), kind))
    return to_uint8(canvas * 255.0), tuple(labels)


# ---------------------------------------------------------------------------
# randomized scenes and dataset trees
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ScenePrior:
    """Ranges the dataset generator samples scenes from"""

    traces: int = 96
    samples_per_trace: int = 96
    dx: float = 0.02
    dt: float = 0.15
    fc: float = 1500.0
    host_eps: tuple[float, float] = (4.0, 9.0)
    interface_count: tuple[int, int] = (1, 2)
    interface_depth: tuple[float, float] = (0.12, 0.5)
    noise_sigma: tuple[float, float] = (2.0, 8.0)
    cavity_depth: tuple[float, float] = (0.15, 0.45)
    cavity_extent: tuple[float, float] = (0.04, 0.25)
    cavity_multiples: tuple[int, int] = (1, 3)
    concave_sag: tuple[float, float] = (0.04, 0.10)
    concave_extent: tuple[float, float] = (0.3, 0.7)
    crack_depth: tuple[float, float] = (0.2, 0.4)
    crack_extent: tuple[float, float] = (0.08, 0.2)
    crack_dip: tuple[float, float] = (30.0, 70.0)
    echo_decay: float = 0.5
    concave_boost: float = 1.5
    crack_gain: float = 2.0
    beam_exponent: float = 8.0
    box_threshold: float = 0.1


def random_scene(kind: DefectKind, seed: int, prior: ScenePrior, amplitude: float = 1.0) -> SceneSpec:
    """One defect of ``kind`` in a random layered host; a pure function of its arguments"""
    rng = np.random.default_rng(seed)
    host = float(rng.uniform(*prior.host_eps))
    count = int(rng.integers(prior.interface_count[0], prior.interface_count[1] + 1))
    depths = np.sort(rng.uniform(*prior.interface_depth, size=count))
    depths = depths[np.concatenate([[True], np.diff(depths) > 0.05])]
    layers = [MaterialLayer(0.0, host)]
    for depth in depths:
        previous = layers[-1].epsilon_r
        step = float(rng.uniform(1.5, 4.0)) * float(rng.choice([-1.0, 1.0]))
        eps = previous + step
        if not 3.0 <= eps <= 12.0:
            eps = previous - step
        layers.append(MaterialLayer(float(depth), eps))

    width = (prior.traces - 1) * prior.dx
    x0 = float(rng.uniform(0.3, 0.7) * width)
    match kind:
        case "cavity":
            defect = DefectSpec(
                "cavity", x0, float(rng.uniform(*prior.cavity_depth)), float(rng.uniform(*prior.cavity_extent)),
                epsilon_inclusion=1.0, multiples=int(rng.integers(prior.cavity_multiples[0], prior.cavity_multiples[1] + 1)),
                amplitude=amplitude,
            )
        case "concave":
            horizon = float(depths[int(rng.integers(0, len(depths)))])
            defect = DefectSpec(
                "concave", x0, horizon + float(rng.uniform(*prior.concave_sag)), float(rng.uniform(*prior.concave_extent)),
                multiples=int(rng.integers(0, 2)), amplitude=amplitude,
            )
        case _:
            defect = DefectSpec(
                "crack", x0, float(rng.uniform(*prior.crack_depth)), float(rng.uniform(*prior.crack_extent)),
                epsilon_inclusion=1.0, dip_deg=float(rng.uniform(*prior.crack_dip)), multiples=0, amplitude=amplitude,
            )
    return SceneSpec(
        layers=tuple(layers),
        defects=(defect,),
        traces=prior.traces,
        samples_per_trace=prior.samples_per_trace,
        dx=prior.dx,
        dt=prior.dt,
        fc=prior.fc,
        noise_sigma=float(rng.uniform(*prior.noise_sigma)),
        seed=int(rng.integers(0, 2**32)),
        echo_decay=prior.echo_decay,
        concave_boost=prior.concave_boost,
        crack_gain=prior.crack_gain,
        beam_exponent=prior.beam_exponent,
        box_threshold=prior.box_threshold,
    )


@dataclass(frozen=True)
class DatasetPlan:
    """Per-class counts for every split plus the generator settings"""

    train_counts: tuple[int, int, int] = (200, 200, 200)
    val_counts: tuple[int, int, int] = (67, 67, 66)
    test_counts: tuple[int, int, int] = (67, 67, 66)
    weak_test_counts: tuple[int, int, int] = (0, 0, 0)
    weak_amplitude: float = 0.35
    mode: Literal["gpr", "shapes"] = "gpr"
    seed: int = 7
    prior: ScenePrior = field(default_factory=ScenePrior)
    shapes: ShapesPrior = field(default_factory=ShapesPrior)

    def counts(self, split: str) -> tuple[int, int, int]:
        return {
            "train": self.train_counts,
            "val": self.val_counts,
            "test": self.test_counts,
            "test_weak": self.weak_test_counts,
        }[split]

    @property
    def class_names(self) -> tuple[str, ...]:
        return SHAPE_CLASS_NAMES if self.mode == "shapes" else CLASS_NAMES

    @property
    def image_size(self) -> tuple[int, int]:
        if self.mode == "shapes":
            return (self.shapes.height, self.shapes.width)
        return (self.prior.samples_per_trace, self.prior.traces)


@dataclass(frozen=True)
class SplitInfo:
    start: int
    stop: int
    counts: tuple[int, ...]


@dataclass
class DatasetManifest:
    root: Path
    splits: dict[str, SplitInfo]
    class_names: tuple[str, ...]
    image_size: tuple[int, int]
    mode: str
    seed: int
    config: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "mode": self.mode,
            "seed": self.seed,
            "class_names": list(self.class_names),
            "image_size": list(self.image_size),
            "splits": {
                name: {"start": s.start, "stop": s.stop, "counts": list(s.counts), "total": s.stop - s.start}
                for name, s in self.splits.items()
            },
            "config": self.config,
        }

    @classmethod
    def from_json(cls, root: Path, data: dict[str, Any]) -> DatasetManifest:
        splits = {
            name: SplitInfo(int(s["start"]), int(s["stop"]), tuple(int(c) for c in s["counts"]))
            for name, s in data["splits"].items()
        }
        return cls(
            root,
            splits,
            tuple(data["class_names"]),
            (int(data["image_size"][0]), int(data["image_size"][1])),
            str(data["mode"]),
            int(data["seed"]),
            dict(data.get("config", {})),
        )


@dataclass(eq=False)
class LabeledImage:
    index: int
    image: Gray
    annotations: tuple[GroundTruth, ...]


def sample_seed(seed: int, index: int) -> int:
    """Per-sample seed from the fixed (seed, index) splitting rule"""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _plan_entries(plan: DatasetPlan) -> tuple[dict[str, SplitInfo], list[tuple[int, str, int]]]:
    splits: dict[str, SplitInfo] = {}
    entries: list[tuple[int, str, int]] = []
    cursor = 0
    for split in SPLITS:
        counts = plan.counts(split)
        if split == "test_weak" and not any(counts):
            continue
        start = cursor
        for class_id, count in enumerate(counts):
            for _ in range(count):
                entries.append((cursor, split, class_id))
                cursor += 1
        splits[split] = SplitInfo(start, cursor, tuple(counts))
    return splits, entries


def render_entry(plan: DatasetPlan, index: int, split: str, class_id: int) -> tuple[Gray, tuple[GroundTruth, ...]]:
    seed = sample_seed(plan.seed, index)
    if plan.mode == "shapes":
        image, labels = render_shapes(class_id, seed, plan.shapes)
    else:
        amplitude = plan.weak_amplitude if split == "test_weak" else 1.0
        sample = render_scene(random_scene(CLASS_NAMES[class_id], seed, plan.prior, amplitude))
        image, labels = sample.image, sample.annotations
    return image, tuple(GroundTruth(gt.box, gt.class_id, index) for gt in labels)


def validate_plan(plan: DatasetPlan) -> None:
    for split in SPLITS:
        counts = plan.counts(split)
        if len(counts) != 3 or any(c < 0 for c in counts):
            raise ConfigError(f"{split} counts must be three non-negative integers, got {counts}")
    if not 0.0 < plan.weak_amplitude <= 1.0:
        raise ConfigError(f"weak_amplitude must lie in (0, 1], got {plan.weak_amplitude}")
    if plan.mode not in ("gpr", "shapes"):
        raise ConfigError(f"dataset mode must be 'gpr' or 'shapes', got {plan.mode!r}")


def check_dataset_target(root: Path) -> None:
    """Only an empty directory or an earlier dataset may be replaced"""
    if not root.exists():
        return
    if not root.is_dir():
        raise ConfigError(f"Dataset output {root} exists and is not a directory")
    if any(root.iterdir()) and not (root / "manifest.json").is_file():
        raise ConfigError(f"Dataset output {root} is not empty and holds no manifest.json; refusing to replace it")


@contextmanager
def staged_dataset(root: Path) -> Iterator[Path]:
    """Yield a hidden sibling directory that replaces ``root`` once the block completes"""
    check_dataset_target(root)
    staging = root.parent / f".{root.name}.staging"
    if staging.exists():
        shutil.rmtree(staging)
    (staging / "images").mkdir(parents=True)
    (staging / "labels").mkdir()
    try:
        yield staging
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    if root.exists():
        shutil.rmtree(root)
    staging.rename(root)


def generate_dataset(plan: DatasetPlan, out_dir: str | Path, threads: int = 1) -> DatasetManifest:
    """Write images, labels and manifest.json; the tree only appears once complete"""
    validate_plan(plan)
    root = Path(out_dir)
    splits, entries = _plan_entries(plan)
    height, width = plan.image_size

    with staged_dataset(root) as staging:
        rendered = parallel_map(lambda e: render_entry(plan, *e), entries, threads)
        for (index, split, _), (image, labels) in zip(entries, rendered):
            for gt in labels:
                if not gt.box.inside(width, height):
                    raise ContractError(f"sample {index} ({split}) has a box outside the image: {gt.box}")
            write_pgm(staging / "images" / f"{index:05d}.pgm", image)
            lines = "".join(json.dumps(gt.to_record()) + "\n" for gt in labels)
            (staging / "labels" / f"{index:05d}.json").write_text(lines, encoding="utf-8")

        manifest = DatasetManifest(root, splits, plan.class_names, plan.image_size, plan.mode, plan.seed, asdict(plan))
        text = json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n"
        (staging / "manifest.json").write_text(text, encoding="utf-8")
    logger.info("dataset written to %s (%d images)", root, len(entries))
    return manifest


def load_manifest(root: str | Path) -> DatasetManifest:
    base = Path(root)
    path = base / "manifest.json"
    if not path.is_file():
        raise MissingArtifactError([str(path)], "dataset")
    return DatasetManifest.from_json(base, json.loads(path.read_text(encoding="utf-8")))


def read_labels(path: Path, image_id: int) -> tuple[GroundTruth, ...]:
    lines = path.read_text(encoding="utf-8").splitlines()
    return tuple(GroundTruth.from_record(json.loads(line), image_id) for line in lines if line.strip())


def read_dataset(root: str | Path, split: str) -> list[LabeledImage]:
    manifest = load_manifest(root)
    if split not in manifest.splits:
        raise MissingArtifactError([f"{manifest.root / 'manifest.json'}#{split}"], "dataset split")
    info = manifest.splits[split]
    out: list[LabeledImage] = []
    missing: list[str] = []
    for index in range(info.start, info.stop):
        image_path = manifest.root / "images" / f"{index:05d}.pgm"
        label_path = manifest.root / "labels" / f"{index:05d}.json"
        absent = [str(p) for p in (image_path, label_path) if not p.is_file()]
        if absent:
            missing.extend(absent)
            continue
        out.append(LabeledImage(index, read_pgm(image_path), read_labels(label_path, index)))
    if missing:
        raise MissingArtifactError(missing, "dataset")
    return out


def write_split(root: Path, items: Sequence[LabeledImage]) -> None:
    """Write already-rendered images and labels under an existing dataset root"""
    for item in items:
        write_pgm(root / "images" / f"{item.index:05d}.pgm", item.image)
        lines = "".join(json.dumps(gt.to_record()) + "\n" for gt in item.annotations)
        (root / "labels" / f"{item.index:05d}.json").write_text(lines, encoding="utf-8")
