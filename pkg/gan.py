"""DCGAN generator and discriminator, smoothed-label losses, augmentation and
the per-class training loop used to enlarge the training split."""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt
from scipy import ndimage

import tensorcore as tc
from blocks import BatchNormSpec, Conv2dSpec, ParamStore, batch_norm, conv, init_batchnorm, init_conv
from boxes import BBox, GroundTruth
from checkpoint import Checkpoint, read_checkpoint, write_checkpoint
from errors import ConfigError, ContractError, DimensionError, NumericError
from imageio_pgm import Gray, from_unit_range, tile_grid, to_unit_range, write_pgm
from metrics import embed_features, energy_gradient, feature_stats, fid
from optim import Adam
from synthgpr import background_removal
from tensorcore import Array, Tensor

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

BASE_EXTENT = 4
LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class GanSpec:
    z_dim: int = 100
    image_size: int = 64
    base_channels: int = 16
    learning_rate: float = 1e-4
    betas: tuple[float, float] = (0.5, 0.999)
    real_label: float = 0.9
    fake_label: float = 0.1
    flip_prob: float = 0.5
    noise_sigma: float = 0.05
    seed: int = 0

    @property
    def depth(self) -> int:
        """Number of stride-2 layers between the 4x4 base and the image"""
        return int(round(math.log2(self.image_size / BASE_EXTENT)))

    def channels(self, level: int) -> int:
        """Channel count at ``level`` (0 = 4x4 base)"""
        return self.base_channels * 2 ** (self.depth - 1 - level)

    def validate(self, min_size: int = 32) -> None:
        size = self.image_size
        if size < min_size or size & (size - 1):
            raise ConfigError(f"GAN image_size must be a power of two >= {min_size}, got {size}")
        if self.z_dim < 1 or self.base_channels < 1:
            raise ConfigError("z_dim and base_channels must be positive")
        if not 0.0 < self.fake_label < self.real_label < 1.0:
            raise ConfigError(f"labels must satisfy 0 < fake < real < 1, got {self.fake_label}, {self.real_label}")
        if not 0.0 <= self.flip_prob <= 1.0 or self.noise_sigma < 0:
            raise ConfigError("flip_prob must lie in [0, 1] and noise_sigma must be non-negative")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> GanSpec:
        values = dict(data)
        values["betas"] = tuple(values["betas"])
        return cls(**values)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------
def build_generator(spec: GanSpec, seed: int, min_size: int = 32) -> ParamStore:
    spec.validate(min_size)
    store = ParamStore(seed)
    c0 = spec.channels(0)
    store.normal("gen.project.weight", (spec.z_dim, c0 * BASE_EXTENT * BASE_EXTENT), 0.02)
    init_batchnorm(store, "gen.project.bn", BatchNormSpec(c0))
    for level in range(1, spec.depth + 1):
        last = level == spec.depth
        cin = spec.channels(level - 1)
        cout = 1 if last else spec.channels(level)
        store.normal(f"gen.up{level}.weight", (cin, cout, 4, 4), 0.02)
        if last:
            store.zeros(f"gen.up{level}.bias", (cout,))
        else:
            init_batchnorm(store, f"gen.up{level}.bn", BatchNormSpec(cout))
    return store


def generator_forward(z: Tensor, params: Mapping[str, Tensor], spec: GanSpec, training: bool = True) -> Tensor:
    """(N, z_dim) latents to (N, 1, S, S) images in [-1, 1]"""
    if z.ndim != 2 or z.shape[1] != spec.z_dim:
        raise DimensionError(f"generator expects (N, {spec.z_dim}) latents, got {z.shape}")
    c0 = spec.channels(0)
    h = (z @ params["gen.project.weight"]).reshape(z.shape[0], c0, BASE_EXTENT, BASE_EXTENT)
    h = tc.relu(batch_norm(h, params, "gen.project.bn", BatchNormSpec(c0), training))
    for level in range(1, spec.depth + 1):
        bias = params.get(f"gen.up{level}.bias")
        h = tc.conv_transpose2d(h, params[f"gen.up{level}.weight"], bias, stride=2, pad=1)
        if level == spec.depth:
            return tc.tanh(h)
        h = tc.relu(batch_norm(h, params, f"gen.up{level}.bn", BatchNormSpec(spec.channels(level)), training))
    raise ConfigError("generator has no upsampling layers")


def _disc_layers(spec: GanSpec) -> list[Conv2dSpec]:
    layers = []
    cin = 1
    for level in range(spec.depth):
        cout = spec.base_channels * 2**level
        layers.append(Conv2dSpec(cin, cout, 4, stride=2, pad=1, bias=level == 0))
        cin = cout
    return layers


def build_discriminator(spec: GanSpec, seed: int, min_size: int = 32) -> ParamStore:
    spec.validate(min_size)
    store = ParamStore(seed)
    layers = _disc_layers(spec)
    for level, layer in enumerate(layers):
        init_conv(store, f"disc.conv{level}", layer, std=0.02)
        if level > 0:
            init_batchnorm(store, f"disc.conv{level}.bn", BatchNormSpec(layer.out_channels))
    store.normal("disc.out.weight", (layers[-1].out_channels, 1), 0.02)
    store.zeros("disc.out.bias", (1,))
    return store


def discriminator_forward(images: Tensor, params: Mapping[str, Tensor], spec: GanSpec, training: bool = True) -> Tensor:
    """(N, 1, S, S) images to N logits; global average pooling replaces dense layers"""
    size = spec.image_size
    if images.ndim != 4 or images.shape[1:] != (1, size, size):
        raise DimensionError(f"discriminator expects (N, 1, {size}, {size}), got {images.shape}")
    h = images
    for level, layer in enumerate(_disc_layers(spec)):
        h = conv(h, params, f"disc.conv{level}", layer)
        if level > 0:
            h = batch_norm(h, params, f"disc.conv{level}.bn", BatchNormSpec(layer.out_channels), training)
        h = tc.leaky_relu(h, LEAKY_SLOPE)
    pooled = h.mean((2, 3))
    return (pooled @ params["disc.out.weight"] + params["disc.out.bias"]).reshape(images.shape[0])


def gan_losses(d_real: Tensor, d_fake: Tensor, spec: GanSpec) -> tuple[Tensor, Tensor]:
    """Smoothed-label discriminator loss and the non-saturating generator loss"""
    d_loss = tc.bce_with_logits(d_real, spec.real_label).mean() + tc.bce_with_logits(d_fake, spec.fake_label).mean()
    g_loss = tc.bce_with_logits(d_fake, 1.0).mean()
    return d_loss, g_loss


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class AugmentDraw:
    flips: npt.NDArray[np.bool_]
    noise: Array


def draw_augmentation(shape: tuple[int, ...], rng: np.random.Generator, flip_prob: float, noise_sigma: float) -> AugmentDraw:
    flips = rng.random(shape[0]) < flip_prob
    noise = rng.normal(0.0, noise_sigma, size=shape) if noise_sigma > 0 else np.zeros(shape)
    return AugmentDraw(flips, noise)


def apply_augmentation(x: Tensor, draw: AugmentDraw) -> Tensor:
    """Mirror the selected images along the last axis and add the drawn noise"""
    mask = draw.flips.reshape((-1,) + (1,) * (x.ndim - 1))
    return tc.where(np.broadcast_to(mask, x.shape), tc.flip(x, x.ndim - 1), x) + draw.noise


def augment_batch(images: npt.ArrayLike, rng: np.random.Generator, flip_prob: float = 0.5, noise_sigma: float = 0.05) -> Array:
    """Random horizontal mirror plus Gaussian noise per image; not re-clamped"""
    batch = np.asarray(images, dtype=np.float64)
    draw = draw_augmentation(batch.shape, rng, flip_prob, noise_sigma)
    return apply_augmentation(Tensor(batch), draw).data


# ---------------------------------------------------------------------------
# training state
# ---------------------------------------------------------------------------
@dataclass
class TrainState:
    class_id: int
    generator: ParamStore
    discriminator: ParamStore
    opt_g: Adam
    opt_d: Adam
    rng: np.random.Generator
    step: int = 0


def _seed(spec: GanSpec, class_id: int, stream: int) -> int:
    return int(np.random.SeedSequence([spec.seed, class_id, stream]).generate_state(1)[0])


def init_state(spec: GanSpec, class_id: int, min_size: int = 32) -> TrainState:
    return TrainState(
        class_id,
        build_generator(spec, _seed(spec, class_id, 0), min_size),
        build_discriminator(spec, _seed(spec, class_id, 1), min_size),
        Adam(lr=spec.learning_rate, betas=spec.betas),
        Adam(lr=spec.learning_rate, betas=spec.betas),
        np.random.default_rng(_seed(spec, class_id, 2)),
    )


def train_step(state: TrainState, real: Array, spec: GanSpec, batch_size: int) -> tuple[float, float]:
    """One discriminator update then one generator update on a class pool"""
    rng = state.rng
    picks = rng.choice(len(real), size=batch_size, replace=len(real) < batch_size)
    real_batch = Tensor(real[picks][:, None, :, :])
    z = Tensor(rng.standard_normal((batch_size, spec.z_dim)))
    real_draw = draw_augmentation(real_batch.shape, rng, spec.flip_prob, spec.noise_sigma)
    fake_draw = draw_augmentation(real_batch.shape, rng, spec.flip_prob, spec.noise_sigma)

    fake = generator_forward(z, state.generator, spec, training=True)
    d_real = discriminator_forward(apply_augmentation(real_batch, real_draw), state.discriminator, spec)
    d_fake = discriminator_forward(apply_augmentation(fake.detach(), fake_draw), state.discriminator, spec)
    d_loss, _ = gan_losses(d_real, d_fake, spec)
    state.opt_d.step(state.discriminator, tc.backward(d_loss))

    d_fake = discriminator_forward(apply_augmentation(fake, fake_draw), state.discriminator, spec)
    _, g_loss = gan_losses(d_real.detach(), d_fake, spec)
    grads = tc.backward(g_loss)
    state.opt_g.step(state.generator, {k: v for k, v in grads.items() if k.startswith("gen.")})
    state.step += 1
    return d_loss.item(), g_loss.item()


def snapshot(states: Mapping[int, TrainState], spec: GanSpec) -> Checkpoint:
    """All per-class states as one checkpoint; resuming from it reproduces later steps"""
    arrays: dict[str, Array] = {}
    meta: dict[str, Any] = {"kind": "gan", "spec": asdict(spec), "classes": {}}
    for class_id, state in sorted(states.items()):
        prefix = f"class{class_id}"
        arrays.update({f"{prefix}.{k}": v for k, v in state.generator.state().items()})
        arrays.update({f"{prefix}.{k}": v for k, v in state.discriminator.state().items()})
        arrays.update(state.opt_g.state(f"{prefix}.opt_g"))
        arrays.update(state.opt_d.state(f"{prefix}.opt_d"))
        meta["classes"][str(class_id)] = {
            "step": state.step,
            "opt_steps": [state.opt_g.step_count, state.opt_d.step_count],
            "seeds": [state.generator.seed, state.discriminator.seed],
            "rng": state.rng.bit_generator.state,
        }
    meta["step"] = max((s.step for s in states.values()), default=0)
    return Checkpoint(arrays, meta)


def restore(ckpt: Checkpoint, min_size: int = 32) -> tuple[GanSpec, dict[int, TrainState]]:
    if ckpt.meta.get("kind") != "gan":
        raise ContractError(f"not a GAN checkpoint (kind={ckpt.meta.get('kind')!r})")
    spec = GanSpec.from_dict(ckpt.meta["spec"])
    states: dict[int, TrainState] = {}
    for key, info in ckpt.meta["classes"].items():
        class_id = int(key)
        state = init_state(spec, class_id, min_size)
        prefix = f"class{class_id}"
        arrays = ckpt.subset(prefix)
        state.generator.load_state(arrays)
        state.discriminator.load_state(arrays)
        state.opt_g.load_state(arrays, "opt_g", int(info["opt_steps"][0]))
        state.opt_d.load_state(arrays, "opt_d", int(info["opt_steps"][1]))
        state.rng.bit_generator.state = info["rng"]
        state.step = int(info["step"])
        states[class_id] = state
    return spec, states


def save_gan(path: str | Path, states: Mapping[int, TrainState], spec: GanSpec) -> Path:
    ckpt = snapshot(states, spec)
    return write_checkpoint(path, ckpt.arrays, ckpt.meta)


def load_gan(path: str | Path, min_size: int = 32) -> tuple[GanSpec, dict[int, TrainState]]:
    return restore(read_checkpoint(path), min_size)


# ---------------------------------------------------------------------------
# sampling, resolution bridge and auto-labels
# ---------------------------------------------------------------------------
def resize_stack(images: npt.ArrayLike, size: tuple[int, int]) -> Array:
    """Linear resampling of an (N, H, W) stack to (N, *size)"""
    stack = np.asarray(images, dtype=np.float64)
    if stack.shape[1:] == size:
        return stack.copy()
    factors = (1.0, size[0] / stack.shape[1], size[1] / stack.shape[2])
    out = ndimage.zoom(stack, factors, order=1)
    if out.shape[1:] != size:
        raise DimensionError(f"resampling {stack.shape[1:]} to {size} produced {out.shape[1:]}")
    return out


def generate(state: TrainState, spec: GanSpec, count: int, seed: int, batch_size: int = 64) -> Array:
    """``count`` images in [-1, 1] from fixed-seed latents; leaves the state untouched"""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((count, spec.z_dim))
    chunks = [
        generator_forward(Tensor(z[i : i + batch_size]), state.generator, spec, training=False).data[:, 0]
        for i in range(0, count, batch_size)
    ]
    return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, spec.image_size, spec.image_size))


def auto_label(image: Gray, class_id: int, fraction: float = 0.5, image_id: int = 0) -> GroundTruth | None:
    """Box the strongest connected response left after full-row background removal"""
    if not 0.0 < fraction < 1.0:
        raise ContractError(f"auto_box_fraction must lie in (0, 1), got {fraction}")
    residual = np.abs(background_removal(image, image.shape[1]))
    level = float(np.percentile(residual, 99.5))
    if level <= 0:
        return None
    labels, count = ndimage.label(residual >= fraction * level)
    if count == 0:
        return None
    weights = ndimage.sum(residual, labels, index=np.arange(1, count + 1))
    rows, cols = ndimage.find_objects(labels)[int(np.argmax(weights))]
    box = BBox.from_corners(cols.start, rows.start, cols.stop, rows.stop)
    return GroundTruth(box, class_id, image_id)


def synthesize(
    state: TrainState, spec: GanSpec, count: int, seed: int, out_size: tuple[int, int], fraction: float = 0.5
) -> list[tuple[Gray, GroundTruth]]:
    """Generated images at dataset resolution with automatic boxes; unlabelable samples are skipped"""
    gray = from_unit_range(resize_stack(generate(state, spec, count, seed), out_size))
    out: list[tuple[Gray, GroundTruth]] = []
    for image in gray:
        gt = auto_label(image, state.class_id, fraction)
        if gt is None:
            logger.warning("class %d: generated sample without a detectable response skipped", state.class_id)
            continue
        out.append((image, gt))
    return out


def balance_counts(real_counts: Mapping[int, int], target: int) -> dict[int, int]:
    """Generated images needed per class to lift every class to ``target``"""
    return {k: max(0, target - n) for k, n in real_counts.items()}


def write_sample_grid(path: str | Path, state: TrainState, spec: GanSpec, count: int = 16, seed: int = 0) -> Path:
    images = from_unit_range(generate(state, spec, count, seed))
    return write_pgm(path, tile_grid(list(images)))


# ---------------------------------------------------------------------------
# quality tracking and the training loop
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class CurveRow:
    step: int
    fid: float
    energy_real: float
    energy_gen: float


CURVE_HEADER = ("step", "fid", "energy_real", "energy_gen")


def write_fid_curve(path: str | Path, rows: Sequence[CurveRow]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(CURVE_HEADER)
        writer.writerows([r.step, repr(r.fid), repr(r.energy_real), repr(r.energy_gen)] for r in rows)
    return target


def read_fid_curve(path: str | Path) -> list[CurveRow]:
    with Path(path).open(newline="", encoding="utf-8") as handle:
        return [
            CurveRow(int(r["step"]), float(r["fid"]), float(r["energy_real"]), float(r["energy_gen"]))
            for r in csv.DictReader(handle)
        ]


@dataclass(frozen=True)
class GanSettings:
    steps: int = 2000
    batch_size: int = 32
    checkpoint_interval: int = 100
    eval_samples: int = 200
    embedder: str = "frozen"
    grid_samples: int = 16


def stratified_counts(total: int, classes: Sequence[int]) -> dict[int, int]:
    share, extra = divmod(total, len(classes))
    return {k: share + (1 if i < extra else 0) for i, k in enumerate(sorted(classes))}


def evaluate_quality(
    states: Mapping[int, TrainState], pools: Mapping[int, Array], spec: GanSpec, settings: GanSettings
) -> CurveRow:
    """FID and mean energy gradient of a stratified real sample against generated images"""
    counts = stratified_counts(settings.eval_samples, list(states))
    pick = np.random.default_rng(_seed(spec, 0, 99))
    real, fake = [], []
    for class_id in sorted(states):
        pool = pools[class_id]
        n = min(counts[class_id], len(pool))
        real.append(pool[np.sort(pick.choice(len(pool), size=n, replace=False))])
        fake.append(generate(states[class_id], spec, n, _seed(spec, class_id, 98)))
    real_set, fake_set = np.concatenate(real), np.concatenate(fake)
    embedder: Any = settings.embedder
    score = fid(feature_stats(embed_features(real_set, embedder)), feature_stats(embed_features(fake_set, embedder)))
    energy_real = float(np.mean([energy_gradient(im) for im in from_unit_range(real_set).astype(np.float64)]))
    energy_gen = float(np.mean([energy_gradient(im) for im in from_unit_range(fake_set).astype(np.float64)]))
    step = max((s.step for s in states.values()), default=0)
    return CurveRow(step, score, energy_real, energy_gen)


def train_gan(
    pools: Mapping[int, Array],
    spec: GanSpec,
    settings: GanSettings,
    on_checkpoint: Callable[[int, dict[int, TrainState]], None] | None = None,
    states: dict[int, TrainState] | None = None,
) -> list[Checkpoint]:
    """Train one DCGAN per class in lockstep.

    ``pools`` maps class id to an (M, S, S) stack in [-1, 1]. A checkpoint
    is taken at the starting step, every ``checkpoint_interval`` steps and
    at the last step; ``on_checkpoint`` sees each one before training
    continues.
    """
    spec.validate()
    if not pools or any(len(p) == 0 for p in pools.values()):
        raise ContractError("every class pool needs at least one image")
    for class_id, pool in pools.items():
        if pool.shape[1:] != (spec.image_size, spec.image_size):
            raise DimensionError(f"class {class_id} pool has images {pool.shape[1:]}, GAN expects {spec.image_size}")
    states = states if states is not None else {k: init_state(spec, k) for k in sorted(pools)}
    start = max((s.step for s in states.values()), default=0)
    checkpoints: list[Checkpoint] = []

    def emit() -> None:
        checkpoints.append(snapshot(states, spec))
        if on_checkpoint is not None:
            on_checkpoint(checkpoints[-1].meta["step"], states)

    emit()
    for step in range(start + 1, settings.steps + 1):
        for class_id in sorted(states):
            try:
                d_loss, g_loss = train_step(states[class_id], pools[class_id], spec, settings.batch_size)
            except NumericError as exc:
                raise NumericError(f"GAN class {class_id} diverged at step {step}: {exc}") from exc
            if not (math.isfinite(d_loss) and math.isfinite(g_loss)):
                raise NumericError(f"GAN class {class_id} produced a non-finite loss at step {step}")
            logger.debug("class %d step %d d_loss %.4f g_loss %.4f", class_id, step, d_loss, g_loss)
        if step % settings.checkpoint_interval == 0 or step == settings.steps:
            logger.info("GAN checkpoint at step %d", step)
            emit()
    return checkpoints


def class_pools(items: Sequence[Any], size: int, num_classes: int) -> dict[int, Array]:
    """Group dataset items by their first annotation's class and resample to the GAN resolution"""
    grouped: dict[int, list[Gray]] = {k: [] for k in range(num_classes)}
    for item in items:
        if item.annotations:
            grouped[item.annotations[0].class_id].append(item.image)
    pools: dict[int, Array] = {}
    for class_id, images in grouped.items():
        if not images:
            logger.warning("class %d has no training images, no GAN is trained for it", class_id)
            continue
        pools[class_id] = resize_stack(to_unit_range(np.stack(images)), (size, size))
    return pools
