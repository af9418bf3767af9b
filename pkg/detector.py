"""Single-stage grid detector with GAM in the backbone and MCFF in the neck"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt
from scipy.special import expit, logit

import tensorcore as tc
from blocks import (
    BatchNormSpec,
    Conv2dSpec,
    GamSpec,
    McffSpec,
    ParamStore,
    batch_norm,
    conv,
    gam_forward,
    init_batchnorm,
    init_conv,
    init_gam,
    init_mcff,
    mcff_layer,
)
from boxes import BBox, Detection, GroundTruth, iou
from checkpoint import read_checkpoint, write_checkpoint
from errors import ConfigError, ContractError, DimensionError, NumericError
from imageio_pgm import to_unit_range
from metrics import MetricsReport, evaluate_detections
from optim import Adam, cosine_lr
from tensorcore import Array, Tensor

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

CIOU_EPS = 1e-9
ENCODE_CLIP = 1e-9


@dataclass(frozen=True)
class DetectorSpec:
    input_size: tuple[int, int] = (96, 96)
    stage_channels: tuple[int, ...] = (8, 16, 32)
    stride: int = 8
    num_classes: int = 3
    gam_stage: int | None = 1
    mcff_in_neck: bool = True
    gam_in_neck: bool = False
    neck_channels: int = 32
    gam_reduction: int = 4
    gam_kernel: int = 7
    mcff_init_std: float = 0.02
    score_threshold: float = 0.25
    nms_iou_threshold: float = 0.5
    box_weight: float = 5.0

    @property
    def grid(self) -> tuple[int, int]:
        return (self.input_size[0] // self.stride, self.input_size[1] // self.stride)

    @property
    def neck_resolution(self) -> tuple[int, int]:
        return (self.input_size[0] * 2 // self.stride, self.input_size[1] * 2 // self.stride)

    def validate(self) -> None:
        stages = len(self.stage_channels)
        if stages < 2:
            raise ConfigError(f"detector needs at least two backbone stages, got {stages}")
        if any(c < 1 for c in self.stage_channels) or self.neck_channels < 1 or self.num_classes < 1:
            raise ConfigError("channel counts and num_classes must be positive")
        if self.stride != 2**stages:
            raise ConfigError(f"stride {self.stride} must equal 2**{stages} for {stages} stride-2 stages")
        h, w = self.input_size
        if h % self.stride or w % self.stride:
            raise ConfigError(f"input size {self.input_size} is not divisible by stride {self.stride}")
        if self.gam_stage is not None:
            if not 1 <= self.gam_stage <= stages:
                raise ConfigError(f"gam_stage must be in 1..{stages} or None, got {self.gam_stage}")
            self.gam_spec(self.stage_channels[self.gam_stage - 1]).validate()
        if self.gam_in_neck:
            self.gam_spec(self.neck_channels).validate()
        if not 0.0 <= self.score_threshold <= 1.0 or not 0.0 < self.nms_iou_threshold <= 1.0:
            raise ConfigError("score_threshold must lie in [0, 1] and nms_iou_threshold in (0, 1]")
        if self.box_weight < 0:
            raise ConfigError(f"box_weight must be non-negative, got {self.box_weight}")

    def gam_spec(self, channels: int) -> GamSpec:
        return GamSpec(channels, self.gam_reduction, self.gam_kernel)

    def mcff_spec(self) -> McffSpec:
        rows, cols = self.neck_resolution
        return McffSpec((self.neck_channels, rows, cols), residual=True, init_std=self.mcff_init_std)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> DetectorSpec:
        values = dict(data)
        values["input_size"] = tuple(values["input_size"])
        values["stage_channels"] = tuple(values["stage_channels"])
        return cls(**values)


@dataclass(frozen=True)
class DetectorModel:
    """Structural description of a built detector; parameters live in a ParamStore"""

    spec: DetectorSpec
    stages: tuple[tuple[Conv2dSpec, Conv2dSpec], ...]
    fuse: Conv2dSpec
    down: Conv2dSpec
    head: Conv2dSpec


def _cbs_init(store: ParamStore, prefix: str, layer: Conv2dSpec) -> None:
    init_conv(store, prefix, layer)
    init_batchnorm(store, f"{prefix}.bn", BatchNormSpec(layer.out_channels))


def _cbs(x: Tensor, params: Mapping[str, Tensor], prefix: str, layer: Conv2dSpec, training: bool) -> Tensor:
    """conv, batch norm, SiLU"""
    y = conv(x, params, prefix, layer)
    return tc.silu(batch_norm(y, params, f"{prefix}.bn", BatchNormSpec(layer.out_channels), training))


def build_detector(spec: DetectorSpec, seed: int = 0) -> tuple[DetectorModel, ParamStore]:
    spec.validate()
    store = ParamStore(seed)
    stages = []
    in_ch = 1
    for index, ch in enumerate(spec.stage_channels, start=1):
        down = Conv2dSpec(in_ch, ch, 3, stride=2, pad=1, bias=False)
        refine = Conv2dSpec(ch, ch, 3, stride=1, pad=1, bias=False)
        _cbs_init(store, f"backbone.stage{index}.down", down)
        _cbs_init(store, f"backbone.stage{index}.conv", refine)
        if spec.gam_stage == index:
            init_gam(store, "backbone.gam", spec.gam_spec(ch))
        stages.append((down, refine))
        in_ch = ch

    fused_in = spec.stage_channels[-1] + spec.stage_channels[-2]
    fuse = Conv2dSpec(fused_in, spec.neck_channels, 1, bias=False)
    _cbs_init(store, "neck.fuse", fuse)
    if spec.mcff_in_neck:
        init_mcff(store, "neck.mcff", spec.mcff_spec())
    if spec.gam_in_neck:
        init_gam(store, "neck.gam", spec.gam_spec(spec.neck_channels))
    down = Conv2dSpec(spec.neck_channels, spec.neck_channels, 3, stride=2, pad=1, bias=False)
    _cbs_init(store, "neck.down", down)
    head = Conv2dSpec(spec.neck_channels, spec.num_classes + 4, 1)
    init_conv(store, "head", head, std=0.01)
    # start class logits at a low prior so early losses are not dominated by negatives
    store["head.bias"].data[: spec.num_classes] = -math.log((1 - 0.01) / 0.01)

    model = DetectorModel(spec, tuple(stages), fuse, down, head)
    logger.debug("built detector with %d parameters", store.num_parameters())
    return model, store


def detector_forward(x: Tensor, model: DetectorModel, params: Mapping[str, Tensor], training: bool = False) -> Tensor:
    """(N, 1, H, W) images to (N, K+4, H/stride, W/stride) head output"""
    spec = model.spec
    if x.ndim != 4 or x.shape[1] != 1 or tuple(x.shape[2:]) != spec.input_size:
        raise DimensionError(f"detector expects (N, 1, {spec.input_size[0]}, {spec.input_size[1]}), got {x.shape}")
    features: list[Tensor] = []
    h = x
    for index, (down, refine) in enumerate(model.stages, start=1):
        h = _cbs(h, params, f"backbone.stage{index}.down", down, training)
        h = _cbs(h, params, f"backbone.stage{index}.conv", refine, training)
        if spec.gam_stage == index:
            h = gam_forward(h, params, "backbone.gam", spec.gam_spec(down.out_channels), training)
        features.append(h)

    fused = tc.concatenate([tc.upsample_nearest(features[-1], 2), features[-2]], axis=1)
    n = _cbs(fused, params, "neck.fuse", model.fuse, training)
    if spec.mcff_in_neck:
        n = mcff_layer(n, params, "neck.mcff", spec.mcff_spec())
    if spec.gam_in_neck:
        n = gam_forward(n, params, "neck.gam", spec.gam_spec(spec.neck_channels), training)
    n = _cbs(n, params, "neck.down", model.down, training)
    return conv(n, params, "head", model.head)


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------
@dataclass
class Targets:
    """Batched per-cell targets; ``boxes`` holds (n, row, col, BBox) for each positive cell"""

    classes: Array
    positive: npt.NDArray[np.bool_]
    boxes: list[tuple[int, int, int, BBox]] = field(default_factory=list)

    @property
    def num_positive(self) -> int:
        return len(self.boxes)


def cell_of(box: BBox, spec: DetectorSpec) -> tuple[int, int]:
    rows, cols = spec.grid
    row = min(max(int(math.floor(box.cy / spec.stride)), 0), rows - 1)
    col = min(max(int(math.floor(box.cx / spec.stride)), 0), cols - 1)
    return row, col


def assign_targets(gts: Sequence[GroundTruth], spec: DetectorSpec) -> Targets:
    """One positive cell per GT center; a contested cell goes to the larger box"""
    rows, cols = spec.grid
    owner: dict[tuple[int, int], GroundTruth] = {}
    for gt in gts:
        cell = cell_of(gt.box, spec)
        current = owner.get(cell)
        if current is None or gt.box.area > current.box.area:
            owner[cell] = gt
    classes = np.zeros((1, spec.num_classes, rows, cols))
    positive = np.zeros((1, rows, cols), dtype=bool)
    boxes: list[tuple[int, int, int, BBox]] = []
    for (row, col), gt in sorted(owner.items()):
        classes[0, gt.class_id, row, col] = 1.0
        positive[0, row, col] = True
        boxes.append((0, row, col, gt.box))
    return Targets(classes, positive, boxes)


def stack_targets(items: Sequence[Targets]) -> Targets:
    boxes = [(n, r, c, b) for n, t in enumerate(items) for (_, r, c, b) in t.boxes]
    return Targets(
        np.concatenate([t.classes for t in items], axis=0),
        np.concatenate([t.positive for t in items], axis=0),
        boxes,
    )


def encode_box(box: BBox, cell: tuple[int, int], stride: int) -> tuple[float, float, float, float]:
    """Raw head terms that decode to ``box`` at ``cell``"""
    row, col = cell
    fx = min(max(box.cx / stride - col, ENCODE_CLIP), 1.0 - ENCODE_CLIP)
    fy = min(max(box.cy / stride - row, ENCODE_CLIP), 1.0 - ENCODE_CLIP)
    return float(logit(fx)), float(logit(fy)), math.log(box.w / stride), math.log(box.h / stride)


def decode_box(terms: Sequence[float], cell: tuple[int, int], stride: int) -> BBox:
    row, col = cell
    tx, ty, tw, th = terms
    return BBox(
        (col + float(expit(tx))) * stride,
        (row + float(expit(ty))) * stride,
        math.exp(tw) * stride,
        math.exp(th) * stride,
    )


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------
@dataclass
class LossParts:
    box: Tensor
    cls: Tensor
    total: Tensor


def ciou_loss_terms(pred: Tensor, target: Array) -> Tensor:
    """1 - complete IoU for (P, 4) center-form boxes; ``target`` is constant"""
    pcx, pcy, pw, ph = (pred[:, i] for i in range(4))
    tcx, tcy, tw, th = (target[:, i] for i in range(4))
    px1, px2 = pcx - pw * 0.5, pcx + pw * 0.5
    py1, py2 = pcy - ph * 0.5, pcy + ph * 0.5
    tx1, tx2 = tcx - tw * 0.5, tcx + tw * 0.5
    ty1, ty2 = tcy - th * 0.5, tcy + th * 0.5

    inter_w = tc.relu(tc.minimum(px2, tx2) - tc.maximum(px1, tx1))
    inter_h = tc.relu(tc.minimum(py2, ty2) - tc.maximum(py1, ty1))
    inter = inter_w * inter_h
    union = pw * ph + tw * th - inter
    union = union + np.where(union.data == 0.0, CIOU_EPS, 0.0)
    overlap = inter / union

    enclose_w = tc.maximum(px2, tx2) - tc.minimum(px1, tx1)
    enclose_h = tc.maximum(py2, ty2) - tc.minimum(py1, ty1)
    diagonal = enclose_w * enclose_w + enclose_h * enclose_h + CIOU_EPS
    dx, dy = pcx - tcx, pcy - tcy
    centers = (dx * dx + dy * dy) / diagonal

    shape_gap = tc.arctan(pw / ph) - np.arctan(tw / th)
    v = shape_gap * shape_gap * (4.0 / math.pi**2)
    alpha = v / (1.0 - overlap + v + CIOU_EPS)
    return 1.0 - (overlap - centers - alpha * v)


def detection_loss(pred: Tensor, targets: Targets, spec: DetectorSpec) -> LossParts:
    k = spec.num_classes
    if pred.ndim != 4 or pred.shape[1] != k + 4 or tuple(pred.shape[2:]) != spec.grid:
        raise DimensionError(f"head output {pred.shape} does not match (N, {k + 4}, {spec.grid[0]}, {spec.grid[1]})")
    if targets.classes.shape != (pred.shape[0], k, *spec.grid):
        raise DimensionError(f"targets {targets.classes.shape} do not match predictions {pred.shape}")
    cls_loss = tc.bce_with_logits(pred[:, :k], targets.classes).mean()

    if not targets.boxes:
        box_loss = Tensor(0.0)
    else:
        n_idx = np.array([b[0] for b in targets.boxes])
        r_idx = np.array([b[1] for b in targets.boxes])
        c_idx = np.array([b[2] for b in targets.boxes])
        raw = pred[n_idx, k:, r_idx, c_idx]
        s = float(spec.stride)
        cx = (tc.sigmoid(raw[:, 0]) + c_idx.astype(np.float64)) * s
        cy = (tc.sigmoid(raw[:, 1]) + r_idx.astype(np.float64)) * s
        w = tc.exp(raw[:, 2]) * s
        h = tc.exp(raw[:, 3]) * s
        decoded = tc.concatenate([t.reshape(-1, 1) for t in (cx, cy, w, h)], axis=1)
        target = np.array([[b[3].cx, b[3].cy, b[3].w, b[3].h] for b in targets.boxes])
        box_loss = ciou_loss_terms(decoded, target).mean()
    return LossParts(box_loss, cls_loss, cls_loss + box_loss * spec.box_weight)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------
def decode_predictions(head: Array, spec: DetectorSpec, image_id: int = 0) -> list[Detection]:
    """Per-cell best class above the score threshold, boxes clamped to the image"""
    k = spec.num_classes
    if head.shape != (k + 4, *spec.grid):
        raise DimensionError(f"head output {head.shape} does not match ({k + 4}, {spec.grid[0]}, {spec.grid[1]})")
    scores = expit(head[:k])
    best = scores.max(axis=0)
    label = scores.argmax(axis=0)
    height, width = spec.input_size
    out: list[Detection] = []
    for row, col in zip(*np.nonzero(best >= spec.score_threshold)):
        box = decode_box(head[k:, row, col], (int(row), int(col)), spec.stride).clamp(width, height)
        out.append(Detection(box, int(label[row, col]), float(best[row, col]), image_id))
    return out


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy class-wise suppression; survivors ordered by (score desc, input index)"""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[Detection] = []
    for i in order:
        candidate = dets[i]
        if all(
            other.class_id != candidate.class_id or iou(other.box, candidate.box) < iou_threshold for other in kept
        ):
            kept.append(candidate)
    return kept


def images_to_batch(images: Sequence[npt.NDArray[Any]] | npt.NDArray[Any]) -> Tensor:
    stack = np.stack([to_unit_range(im) for im in images])
    return Tensor(stack[:, None, :, :])


def predict(
    images: Sequence[npt.NDArray[Any]],
    model: DetectorModel,
    params: Mapping[str, Tensor],
    batch_size: int = 32,
) -> list[list[Detection]]:
    """Forward, decode and NMS for 8-bit images; evaluation-mode batch norm"""
    out: list[list[Detection]] = []
    for start in range(0, len(images), batch_size):
        batch = images_to_batch(images[start : start + batch_size])
        head = detector_forward(batch, model, params, training=False).data
        for offset, grid in enumerate(head):
            dets = decode_predictions(grid, model.spec, start + offset)
            out.append(nms(dets, model.spec.nms_iou_threshold))
    return out


def evaluate(
    items: Sequence[Any],
    model: DetectorModel,
    params: Mapping[str, Tensor],
    class_names: Sequence[str],
    iou_threshold: float = 0.5,
) -> MetricsReport:
    """MetricsReport over dataset items carrying ``image`` and ``annotations``"""
    dets = predict([item.image for item in items], model, params)
    gts = [list(item.annotations) for item in items]
    return evaluate_detections(dets, gts, class_names, iou_threshold, model.spec.score_threshold)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class FitSettings:
    epochs: int = 60
    learning_rate: float = 1e-3
    batch_size: int = 16
    seed: int = 0
    flip_prob: float = 0.5


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    box_loss: float
    cls_loss: float
    total: float
    val_map50: float
    learning_rate: float


@dataclass
class FitResult:
    history: list[EpochLog] = field(default_factory=list)
    best_state: dict[str, Array] = field(default_factory=dict)
    best_epoch: int = 0
    best_map50: float = 0.0


def _flip_item(image: npt.NDArray[Any], gts: Sequence[GroundTruth], width: int) -> tuple[npt.NDArray[Any], list[GroundTruth]]:
    flipped = [GroundTruth(BBox(width - g.box.cx, g.box.cy, g.box.w, g.box.h), g.class_id, g.image_id) for g in gts]
    return image[:, ::-1], flipped


def fit(
    model: DetectorModel,
    params: ParamStore,
    train: Sequence[Any],
    val: Sequence[Any],
    class_names: Sequence[str],
    settings: FitSettings,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> FitResult:
    """Adam with cosine decay; keeps the parameters of the best validation epoch"""
    spec = model.spec
    if settings.epochs < 0 or settings.batch_size < 1:
        raise ConfigError(f"epochs must be >= 0 and batch_size >= 1, got {settings.epochs}, {settings.batch_size}")
    if settings.epochs > 0 and not train:
        raise ContractError("training split is empty")
    rng = np.random.default_rng(settings.seed)
    optimizer = Adam(lr=settings.learning_rate)
    steps_per_epoch = math.ceil(len(train) / settings.batch_size) if train else 0
    total_steps = settings.epochs * steps_per_epoch
    result = FitResult(best_state=params.state())
    step = 0

    for epoch in range(1, settings.epochs + 1):
        order = rng.permutation(len(train))
        flips = rng.random(len(train)) < settings.flip_prob
        sums = np.zeros(3)
        lr = settings.learning_rate
        for start in range(0, len(train), settings.batch_size):
            images, targets = [], []
            for i in order[start : start + settings.batch_size]:
                image, gts = train[i].image, list(train[i].annotations)
                if flips[i]:
                    image, gts = _flip_item(image, gts, spec.input_size[1])
                images.append(image)
                targets.append(assign_targets(gts, spec))
            lr = cosine_lr(settings.learning_rate, step, total_steps)
            try:
                head = detector_forward(images_to_batch(images), model, params, training=True)
                parts = detection_loss(head, stack_targets(targets), spec)
                grads = tc.backward(parts.total)
                optimizer.step(params, grads, lr)
            except NumericError as exc:
                raise NumericError(f"detector training diverged at epoch {epoch} step {step}: {exc}") from exc
            sums += (parts.box.item(), parts.cls.item(), parts.total.item())
            step += 1

        means = sums / max(steps_per_epoch, 1)
        val_map = evaluate(val, model, params, class_names).map50 if val else 0.0
        log = EpochLog(epoch, float(means[0]), float(means[1]), float(means[2]), val_map, lr)
        result.history.append(log)
        logger.info(
            "epoch %d box %.4f cls %.4f total %.4f val mAP@50 %.4f", epoch, log.box_loss, log.cls_loss, log.total, val_map
        )
        if epoch == 1 or val_map > result.best_map50:
            result.best_map50, result.best_epoch, result.best_state = val_map, epoch, params.state()
        if on_epoch is not None:
            on_epoch(log)
    return result


def save_detector(path: str | Path, model: DetectorModel, params: ParamStore, meta: Mapping[str, Any] | None = None) -> Path:
    header = {"kind": "detector", "spec": asdict(model.spec), "seed": params.seed, **dict(meta or {})}
    return write_checkpoint(path, params.state(), header)


def load_detector(path: str | Path) -> tuple[DetectorModel, ParamStore, dict[str, Any]]:
    """Rebuild a detector from the spec stored in the checkpoint header"""
    ckpt = read_checkpoint(path)
    if ckpt.meta.get("kind") != "detector":
        raise ContractError(f"{path} is not a detector checkpoint (kind={ckpt.meta.get('kind')!r})")
    spec = DetectorSpec.from_dict(ckpt.meta["spec"])
    model, params = build_detector(spec, int(ckpt.meta.get("seed", 0)))
    params.load_state(ckpt.arrays)
    return model, params, ckpt.meta
