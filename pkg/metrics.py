"""Detection matching, precision/recall, AP and mAP@50, confusion matrix, FID and energy gradient"""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Literal

import numpy as np
import numpy.typing as npt
from scipy import linalg

import tensorcore as tc
from boxes import Detection, GroundTruth, iou
from errors import ContractError, DimensionError, MissingArtifactError

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

EMBEDDER_SEED = 42
EMBEDDER_CHANNELS = (16, 32, 64)

Matrix = npt.NDArray[np.float64]


@dataclass(frozen=True)
class MatchCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: MatchCounts) -> MatchCounts:
        return MatchCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class MatchResult:
    """Per-detection flags in input order, plus the rank order used to match"""

    flags: tuple[bool, ...]
    order: tuple[int, ...]
    counts: MatchCounts


@dataclass(frozen=True)
class PrCurve:
    points: tuple[tuple[float, float], ...] = ()


def _rank(dets: Sequence[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))


def _greedy_match(
    dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float, class_aware: bool
) -> tuple[list[int], dict[int, int]]:
    """Rank order and a map from detection index to matched GT index"""
    pools: dict[int, list[int]] = defaultdict(list)
    for g, gt in enumerate(gts):
        pools[gt.image_id].append(g)
    taken: set[int] = set()
    matched: dict[int, int] = {}
    order = _rank(dets)
    for d in order:
        det = dets[d]
        best, best_iou = -1, iou_threshold
        for g in pools.get(det.image_id, ()):
            if g in taken or (class_aware and gts[g].class_id != det.class_id):
                continue
            overlap = iou(det.box, gts[g].box)
            if overlap >= best_iou and (best < 0 or overlap > best_iou):
                best, best_iou = g, overlap
        if best >= 0:
            taken.add(best)
            matched[d] = best
    return order, matched


def match_detections(
    dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float = 0.5
) -> MatchResult:
    """Greedy score-ordered matching of detections to same-image, same-class ground truths"""
    order, matched = _greedy_match(dets, gts, iou_threshold, class_aware=True)
    flags = tuple(i in matched for i in range(len(dets)))
    tp = len(matched)
    return MatchResult(flags, tuple(order), MatchCounts(tp, len(dets) - tp, len(gts) - tp))


def precision_recall(c: MatchCounts) -> tuple[float, float]:
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 1.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 1.0
    return precision, recall


def pr_curve(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float = 0.5) -> PrCurve:
    result = match_detections(dets, gts, iou_threshold)
    points: list[tuple[float, float]] = []
    tp = fp = 0
    for d in result.order:
        if result.flags[d]:
            tp += 1
        else:
            fp += 1
        recall = tp / len(gts) if gts else 1.0
        points.append((recall, tp / (tp + fp)))
    return PrCurve(tuple(points))


def average_precision(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float = 0.5) -> float:
    """All-points interpolated area under the precision envelope"""
    if not gts:
        return 1.0 if not dets else 0.0
    points = pr_curve(dets, gts, iou_threshold).points
    if not points:
        return 0.0
    recalls = np.array([r for r, _ in points])
    envelope = np.maximum.accumulate(np.array([p for _, p in points])[::-1])[::-1]
    increments = np.diff(np.concatenate([[0.0], recalls]))
    return float(np.sum(increments * envelope))


def map_at_50(per_class_ap: Mapping[str, float] | Sequence[float]) -> float:
    values = list(per_class_ap.values()) if isinstance(per_class_ap, Mapping) else list(per_class_ap)
    if not values:
        raise ContractError("mAP needs at least one class")
    return float(np.mean(values))


def confusion_matrix(
    dets: Sequence[Detection], gts: Sequence[GroundTruth], num_classes: int, iou_threshold: float = 0.5
) -> npt.NDArray[np.int64]:
    """(K+1)x(K+1) counts indexed [gt_class, det_class]; index K is background"""
    for item in (*dets, *gts):
        if not 0 <= item.class_id < num_classes:
            raise ContractError(f"class id {item.class_id} outside 0..{num_classes - 1}")
    matrix = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
    _, matched = _greedy_match(dets, gts, iou_threshold, class_aware=False)
    for d, g in matched.items():
        matrix[gts[g].class_id, dets[d].class_id] += 1
    hit = set(matched.values())
    for g, gt in enumerate(gts):
        if g not in hit:
            matrix[gt.class_id, num_classes] += 1
    for d, det in enumerate(dets):
        if d not in matched:
            matrix[num_classes, det.class_id] += 1
    return matrix


def mean_matched_confidence(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float = 0.5) -> float:
    """Mean score over true-positive detections, 0 when there are none"""
    result = match_detections(dets, gts, iou_threshold)
    scores = [d.score for d, hit in zip(dets, result.flags) if hit]
    return float(np.mean(scores)) if scores else 0.0


# ---------------------------------------------------------------------------
# image-set statistics
# ---------------------------------------------------------------------------
@lru_cache(maxsize=1)
def _embedder_weights() -> tuple[tuple[tc.Tensor, tc.Tensor], ...]:
    rng = np.random.default_rng(EMBEDDER_SEED)
    layers = []
    in_ch = 1
    for out_ch in EMBEDDER_CHANNELS:
        w = rng.normal(0.0, np.sqrt(2.0 / (in_ch * 9)), size=(out_ch, in_ch, 3, 3))
        layers.append((tc.Tensor(w, dtype=np.float64), tc.Tensor(np.zeros(out_ch), dtype=np.float64)))
        in_ch = out_ch
    return tuple(layers)


def embed_features(
    images: npt.ArrayLike, embedder: Literal["frozen", "pixel"] = "frozen", downsample: int = 1
) -> Matrix:
    """Feature rows for a stack of (N, H, W) images"""
    stack = np.asarray(images, dtype=np.float64)
    if stack.ndim != 3:
        raise DimensionError(f"embed_features expects (N, H, W) images, got shape {stack.shape}")
    if embedder == "pixel":
        return stack[:, ::downsample, ::downsample].reshape(stack.shape[0], -1).copy()
    x = tc.Tensor(stack[:, None, :, :], dtype=np.float64)
    for w, b in _embedder_weights():
        x = tc.relu(tc.conv2d(x, w, b, stride=2, pad=1))
    return x.data.mean(axis=(2, 3))


@dataclass(frozen=True)
class FeatureStats:
    mean: Matrix
    covariance: Matrix


def feature_stats(features: npt.ArrayLike) -> FeatureStats:
    rows = np.asarray(features, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise DimensionError(f"feature_stats expects (N, d) features with N >= 1, got {rows.shape}")
    mean = rows.mean(axis=0)
    if rows.shape[0] < 2:
        return FeatureStats(mean, np.zeros((rows.shape[1], rows.shape[1])))
    return FeatureStats(mean, np.atleast_2d(np.cov(rows, rowvar=False)))


def _psd_sqrt(matrix: Matrix) -> tuple[Matrix, Matrix]:
    """Symmetric square root via eigendecomposition; returns (root, clamped eigenvalues)"""
    sym = 0.5 * (matrix + matrix.T)
    w, v = linalg.eigh(sym)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T, w


def fid(a: FeatureStats, b: FeatureStats) -> float:
    """Squared Frechet distance between two Gaussian fits"""
    if a.mean.shape != b.mean.shape or a.covariance.shape != b.covariance.shape:
        raise DimensionError(f"fid dimension mismatch: {a.mean.shape[0]} vs {b.mean.shape[0]}")
    s1, s2 = a.covariance, b.covariance
    if min(linalg.eigvalsh(0.5 * (s1 + s1.T))[0], linalg.eigvalsh(0.5 * (s2 + s2.T))[0]) < -1e-8:
        jitter = 1e-6 * float(np.mean(np.concatenate([np.diag(s1), np.diag(s2)])))
        logger.warning("fid: covariance not PSD, adding %.3e jitter", jitter)
        s1 = s1 + jitter * np.eye(s1.shape[0])
        s2 = s2 + jitter * np.eye(s2.shape[0])
    root1, _ = _psd_sqrt(s1)
    _, inner = _psd_sqrt(root1 @ s2 @ root1)
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.sum(np.sqrt(inner)))
    return max(value, 0.0)


def energy_gradient(image: npt.ArrayLike) -> float:
    """Sum of squared forward differences along both image axes"""
    f = np.asarray(image, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2 or f.shape[1] < 2:
        raise ContractError(f"energy_gradient needs an image of at least 2x2, got {f.shape}")
    dx = np.diff(f, axis=1)
    dy = np.diff(f, axis=0)
    return float(np.sum(dx * dx) + np.sum(dy * dy))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------
@dataclass
class MetricsReport:
    per_class_ap: dict[str, float]
    map50: float
    precision: float
    recall: float
    confusion: list[list[int]]
    class_names: list[str]
    fid: float | None = None
    energy_gradient: dict[str, float] | None = None
    mean_confidence: float | None = None
    config: dict[str, Any] = field(default_factory=dict)
    seed: int | None = None
    pr_curves: dict[str, PrCurve] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {
            "per_class_ap": dict(self.per_class_ap),
            "map50": self.map50,
            "precision": self.precision,
            "recall": self.recall,
            "confusion": [list(row) for row in self.confusion],
            "class_names": list(self.class_names),
            "fid": self.fid,
            "energy_gradient": self.energy_gradient,
            "mean_confidence": self.mean_confidence,
            "config": self.config,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> MetricsReport:
        return cls(
            per_class_ap={k: float(v) for k, v in data["per_class_ap"].items()},
            map50=float(data["map50"]),
            precision=float(data["precision"]),
            recall=float(data["recall"]),
            confusion=[[int(c) for c in row] for row in data["confusion"]],
            class_names=list(data["class_names"]),
            fid=data.get("fid"),
            energy_gradient=data.get("energy_gradient"),
            mean_confidence=data.get("mean_confidence"),
            config=dict(data.get("config") or {}),
            seed=data.get("seed"),
        )


def evaluate_detections(
    per_image_dets: Sequence[Sequence[Detection]],
    per_image_gts: Sequence[Sequence[GroundTruth]],
    class_names: Sequence[str],
    iou_threshold: float = 0.5,
    score_threshold: float = 0.25,
) -> MetricsReport:
    """Full report over a set of images; image ids are the list positions"""
    if len(per_image_dets) != len(per_image_gts):
        raise ContractError(f"{len(per_image_dets)} detection lists for {len(per_image_gts)} images")
    dets = [d.with_image(i) for i, ds in enumerate(per_image_dets) for d in ds]
    gts = [GroundTruth(g.box, g.class_id, i) for i, gs in enumerate(per_image_gts) for g in gs]

    per_class_ap: dict[str, float] = {}
    curves: dict[str, PrCurve] = {}
    counts = MatchCounts()
    for class_id, name in enumerate(class_names):
        cdets = [d for d in dets if d.class_id == class_id]
        cgts = [g for g in gts if g.class_id == class_id]
        per_class_ap[name] = average_precision(cdets, cgts, iou_threshold)
        curves[name] = pr_curve(cdets, cgts, iou_threshold)
        counts += match_detections([d for d in cdets if d.score >= score_threshold], cgts, iou_threshold).counts
    precision, recall = precision_recall(counts)
    matrix = confusion_matrix([d for d in dets if d.score >= score_threshold], gts, len(class_names), iou_threshold)
    return MetricsReport(
        per_class_ap=per_class_ap,
        map50=map_at_50(per_class_ap),
        precision=precision,
        recall=recall,
        confusion=matrix.tolist(),
        class_names=list(class_names),
        mean_confidence=mean_matched_confidence(dets, gts, iou_threshold),
        pr_curves=curves,
    )


def write_pr_csv(path: str | Path, curve: PrCurve) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["recall", "precision"])
        writer.writerows([repr(float(r)), repr(float(p))] for r, p in curve.points)
    return target


def read_pr_csv(path: str | Path) -> PrCurve:
    source = Path(path)
    if not source.is_file():
        raise MissingArtifactError([str(source)], "PR curve")
    with source.open(newline="", encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    return PrCurve(tuple((float(r["recall"]), float(r["precision"])) for r in rows))
