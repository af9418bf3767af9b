"""Tests for metrics.py: matching, AP/mAP, confusion, FID and energy gradient"""

import pytest
import sys
import os
import json

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from boxes import BBox, Detection, GroundTruth
from errors import ContractError, DimensionError, MissingArtifactError
from metrics import (
    FeatureStats,
    MatchCounts,
    MetricsReport,
    PrCurve,
    average_precision,
    confusion_matrix,
    embed_features,
    energy_gradient,
    evaluate_detections,
    feature_stats,
    fid,
    map_at_50,
    match_detections,
    mean_matched_confidence,
    precision_recall,
    read_pr_csv,
    write_pr_csv,
)


def box_at(x, y, size=10.0):
    return BBox(x, y, size, size)


def oracle_ap(dets, gts):
    """Area under the precision envelope, one score threshold at a time"""
    scores = sorted({d.score for d in dets}, reverse=True)
    points = []
    for threshold in scores:
        subset = [d for d in dets if d.score >= threshold]
        counts = match_detections(subset, gts).counts
        points.append((counts.tp / len(gts), counts.tp / (counts.tp + counts.fp)))
    area, previous = 0.0, 0.0
    for recall in sorted({r for r, _ in points}):
        best = max(p for r, p in points if r >= recall)
        area += (recall - previous) * best
        previous = recall
    return area


class TestMatching:
    def test_greedy_by_score(self):
        """Test the higher-scoring detection claims a shared GT"""
        gts = [GroundTruth(box_at(20, 20), 0)]
        low = Detection(box_at(20, 20), 0, 0.6)
        high = Detection(box_at(21, 20), 0, 0.9)

        result = match_detections([low, high], gts)

        assert result.flags == (False, True)
        assert result.order == (1, 0)
        assert result.counts == MatchCounts(tp=1, fp=1, fn=0)

    def test_class_and_image_must_agree(self):
        """Test detections only match GTs of the same class and image"""
        gts = [GroundTruth(box_at(20, 20), 0, image_id=0)]
        dets = [Detection(box_at(20, 20), 1, 0.9, 0), Detection(box_at(20, 20), 0, 0.8, 1)]
        assert match_detections(dets, gts).counts == MatchCounts(tp=0, fp=2, fn=1)

    def test_precision_recall(self):
        """Test P/R from (tp, fp, fn) = (9, 1, 3)"""
        precision, recall = precision_recall(MatchCounts(9, 1, 3))
        assert precision == pytest.approx(0.9)
        assert recall == pytest.approx(0.75)

    def test_mean_matched_confidence(self):
        """Test the mean covers true positives only"""
        gts = [GroundTruth(box_at(20, 20), 0), GroundTruth(box_at(60, 60), 0)]
        dets = [Detection(box_at(20, 20), 0, 0.8), Detection(box_at(60, 60), 0, 0.6), Detection(box_at(5, 80), 0, 0.99)]
        assert mean_matched_confidence(dets, gts) == pytest.approx(0.7)
        assert mean_matched_confidence([], gts) == 0.0


class TestAveragePrecision:
    def test_tp_fp_tp_over_two_gts(self):
        """Test ranked [TP, FP, TP] against two GTs gives AP 5/6"""
        gts = [GroundTruth(box_at(20, 20), 0), GroundTruth(box_at(70, 70), 0)]
        dets = [
            Detection(box_at(20, 20), 0, 0.9),
            Detection(box_at(45, 45), 0, 0.8),
            Detection(box_at(70, 70), 0, 0.7),
        ]
        assert average_precision(dets, gts) == pytest.approx(5 / 6, abs=1e-12)

    def test_degenerate_cases(self):
        """Test empty inputs: no GT and no detections is perfect, no GT with detections is zero"""
        assert average_precision([], []) == 1.0
        assert average_precision([Detection(box_at(5, 5), 0, 0.5)], []) == 0.0
        assert average_precision([], [GroundTruth(box_at(5, 5), 0)]) == 0.0

    def test_matches_threshold_sweep_oracle(self, rng):
        """Test AP against an independent per-threshold sweep on random scenes"""
        for _ in range(1000):
            gt_count = int(rng.integers(1, 5))
            gts = [GroundTruth(box_at(*rng.uniform(10, 90, size=2)), 0) for _ in range(gt_count)]
            dets = []
            scores = rng.permutation(np.linspace(0.05, 0.95, 19))[: int(rng.integers(0, 8))]
            for score in scores:
                if rng.random() < 0.6:
                    anchor = gts[int(rng.integers(gt_count))].box
                    box = box_at(anchor.cx + rng.uniform(-4, 4), anchor.cy + rng.uniform(-4, 4))
                else:
                    box = box_at(*rng.uniform(10, 90, size=2))
                dets.append(Detection(box, 0, float(score)))

            expected = oracle_ap(dets, gts) if dets else 0.0
            assert average_precision(dets, gts) == pytest.approx(expected, abs=1e-12)

    def test_ap_in_unit_interval(self, rng):
        """Test AP stays inside [0, 1]"""
        gts = [GroundTruth(box_at(30, 30), 0)]
        dets = [Detection(box_at(*rng.uniform(20, 40, size=2)), 0, float(s)) for s in rng.random(10)]
        assert 0.0 <= average_precision(dets, gts) <= 1.0

    def test_map_is_mean_of_classes(self):
        """Test mAP@50 averages per-class AP and rejects an empty set"""
        assert map_at_50({"a": 1.0, "b": 0.5, "c": 0.0}) == pytest.approx(0.5)
        assert map_at_50([0.25, 0.75]) == pytest.approx(0.5)
        with pytest.raises(ContractError):
            map_at_50([])


class TestConfusion:
    def test_rows_sum_to_gt_counts(self, rng):
        """Test each GT row sums to that class's GT count and misses land in background"""
        gts = [GroundTruth(box_at(20, 20), 0), GroundTruth(box_at(60, 20), 1), GroundTruth(box_at(20, 60), 2)]
        dets = [
            Detection(box_at(20, 20), 0, 0.9),
            Detection(box_at(60, 20), 2, 0.8),
            Detection(box_at(80, 80), 1, 0.7),
        ]

        matrix = confusion_matrix(dets, gts, 3)

        assert matrix.shape == (4, 4)
        assert matrix[0, 0] == 1
        assert matrix[1, 2] == 1
        assert matrix[2, 3] == 1
        assert matrix[3, 1] == 1
        for class_id in range(3):
            assert matrix[class_id].sum() == sum(1 for g in gts if g.class_id == class_id)

    def test_class_out_of_range(self):
        """Test class ids outside 0..K-1 are rejected"""
        with pytest.raises(ContractError):
            confusion_matrix([Detection(box_at(5, 5), 3, 0.5)], [], 3)


class TestFid:
    def test_one_dimensional_cases(self):
        """Test shifted means and scaled variances against the closed form"""
        unit = FeatureStats(np.array([0.0]), np.array([[1.0]]))
        shifted = FeatureStats(np.array([1.0]), np.array([[1.0]]))
        wide = FeatureStats(np.array([0.0]), np.array([[4.0]]))

        assert fid(unit, shifted) == pytest.approx(1.0, abs=1e-9)
        assert fid(unit, wide) == pytest.approx(1.0, abs=1e-9)

    def test_identity_symmetry_and_mean_bound(self, rng):
        """Test FID(a, a) ~ 0, symmetry, and FID >= squared mean distance"""
        def random_stats():
            a = rng.normal(size=(8, 8))
            return FeatureStats(rng.normal(size=8), a @ a.T + np.eye(8))

        a, b = random_stats(), random_stats()

        assert fid(a, a) == pytest.approx(0.0, abs=1e-6)
        assert fid(a, b) == pytest.approx(fid(b, a), abs=1e-8)
        assert fid(a, b) >= float(np.sum((a.mean - b.mean) ** 2)) - 1e-9

    def test_dimension_mismatch(self):
        """Test feature dimensions must agree"""
        with pytest.raises(DimensionError):
            fid(FeatureStats(np.zeros(2), np.eye(2)), FeatureStats(np.zeros(3), np.eye(3)))

    def test_feature_stats(self, rng):
        """Test mean and covariance of feature rows"""
        rows = rng.normal(size=(50, 3))
        stats = feature_stats(rows)
        np.testing.assert_allclose(stats.mean, rows.mean(axis=0))
        np.testing.assert_allclose(stats.covariance, np.cov(rows, rowvar=False))

    def test_embedders(self, rng):
        """Test the frozen embedder gives 64 deterministic features and pixel mode flattens"""
        images = rng.uniform(0, 255, size=(3, 32, 32))

        frozen = embed_features(images, "frozen")
        assert frozen.shape == (3, 64)
        assert np.array_equal(frozen, embed_features(images, "frozen"))
        assert embed_features(images, "pixel", downsample=4).shape == (3, 64)
        with pytest.raises(DimensionError):
            embed_features(images[0], "frozen")


class TestEnergyGradient:
    def test_small_case(self):
        """Test [[0,1],[0,1]] has energy 2"""
        assert energy_gradient([[0, 1], [0, 1]]) == pytest.approx(2.0)

    def test_constant_image_is_zero(self):
        """Test a flat image has no gradient energy"""
        assert energy_gradient(np.full((5, 7), 128.0)) == 0.0

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(min_value=0, max_value=2**16), c=st.floats(min_value=0.1, max_value=10.0))
    def test_mirror_invariance_and_scaling(self, seed, c):
        """Test energy is unchanged by mirroring and scales with c squared"""
        image = np.random.default_rng(seed).normal(size=(6, 9))
        base = energy_gradient(image)
        assert energy_gradient(image[:, ::-1]) == pytest.approx(base)
        assert energy_gradient(image[::-1, :]) == pytest.approx(base)
        assert energy_gradient(c * image) == pytest.approx(c * c * base)

    def test_too_small(self):
        """Test images narrower than 2 pixels are rejected"""
        with pytest.raises(ContractError):
            energy_gradient(np.zeros((1, 5)))


class TestReports:
    def _report(self):
        gts = [[GroundTruth(box_at(20, 20), 0)], [GroundTruth(box_at(50, 50), 1)], []]
        dets = [[Detection(box_at(20, 20), 0, 0.9)], [Detection(box_at(10, 80), 1, 0.6)], [Detection(box_at(30, 30), 2, 0.4)]]
        return evaluate_detections(dets, gts, ["cavity", "concave", "crack"])

    def test_evaluate_detections(self):
        """Test per-class AP, mAP and counts of a small hand case"""
        report = self._report()

        assert report.per_class_ap == {"cavity": 1.0, "concave": 0.0, "crack": 0.0}
        assert report.map50 == pytest.approx(1 / 3)
        assert report.precision == pytest.approx(1 / 3)
        assert report.recall == pytest.approx(0.5)
        assert sum(sum(row) for row in report.confusion) == 4

    def test_json_round_trip(self):
        """Test a report survives JSON encoding unchanged"""
        report = self._report()
        restored = MetricsReport.from_json(json.loads(json.dumps(report.to_json())))
        assert restored.to_json() == report.to_json()

    def test_mismatched_image_lists(self):
        """Test detection and GT lists must cover the same images"""
        with pytest.raises(ContractError):
            evaluate_detections([[]], [[], []], ["a"])

    def test_pr_csv(self, tmp_path):
        """Test the PR CSV header and values"""
        curve = PrCurve(((0.5, 1.0), (1.0, 2 / 3)))
        path = write_pr_csv(tmp_path / "pr_cavity.csv", curve)

        assert path.read_text(encoding="utf-8").splitlines()[0] == "recall,precision"
        assert read_pr_csv(path) == curve

    def test_missing_pr_csv(self, tmp_path):
        """Test reading an absent curve names the file"""
        with pytest.raises(MissingArtifactError) as exc:
            read_pr_csv(tmp_path / "absent.csv")
        assert "absent.csv" in str(exc.value)
