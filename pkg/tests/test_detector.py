"""Tests for detector.py and boxes.py: forward pass, targets, losses, decoding and training"""

import pytest
import sys
import os
import math
from dataclasses import replace

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import detector
from boxes import BBox, Detection, GroundTruth, iou
from detector import (
    DetectorSpec,
    FitSettings,
    assign_targets,
    build_detector,
    cell_of,
    decode_box,
    decode_predictions,
    ciou_loss_terms,
    detection_loss,
    detector_forward,
    encode_box,
    fit,
    load_detector,
    nms,
    save_detector,
)
from errors import ConfigError, DimensionError, NumericError
from synthgpr import CLASS_NAMES
from tensorcore import Tensor, finite_diff_check


class TestBoxes:
    def test_iou_of_offset_squares(self):
        """Test corner boxes (0,0)-(2,2) and (1,1)-(3,3) overlap at 1/7"""
        a = BBox.from_corners(0, 0, 2, 2)
        b = BBox.from_corners(1, 1, 3, 3)
        assert iou(a, b) == pytest.approx(1 / 7)

    def test_iou_disjoint_and_identical(self):
        """Test disjoint boxes give 0 and a box with itself gives 1"""
        a = BBox(5, 5, 2, 2)
        assert iou(a, BBox(50, 50, 2, 2)) == 0.0
        assert iou(a, a) == pytest.approx(1.0)

    def test_clamp_keeps_box_inside(self):
        """Test clamp trims a box hanging over the edges"""
        box = BBox(2, 94, 10, 10).clamp(96, 96)
        assert box.inside(96, 96)
        assert box.corners() == (0.0, 89.0, 7.0, 96.0)

    def test_record_round_trip(self):
        """Test label records keep class and geometry"""
        gt = GroundTruth(BBox(10.5, 20.25, 4.0, 6.0), 2)
        assert GroundTruth.from_record(gt.to_record(), image_id=3) == replace(gt, image_id=3)


class TestDetectorSpec:
    def test_default_geometry(self):
        """Test the default 96x96 input gives a 12x12 grid and a 24x24 neck"""
        spec = DetectorSpec()
        assert spec.grid == (12, 12)
        assert spec.neck_resolution == (24, 24)

    @pytest.mark.parametrize(
        "changes",
        [
            {"stride": 4},
            {"input_size": (100, 96)},
            {"gam_stage": 4},
            {"stage_channels": (8,), "stride": 2},
            {"gam_reduction": 3},
            {"score_threshold": 1.5},
        ],
    )
    def test_invalid_specs(self, changes):
        """Test inconsistent geometry and GAM settings are ConfigErrors"""
        with pytest.raises(ConfigError):
            replace(DetectorSpec(), **changes).validate()

    def test_from_dict_restores_tuples(self):
        """Test specs read back from JSON headers regain tuple fields"""
        spec = DetectorSpec.from_dict({**vars(DetectorSpec()), "input_size": [96, 96], "stage_channels": [8, 16, 32]})
        assert spec == DetectorSpec()


class TestForward:
    def test_head_shape(self):
        """Test a 96x96 input yields a (K+4) x 12 x 12 head"""
        model, params = build_detector(DetectorSpec(), seed=0)
        out = detector_forward(Tensor(np.zeros((1, 1, 96, 96))), model, params)
        assert out.shape == (1, 7, 12, 12)

    def test_wrong_input_shape(self, small_detector_spec):
        """Test the input size is checked against the spec"""
        model, params = build_detector(small_detector_spec)
        with pytest.raises(DimensionError):
            detector_forward(Tensor(np.zeros((1, 1, 96, 96))), model, params)

    def test_mcff_adds_its_weight_count(self):
        """Test enabling MCFF adds exactly C*C + H*H + W*W parameters"""
        with_mcff = build_detector(DetectorSpec(mcff_in_neck=True), seed=0)[1]
        without = build_detector(DetectorSpec(mcff_in_neck=False), seed=0)[1]
        assert with_mcff.num_parameters() - without.num_parameters() == 32 * 32 + 24 * 24 + 24 * 24

    def test_same_seed_same_model(self, small_detector_spec):
        """Test construction is a pure function of spec and seed"""
        assert build_detector(small_detector_spec, 3)[1].equals(build_detector(small_detector_spec, 3)[1])

    def test_zeroed_blocks_reduce_to_baseline(self, mocker, rng, small_detector_spec):
        """Test zeroed MCFF and GAM equal the baseline with an identity neck and a constant 1/4 gate"""
        model, params = build_detector(small_detector_spec, seed=1)
        params.zero_("backbone.gam")
        params.zero_("neck.mcff")
        x = Tensor(rng.uniform(-1, 1, size=(2, 1, 32, 32)))

        full = detector_forward(x, model, params, training=False).data

        mocker.patch("detector.gam_forward", side_effect=lambda f, *args, **kwargs: f * 0.25)
        mocker.patch("detector.mcff_layer", side_effect=lambda n, *args, **kwargs: n)
        baseline = detector_forward(x, model, params, training=False).data

        assert np.array_equal(full, baseline)

    def test_gam_in_neck_adds_parameters(self, small_detector_spec):
        """Test the neck GAM switch registers its own parameters"""
        _, params = build_detector(replace(small_detector_spec, gam_in_neck=True))
        assert any(path.startswith("neck.gam.") for path in params)


class TestTargets:
    def test_center_cell(self):
        """Test a GT is assigned to the cell holding its center"""
        spec = DetectorSpec()
        targets = assign_targets([GroundTruth(BBox(20, 20, 10, 10), 1)], spec)

        assert targets.num_positive == 1
        assert targets.positive[0, 2, 2]
        assert targets.classes[0, 1, 2, 2] == 1.0
        assert targets.classes.sum() == 1.0

    def test_contested_cell_goes_to_larger_box(self):
        """Test two GTs in one cell keep only the larger"""
        spec = DetectorSpec()
        small = GroundTruth(BBox(20, 20, 4, 4), 0)
        large = GroundTruth(BBox(21, 19, 12, 10), 2)
        targets = assign_targets([small, large], spec)

        assert targets.num_positive == 1
        assert targets.boxes[0][3] == large.box
        assert targets.classes[0, 2, 2, 2] == 1.0
        assert targets.classes[0, 0, 2, 2] == 0.0

    def test_cell_of_clamps_edges(self):
        """Test a center on the far edge maps to the last cell"""
        assert cell_of(BBox(96.0, 96.0, 4, 4), DetectorSpec()) == (11, 11)

    @settings(max_examples=60, deadline=None)
    @given(
        col=st.integers(min_value=0, max_value=11),
        row=st.integers(min_value=0, max_value=11),
        fx=st.floats(min_value=0.01, max_value=0.99),
        fy=st.floats(min_value=0.01, max_value=0.99),
        w=st.floats(min_value=2.0, max_value=60.0),
        h=st.floats(min_value=2.0, max_value=60.0),
    )
    def test_decode_inverts_encode(self, col, row, fx, fy, w, h):
        """Test decode(encode(b)) reproduces b to 1e-6 pixel"""
        box = BBox((col + fx) * 8, (row + fy) * 8, w, h)
        cell = cell_of(box, DetectorSpec())
        back = decode_box(encode_box(box, cell, 8), cell, 8)
        for got, want in zip((back.cx, back.cy, back.w, back.h), (box.cx, box.cy, box.w, box.h)):
            assert got == pytest.approx(want, abs=1e-6)


class TestLoss:
    def _saturated(self, spec, gts):
        """Head output whose decode reproduces gts exactly with saturated class logits"""
        targets = assign_targets(gts, spec)
        k = spec.num_classes
        pred = np.zeros((1, k + 4, *spec.grid))
        pred[0, :k] = np.where(targets.classes[0] > 0, 40.0, -40.0)
        for _, row, col, box in targets.boxes:
            pred[0, k:, row, col] = encode_box(box, (row, col), spec.stride)
        return pred, targets

    def test_empty_image_with_zero_logits(self):
        """Test no GT and all-zero logits give box 0 and class loss ln 2"""
        spec = DetectorSpec()
        parts = detection_loss(Tensor(np.zeros((1, 7, 12, 12))), assign_targets([], spec), spec)

        assert parts.box.item() == 0.0
        assert parts.cls.item() == pytest.approx(math.log(2))
        assert parts.total.item() == pytest.approx(math.log(2))

    def test_perfect_prediction_has_no_box_loss(self):
        """Test predicted boxes equal to their targets cost nothing beyond encode/decode round-off"""
        spec = DetectorSpec()
        gts = [GroundTruth(BBox(20, 28, 12, 9), 0), GroundTruth(BBox(70, 50, 20, 6), 2)]
        pred, targets = self._saturated(spec, gts)

        parts = detection_loss(Tensor(pred), targets, spec)

        assert parts.box.item() == pytest.approx(0.0, abs=1e-8)
        assert parts.total.item() == pytest.approx(0.0, abs=1e-8)

    def test_identical_boxes_score_exactly_zero(self):
        """Test a box compared with itself has zero CIoU loss"""
        boxes = np.array([[20.0, 28.0, 12.0, 9.0], [70.0, 50.0, 20.0, 6.0]])
        assert ciou_loss_terms(Tensor(boxes), boxes).numpy().tolist() == [0.0, 0.0]

    def test_degenerate_boxes_stay_finite(self):
        """Test two zero-area boxes at one point do not divide by zero"""
        boxes = np.array([[5.0, 5.0, 0.0, 1.0]])
        assert np.isfinite(ciou_loss_terms(Tensor(boxes), boxes).numpy()).all()

    def test_loss_is_positive_when_wrong(self, rng):
        """Test a shifted box and a flipped class raise both terms"""
        spec = DetectorSpec()
        gts = [GroundTruth(BBox(20, 28, 12, 9), 0)]
        pred, targets = self._saturated(spec, gts)
        pred[0, 4, 3, 2] += 1.0
        pred[0, 0, 3, 2] = -40.0

        parts = detection_loss(Tensor(pred), targets, spec)

        assert parts.box.item() > 1e-3
        assert parts.cls.item() > 1e-3

    def test_shape_mismatch(self):
        """Test a head that does not match the grid is rejected"""
        spec = DetectorSpec()
        with pytest.raises(DimensionError):
            detection_loss(Tensor(np.zeros((1, 7, 6, 6))), assign_targets([], spec), spec)

    def test_gradient(self, rng, small_detector_spec):
        """Test box and class loss gradients wrt the raw head output"""
        spec = small_detector_spec
        gts = [GroundTruth(BBox(10, 14, 6, 5), 0), GroundTruth(BBox(22, 6, 5, 7), 2)]
        targets = assign_targets(gts, spec)
        pred = Tensor(rng.normal(scale=0.5, size=(1, 7, 8, 8)), name="pred", requires_grad=True)

        error = finite_diff_check(lambda p: detection_loss(p["pred"], targets, spec).total, {"pred": pred})

        assert error < 1e-4


class TestDecodeAndNms:
    def test_single_confident_cell(self):
        """Test one high logit yields one detection at that cell"""
        spec = DetectorSpec()
        head = np.zeros((7, 12, 12))
        head[:3] = -40.0
        head[1, 5, 7] = 10.0

        dets = decode_predictions(head, spec, image_id=4)

        assert len(dets) == 1
        det = dets[0]
        assert det.class_id == 1
        assert det.image_id == 4
        assert (det.box.cx, det.box.cy, det.box.w, det.box.h) == pytest.approx((60.0, 44.0, 8.0, 8.0))

    def test_boxes_clamped_to_image(self):
        """Test decoded boxes never leave the image"""
        spec = DetectorSpec()
        head = np.zeros((7, 12, 12))
        head[:3] = 5.0
        head[5:] = 3.0
        dets = decode_predictions(head, spec)
        assert len(dets) == 144
        assert all(d.box.inside(96, 96) for d in dets)

    def test_nms_keeps_best_of_overlapping_pair(self):
        """Test the lower-scoring duplicate of the same class is dropped"""
        a = Detection(BBox(10, 10, 8, 8), 0, 0.9)
        b = Detection(BBox(11, 10, 8, 8), 0, 0.8)
        c = Detection(BBox(11, 10, 8, 8), 1, 0.7)
        assert nms([b, a, c], 0.5) == [a, c]

    def test_nms_properties(self, rng):
        """Test survivors are a subset, pairwise below threshold, and cover every dropped box"""
        for _ in range(200):
            count = int(rng.integers(0, 21))
            dets = [
                Detection(
                    BBox(*rng.uniform(10, 40, size=2), *rng.uniform(4, 20, size=2)),
                    int(rng.integers(0, 2)),
                    float(rng.random()),
                )
                for _ in range(count)
            ]
            kept = nms(dets, 0.5)

            assert all(any(k is d for d in dets) for k in kept)
            for i, a in enumerate(kept):
                for b in kept[i + 1 :]:
                    assert a.class_id != b.class_id or iou(a.box, b.box) < 0.5
            for d in dets:
                if not any(k is d for k in kept):
                    assert any(k.class_id == d.class_id and iou(k.box, d.box) >= 0.5 for k in kept)


class TestFit:
    def test_one_epoch_logs_and_is_deterministic(self, tiny_detector_spec, labeled_items):
        """Test a short run logs an epoch and repeats bitwise with the same seed"""
        settings = FitSettings(epochs=1, batch_size=4, seed=5)
        results = []
        for _ in range(2):
            model, params = build_detector(tiny_detector_spec, seed=5)
            results.append(fit(model, params, labeled_items, labeled_items[:3], CLASS_NAMES, settings))

        first, second = results
        assert len(first.history) == 1
        assert first.history[0].epoch == 1
        assert np.isfinite(first.history[0].total)
        assert first.best_state.keys() == second.best_state.keys()
        assert all(np.array_equal(first.best_state[k], second.best_state[k]) for k in first.best_state)

    def test_zero_epochs_keeps_initial_state(self, tiny_detector_spec, labeled_items):
        """Test epochs=0 trains nothing and returns the initial parameters"""
        model, params = build_detector(tiny_detector_spec, seed=2)
        initial = params.state()
        result = fit(model, params, labeled_items, [], CLASS_NAMES, FitSettings(epochs=0))

        assert result.history == []
        assert all(np.array_equal(initial[k], result.best_state[k]) for k in initial)

    def test_divergence_names_epoch_and_step(self, mocker, tiny_detector_spec, labeled_items):
        """Test a non-finite loss is reported with where it happened"""
        mocker.patch("detector.detection_loss", side_effect=NumericError("boom"))
        model, params = build_detector(tiny_detector_spec)

        with pytest.raises(NumericError) as exc:
            fit(model, params, labeled_items, [], CLASS_NAMES, FitSettings(epochs=1, batch_size=4))

        assert "epoch 1 step 0" in str(exc.value)

    def test_invalid_settings(self, tiny_detector_spec):
        """Test negative epochs are a ConfigError"""
        model, params = build_detector(tiny_detector_spec)
        with pytest.raises(ConfigError):
            fit(model, params, [], [], CLASS_NAMES, FitSettings(epochs=-1))

    def test_save_and_load(self, tmp_path, rng, small_detector_spec):
        """Test a saved detector rebuilds with the same spec and parameters"""
        model, params = build_detector(small_detector_spec, seed=8)
        params["head.weight"].data[...] = rng.normal(size=params["head.weight"].shape)
        path = save_detector(tmp_path / "det.mcga", model, params, {"best_epoch": 3})

        loaded_model, loaded_params, meta = load_detector(path)

        assert loaded_model.spec == small_detector_spec
        assert loaded_params.equals(params)
        assert meta["best_epoch"] == 3
        x = Tensor(rng.uniform(-1, 1, size=(1, 1, 32, 32)))
        assert np.array_equal(
            detector_forward(x, model, params).data, detector_forward(x, loaded_model, loaded_params).data
        )

    def test_evaluate_reports_every_class(self, tiny_detector_spec, labeled_items):
        """Test evaluation of an untrained model covers every class name"""
        model, params = build_detector(tiny_detector_spec)
        report = detector.evaluate(labeled_items[:3], model, params, CLASS_NAMES)
        assert set(report.per_class_ap) == set(CLASS_NAMES)
        assert 0.0 <= report.map50 <= 1.0
