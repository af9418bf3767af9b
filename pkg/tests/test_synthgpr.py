"""Tests for synthgpr.py: physics helpers, scene rendering, noise, background removal and dataset trees"""

import pytest
import sys
import os
import json
import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from boxes import SHAPE_CLASS_NAMES, BBox, GroundTruth
from errors import ConfigError, ContractError, MissingArtifactError, SceneError
from metrics import energy_gradient
from synthgpr import (
    CLASS_NAMES,
    DatasetPlan,
    DefectSpec,
    MaterialLayer,
    ScenePrior,
    SceneSpec,
    ShapesPrior,
    _plan_entries,
    add_gaussian_noise,
    apex_time,
    background_removal,
    defect_contribution,
    derive_boxes,
    generate_dataset,
    hyperbola_trace,
    load_manifest,
    quantization_scale,
    random_scene,
    read_dataset,
    reflection_coeff,
    render_scene,
    render_shapes,
    ricker_wavelet,
    velocity,
)
from tests.fixtures.trees import tree_bytes


def cavity_scene(depth=0.5, x0=0.96, **kwargs):
    """Single cavity in an eps=9 host (v = 0.1 m/ns)"""
    defect = DefectSpec("cavity", x0=x0, depth=depth, extent=0.04, multiples=kwargs.pop("multiples", 2))
    return SceneSpec(layers=(MaterialLayer(0.0, 9.0),), defects=(defect,), **kwargs)


class TestPhysics:
    def test_reflection_coefficient(self):
        """Test R(9, 1) = (3 - 1) / (3 + 1)"""
        assert reflection_coeff(9.0, 1.0) == pytest.approx(0.5)

    @settings(max_examples=50, deadline=None)
    @given(
        a=st.floats(min_value=1.0, max_value=80.0),
        b=st.floats(min_value=1.0, max_value=80.0),
    )
    def test_reflection_antisymmetric_and_bounded(self, a, b):
        """Test R(a, b) = -R(b, a) and |R| < 1"""
        assert reflection_coeff(a, b) == pytest.approx(-reflection_coeff(b, a))
        assert abs(reflection_coeff(a, b)) < 1.0

    def test_reflection_rejects_non_positive(self):
        """Test permittivity must be positive"""
        with pytest.raises(ValueError):
            reflection_coeff(0.0, 4.0)

    def test_ricker_peak_and_zero_crossing(self):
        """Test w(0) = 1 and the first zero at 1 / (pi fc sqrt 2)"""
        fc = 1.5
        assert float(ricker_wavelet(fc, 0.0)) == 1.0
        crossing = 1.0 / (math.pi * fc * math.sqrt(2.0))
        assert float(ricker_wavelet(fc, crossing)) == pytest.approx(0.0, abs=1e-12)
        assert float(ricker_wavelet(fc, 2 * crossing)) < 0.0

    def test_hyperbola_times(self):
        """Test two-way times at the apex and at one depth offset"""
        v = velocity(9.0)
        assert v == pytest.approx(0.1)
        assert float(hyperbola_trace(0.0, 0.5, v, 0.0)) == pytest.approx(10.0)
        assert float(hyperbola_trace(0.0, 0.5, v, 0.5)) == pytest.approx(14.142, abs=1e-3)

    def test_hyperbola_rejects_zero_depth(self):
        """Test depth and velocity must be positive"""
        with pytest.raises(ValueError):
            hyperbola_trace(0.0, 0.0, 0.1, 0.0)


class TestRendering:
    def test_empty_scene_is_mid_gray(self):
        """Test no layers and no defects render a constant 128 image without labels"""
        sample = render_scene(SceneSpec())
        assert sample.image.shape == (96, 96)
        assert np.all(sample.image == 128)
        assert sample.annotations == ()

    def test_quantization_window_is_symmetric(self):
        """Test the window is the larger of |p1| and |p99| so zero stays on mid-gray"""
        field = np.linspace(-1.0, 3.0, 101)
        assert quantization_scale(field) == pytest.approx(2.96)
        assert quantization_scale(-field) == pytest.approx(2.96)
        assert quantization_scale(np.zeros(5)) == 0.0

    def test_cavity_apex_row(self):
        """Test the cavity column peaks at round(10 ns / 0.15 ns) = 67"""
        scene = cavity_scene()
        sample = render_scene(scene)

        assert apex_time(scene.defects[0], scene) == pytest.approx(10.0)
        assert int(np.argmax(np.abs(sample.field[:, 48]))) == 67
        assert len(sample.annotations) == 1
        assert sample.annotations[0].class_id == CLASS_NAMES.index("cavity")

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(min_value=0, max_value=2**31))
    def test_random_cavity_apex_matches_trace(self, seed):
        """Test the rendered apex sits within one sample of the analytic travel time"""
        scene = random_scene("cavity", seed, ScenePrior())
        defect = scene.defects[0]
        column = int(round(defect.x0 / scene.dx))

        contribution = defect_contribution(defect, scene)
        expected = apex_time(defect, scene) / scene.dt

        assert abs(int(np.argmax(np.abs(contribution[:, column]))) - expected) <= 1.0

    @pytest.mark.parametrize("kind", CLASS_NAMES)
    def test_random_scenes_render_inside_bounds(self, kind):
        """Test every defect kind renders with a box inside the image"""
        for seed in range(5):
            sample = render_scene(random_scene(kind, seed, ScenePrior()))
            assert sample.image.dtype == np.uint8
            assert len(sample.annotations) == 1
            assert sample.annotations[0].box.inside(96, 96)
            assert sample.annotations[0].class_id == CLASS_NAMES.index(kind)

    def test_deeper_cavity_has_wider_box(self):
        """Test a flatter, deeper hyperbola yields a wider box that covers the apex pixel"""
        shallow = cavity_scene(depth=0.2)
        deep = cavity_scene(depth=0.5)
        shallow_box = derive_boxes(shallow.defects[0], shallow)
        deep_box = derive_boxes(deep.defects[0], deep)

        assert deep_box.w > shallow_box.w
        x1, y1, x2, y2 = deep_box.corners()
        assert x1 <= 48 < x2
        assert y1 <= 67 < y2

    def test_box_threshold_must_be_fraction(self):
        """Test a threshold of 1 or more is rejected"""
        scene = cavity_scene()
        with pytest.raises(ContractError):
            derive_boxes(scene.defects[0], scene, threshold=1.0)

    def test_defect_beyond_window(self):
        """Test a defect deeper than the time window is a SceneError"""
        with pytest.raises(SceneError) as exc:
            render_scene(cavity_scene(depth=0.8))
        assert "window" in str(exc.value)

    def test_concave_needs_interface(self):
        """Test a concave defect without a layer interface is rejected"""
        scene = SceneSpec(layers=(MaterialLayer(0.0, 6.0),), defects=(DefectSpec("concave", 0.9, 0.3, 0.4),))
        with pytest.raises(SceneError):
            render_scene(scene)

    def test_same_scene_same_image(self):
        """Test rendering is a pure function of the scene"""
        scene = random_scene("crack", 42, ScenePrior())
        assert np.array_equal(render_scene(scene).image, render_scene(scene).image)

    def test_noise_raises_energy_gradient(self):
        """Test a noisy render has more gradient energy than the clean one"""
        clean = cavity_scene(noise_sigma=0.0, seed=1)
        noisy = cavity_scene(noise_sigma=6.0, seed=1)
        assert energy_gradient(render_scene(noisy).image) > energy_gradient(render_scene(clean).image)


class TestNoise:
    def test_zero_sigma_is_identity(self, rng):
        """Test sigma 0 returns the image unchanged"""
        image = rng.integers(0, 256, size=(8, 8)).astype(np.uint8)
        assert np.array_equal(add_gaussian_noise(image, 0.0, seed=3), image)

    def test_sigma_25_on_mid_gray(self):
        """Test the empirical std of sigma=25 noise on gray 128 lies in [24, 26]"""
        image = np.full((316, 317), 128, dtype=np.uint8)
        noisy = add_gaussian_noise(image, 25.0, seed=9)
        deviation = noisy.astype(np.float64) - 128.0
        assert 24.0 <= deviation.std() <= 26.0
        assert noisy.dtype == np.uint8

    def test_same_seed_same_noise(self, rng):
        """Test noise is reproducible per seed"""
        image = rng.integers(0, 256, size=(16, 16)).astype(np.uint8)
        assert np.array_equal(add_gaussian_noise(image, 10.0, 4), add_gaussian_noise(image, 10.0, 4))
        assert not np.array_equal(add_gaussian_noise(image, 10.0, 4), add_gaussian_noise(image, 10.0, 5))

    def test_negative_sigma(self):
        """Test a negative sigma is rejected"""
        with pytest.raises(ValueError):
            add_gaussian_noise(np.zeros((2, 2), dtype=np.uint8), -1.0, 0)


class TestBackgroundRemoval:
    def test_single_spike(self):
        """Test a unit spike keeps 10/11 of its value with an 11-trace window"""
        row = np.zeros((1, 31))
        row[0, 15] = 1.0
        out = background_removal(row, 11)
        assert out[0, 15] == pytest.approx(10 / 11)
        assert out[0, 14] == pytest.approx(-1 / 11)

    def test_lateral_constant_removed(self):
        """Test a laterally constant background loses more than 99% of its energy"""
        profile = ricker_wavelet(1.5, np.arange(96) * 0.15 - 3.0)
        background = np.tile(profile[:, None], (1, 96))
        out = background_removal(background, 11)
        assert np.sum(out**2) < 0.01 * np.sum(background**2)

    def test_localized_hyperbola_survives(self):
        """Test a steep hyperbola keeps at least 80% of its peak"""
        x = np.arange(64) * 0.05
        t = np.arange(96) * 0.05
        tau = hyperbola_trace(x[32], 0.1, 0.1, x)
        field = ricker_wavelet(1.5, t[:, None] - tau[None, :])
        peak = np.unravel_index(np.argmax(field), field.shape)

        out = background_removal(field, 11)

        assert out[peak] >= 0.8 * field[peak]

    def test_wide_window_subtracts_row_mean(self, rng):
        """Test a window at least as wide as the image subtracts the full row mean, and repeats are idempotent"""
        image = rng.normal(size=(5, 7))
        out = background_removal(image, 50)
        np.testing.assert_allclose(out, image - image.mean(axis=1, keepdims=True))
        np.testing.assert_allclose(background_removal(out, 50), out, atol=1e-12)

    def test_window_must_be_positive(self):
        """Test a zero window is rejected"""
        with pytest.raises(ValueError):
            background_removal(np.zeros((2, 2)), 0)


class TestShapes:
    @pytest.mark.parametrize("class_id", [0, 1, 2])
    def test_primary_shape_is_labeled(self, class_id):
        """Test the requested class appears first and every box is inside the canvas"""
        image, labels = render_shapes(class_id, seed=class_id + 10, prior=ShapesPrior())
        assert image.shape == (96, 96)
        assert labels[0].class_id == class_id
        assert all(gt.box.inside(96, 96) for gt in labels)


class TestDatasets:
    def test_manifest_counts(self):
        """Test (200, 200, 200) train counts account for 600 images in class-major order"""
        plan = DatasetPlan(train_counts=(200, 200, 200), val_counts=(0, 0, 0), test_counts=(0, 0, 0))
        splits, entries = _plan_entries(plan)

        assert splits["train"].stop - splits["train"].start == 600
        assert splits["train"].counts == (200, 200, 200)
        assert [e[2] for e in entries[:2]] == [0, 0]
        assert entries[200][2] == 1
        assert "test_weak" not in splits

    def test_empty_plan(self, tmp_path):
        """Test all-zero counts give a manifest with empty splits"""
        plan = DatasetPlan(train_counts=(0, 0, 0), val_counts=(0, 0, 0), test_counts=(0, 0, 0))
        manifest = generate_dataset(plan, tmp_path / "empty")

        assert all(info.start == info.stop for info in manifest.splits.values())
        assert read_dataset(tmp_path / "empty", "train") == []

    def test_tree_layout_and_bounds(self, tmp_path, tiny_plan):
        """Test images, labels and manifest land on disk with boxes inside the image"""
        root = tmp_path / "gpr"
        generate_dataset(tiny_plan, root)

        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["splits"]["train"]["total"] == 6
        assert manifest["class_names"] == list(CLASS_NAMES)
        assert len(list((root / "images").glob("*.pgm"))) == 12
        for split in ("train", "val", "test"):
            for item in read_dataset(root, split):
                assert item.image.shape == (96, 96)
                assert all(gt.box.inside(96, 96) for gt in item.annotations)
                assert all(gt.image_id == item.index for gt in item.annotations)

    def test_byte_identical_reruns(self, tmp_path, tiny_plan):
        """Test the same plan and seed reproduce the tree byte for byte, also with threads"""
        generate_dataset(tiny_plan, tmp_path / "a")
        generate_dataset(tiny_plan, tmp_path / "b")
        generate_dataset(tiny_plan, tmp_path / "c", threads=4)

        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "c")

    def test_weak_split(self, tmp_path):
        """Test the weak-signal test split is written when requested"""
        plan = DatasetPlan(
            train_counts=(1, 0, 0), val_counts=(0, 0, 0), test_counts=(0, 0, 0), weak_test_counts=(1, 1, 1)
        )
        manifest = generate_dataset(plan, tmp_path / "weak")
        assert manifest.splits["test_weak"].counts == (1, 1, 1)
        assert len(read_dataset(tmp_path / "weak", "test_weak")) == 3

    def test_shapes_mode(self, tmp_path):
        """Test the shapes pretraining set uses its own class names"""
        plan = DatasetPlan(train_counts=(1, 1, 1), val_counts=(0, 0, 0), test_counts=(0, 0, 0), mode="shapes")
        manifest = generate_dataset(plan, tmp_path / "shapes")
        assert manifest.class_names == SHAPE_CLASS_NAMES
        assert load_manifest(tmp_path / "shapes").mode == "shapes"

    def test_missing_dataset(self, tmp_path):
        """Test reading a directory without a manifest names it"""
        with pytest.raises(MissingArtifactError) as exc:
            read_dataset(tmp_path / "nowhere", "train")
        assert "manifest.json" in str(exc.value)

    def test_missing_image_reported(self, tmp_path, tiny_plan):
        """Test a deleted image is listed as missing"""
        root = tmp_path / "gpr"
        generate_dataset(tiny_plan, root)
        (root / "images" / "00001.pgm").unlink()
        with pytest.raises(MissingArtifactError) as exc:
            read_dataset(root, "train")
        assert "00001.pgm" in str(exc.value)

    def test_refuses_foreign_directory(self, tmp_path, tiny_plan):
        """Test a non-empty directory without a manifest is left alone"""
        root = tmp_path / "mydata"
        root.mkdir()
        (root / "thesis.txt").write_text("draft", encoding="utf-8")

        with pytest.raises(ConfigError) as exc:
            generate_dataset(tiny_plan, root)

        assert "manifest.json" in str(exc.value)
        assert (root / "thesis.txt").read_text(encoding="utf-8") == "draft"
        assert not (tmp_path / ".mydata.staging").exists()

    def test_replaces_empty_dir_and_earlier_dataset(self, tmp_path, tiny_plan):
        """Test an empty directory or a previous dataset may be overwritten"""
        root = tmp_path / "gpr"
        root.mkdir()
        generate_dataset(tiny_plan, root)
        first = tree_bytes(root)

        generate_dataset(tiny_plan, root)

        assert tree_bytes(root) == first

    def test_failed_write_cleans_staging(self, mocker, tmp_path, tiny_plan):
        """Test a sample rejected mid-write keeps the earlier dataset and drops the staging tree"""
        root = tmp_path / "gpr"
        generate_dataset(tiny_plan, root)
        before = tree_bytes(root)
        outside = (GroundTruth(BBox(200.0, 200.0, 10.0, 10.0), 0),)
        mocker.patch("synthgpr.render_entry", return_value=(np.zeros((96, 96), dtype=np.uint8), outside))

        with pytest.raises(ContractError):
            generate_dataset(tiny_plan, root)

        assert not (tmp_path / ".gpr.staging").exists()
        assert tree_bytes(root) == before

    @pytest.mark.slow
    def test_full_train_split(self, tmp_path):
        """Test a full 600-image train split renders"""
        plan = DatasetPlan(train_counts=(200, 200, 200), val_counts=(0, 0, 0), test_counts=(0, 0, 0))
        manifest = generate_dataset(plan, tmp_path / "full", threads=4)
        assert manifest.splits["train"].stop == 600
