import pytest
import sys
import os

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from detector import DetectorSpec
from gan import GanSpec
from synthgpr import DatasetPlan, LabeledImage, render_entry
from tests.fixtures.sample_configs import TINY_CONFIG


@pytest.fixture
def rng():
    """Seeded generator so numeric tests are repeatable"""
    return np.random.default_rng(1234)


@pytest.fixture
def small_detector_spec():
    """Two-stage MCGA detector on 32x32 inputs: grid 8x8, neck 16x16"""
    return DetectorSpec(
        input_size=(32, 32),
        stage_channels=(8, 16),
        stride=4,
        neck_channels=8,
        gam_reduction=4,
        gam_kernel=3,
    )


@pytest.fixture
def tiny_detector_spec():
    """Detector sized for the default 96x96 B-scans with very few channels"""
    return DetectorSpec(
        stage_channels=(4, 8),
        stride=4,
        neck_channels=8,
        gam_reduction=2,
        gam_kernel=3,
    )


@pytest.fixture
def tiny_gan_spec():
    return GanSpec(z_dim=8, image_size=32, base_channels=4, seed=3)


@pytest.fixture
def tiny_plan():
    """Two images per class in every split"""
    return DatasetPlan(train_counts=(2, 2, 2), val_counts=(1, 1, 1), test_counts=(1, 1, 1), seed=11)


@pytest.fixture
def labeled_items(tiny_plan):
    """Rendered training images of the tiny plan, kept in memory"""
    items = []
    index = 0
    for class_id, count in enumerate(tiny_plan.train_counts):
        for _ in range(count):
            image, labels = render_entry(tiny_plan, index, "train", class_id)
            items.append(LabeledImage(index, image, labels))
            index += 1
    return items


@pytest.fixture
def tiny_config_file(tmp_path):
    """Write the tiny experiment config under tmp_path and return its path"""
    path = tmp_path / "experiment.toml"
    path.write_text(TINY_CONFIG.format(root=tmp_path.as_posix()), encoding="utf-8")
    return path

