import numpy as np
import pytest
import torch

from region_edit.calibration import CalibrationConfig, segment, threshold_mask
from region_edit.errors import ShapeMismatchError
from region_edit.toyzoo.models import ToySegmenter


@pytest.fixture(scope="module")
def segmenter():
    torch.manual_seed(40)
    return ToySegmenter()


def test_threshold_mask_trivial_cases():
    soft = np.full((8, 8), 255.0)
    assert (threshold_mask(soft, 150) == 1).all()
    zeros = np.zeros((8, 8))
    assert (threshold_mask(zeros, 0) == 1).all()  # inclusive rule: 0 >= 0
    assert (threshold_mask(zeros, 1) == 0).all()


def test_threshold_mask_range_check():
    soft = np.zeros((4, 4))
    with pytest.raises(ValueError):
        threshold_mask(soft, -1)
    with pytest.raises(ValueError):
        threshold_mask(soft, 256)


def test_threshold_sweep_areas_non_increasing():
    rng = np.random.default_rng(3)
    soft = rng.uniform(0, 255, size=(16, 16))
    areas = [int(threshold_mask(soft, k).sum()) for k in range(256)]
    assert all(a >= b for a, b in zip(areas, areas[1:]))


def test_threshold_monotone_containment():
    rng = np.random.default_rng(4)
    soft = rng.uniform(0, 255, size=(12, 12))
    for k1, k2 in [(0, 10), (50, 150), (100, 255)]:
        m1 = threshold_mask(soft, k1)
        m2 = threshold_mask(soft, k2)
        assert np.all(m2 <= m1)  # mask(K2) subset of mask(K1) for K1 <= K2


def test_calibration_config_defaults_and_validation():
    cfg = CalibrationConfig()
    assert cfg.extraction_layers == [3, 7, 9]
    assert cfg.embed_dim == 64 and cfg.patch_size == 16 and cfg.threshold == 150
    with pytest.raises(ValueError):
        CalibrationConfig(threshold=300)


def test_segment_shape_contract(segmenter):
    for size in (32, 64):
        gen = torch.Generator().manual_seed(size)
        img = torch.rand(size, size, 3, generator=gen) * 2 - 1
        soft = segmenter.soft_mask(img, "a red square")
        assert soft.shape == (size, size)
        assert soft.min() >= 0.0 and soft.max() <= 255.0


def test_segment_rejects_indivisible_size(segmenter):
    img = torch.zeros(30, 30, 3)
    with pytest.raises(ShapeMismatchError):
        segment(img, "a red square", segmenter.backbone, segmenter.decoder, segmenter.cfg)


def test_segment_deterministic(segmenter):
    img = torch.rand(32, 32, 3, generator=torch.Generator().manual_seed(9)) * 2 - 1
    a = segmenter.soft_mask(img, "a blue circle")
    b = segmenter.soft_mask(img, "a blue circle")
    np.testing.assert_array_equal(a, b)


def test_segment_rejects_out_of_grammar_prompt(segmenter):
    img = torch.zeros(32, 32, 3)
    with pytest.raises(ValueError):
        segmenter.soft_mask(img, "a purple hexagon")
