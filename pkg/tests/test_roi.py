import warnings

import numpy as np
import pytest
import torch

from spacepose.geometry import GeometryError, PixelCoord
from spacepose.roi import (BoundingBox, OutOfFrameWarning, RoiConfig, RoiContractError,
                           assemble_orientation_input, augment_box, bounding_box, crop_and_rescale)


@pytest.mark.parametrize("z, side", [(10, 500), (40, 125)])
def test_bounding_box_examples(z, side):
    box = bounding_box((12.5, 40.0), z, RoiConfig(k_object=5000))
    assert box.side == side
    assert box.center == (12.5, 40.0)


@pytest.mark.parametrize("z", [0, -2])
def test_bounding_box_rejects_nonpositive_depth(z):
    with pytest.raises(GeometryError):
        bounding_box((0, 0), z, RoiConfig())


def test_inverse_depth_law():
    rng = np.random.default_rng(0)
    for ko, z in zip(rng.uniform(100, 1e4, 1000), rng.uniform(5, 40, 1000)):
        box = bounding_box((0, 0), z, RoiConfig(k_object=ko))
        assert box.side * z == pytest.approx(ko, rel=1e-15)


def test_augment_box_deterministic_and_keeps_side():
    box = BoundingBox(PixelCoord(50, 60), 200)
    a = augment_box(box, 0.15, np.random.default_rng(3))
    b = augment_box(box, 0.15, np.random.default_rng(3))
    assert a == b and a.side == 200 and a.center != box.center


def test_augment_box_statistics():
    rng = np.random.default_rng(11)
    box = BoundingBox(PixelCoord(0, 0), 100)
    draws = np.array([augment_box(box, 0.15, rng).center for _ in range(10000)])
    assert np.all(np.abs(draws.std(axis=0) - 15) < 0.75)
    assert np.all(np.abs(draws.mean(axis=0)) < 0.5)


def test_crop_identity_on_full_extent():
    img = torch.rand(2, 12, 12, generator=torch.Generator().manual_seed(0))
    crop, outside = crop_and_rescale(img, BoundingBox(PixelCoord(6, 6), 12), 12)
    assert crop.shape == img.shape and not outside.any()
    assert float((crop - img).abs().max()) <= 1e-6


def test_crop_zero_pads_out_of_image():
    img = torch.ones(1, 16, 16)
    crop, _ = crop_and_rescale(img, BoundingBox(PixelCoord(0, 0), 8), 8)
    assert float(crop[0, :4, :4].abs().max()) == 0.0
    assert torch.allclose(crop[0, 4:, 4:], torch.ones(4, 4))


def test_crop_constant_image():
    img = torch.full((1, 20, 30), 0.37)
    crop, _ = crop_and_rescale(img, BoundingBox(PixelCoord(14.3, 9.1), 7.7), 16)
    assert torch.allclose(crop, torch.full_like(crop, 0.37), atol=1e-6)


def test_crop_entirely_outside_warns_and_is_zero():
    img = torch.ones(1, 10, 10)
    with pytest.warns(OutOfFrameWarning):
        crop, outside = crop_and_rescale(img, BoundingBox(PixelCoord(-50, -50), 10), 8)
    assert outside.all() and float(crop.abs().max()) == 0.0


def test_crop_commutes_with_horizontal_flip():
    gen = torch.Generator().manual_seed(4)
    rng = np.random.default_rng(4)
    for _ in range(20):
        img = torch.rand(3, 24, 31, generator=gen, dtype=torch.float64)
        u, v, s = rng.uniform(0, 31), rng.uniform(0, 24), rng.uniform(4, 20)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", OutOfFrameWarning)
            a, _ = crop_and_rescale(img, BoundingBox(PixelCoord(u, v), s), 13)
            b, _ = crop_and_rescale(torch.flip(img, [-1]), BoundingBox(PixelCoord(31 - u, v), s), 13)
        assert float((torch.flip(a, [-1]) - b).abs().max()) < 1e-5


def test_crop_gradient_flows_to_image():
    img = torch.rand(1, 1, 16, 16, requires_grad=True)
    crop, _ = crop_and_rescale(img, torch.tensor([[8.0, 8.0, 6.0]]), 8)
    crop.sum().backward()
    assert img.grad.abs().sum() > 0


def test_assemble_hc_off_matches_plain_crop():
    img = torch.rand(2, 1, 32, 32)
    boxes = torch.tensor([[10.0, 12.0, 9.0], [20.0, 5.0, 14.0]])
    cfg = RoiConfig(crop_size=16)
    a, _ = assemble_orientation_input(img, None, boxes, cfg)
    b, _ = crop_and_rescale(img, boxes, 16)
    assert a.shape == (2, 1, 16, 16)
    assert torch.equal(a, b)


def test_assemble_hc_on_channels():
    img = torch.rand(2, 1, 32, 32)
    heat = torch.rand(2, 64, 16, 16)
    cfg = RoiConfig(crop_size=16, hc_enabled=True, hc_channels=64)
    out, _ = assemble_orientation_input(img, heat, torch.tensor([[16.0, 16.0, 20.0]] * 2), cfg)
    assert out.shape == (2, 65, 16, 16)


def test_assemble_contract_errors():
    img = torch.rand(1, 1, 32, 32)
    box = torch.tensor([[16.0, 16.0, 20.0]])
    with pytest.raises(RoiContractError):
        assemble_orientation_input(img, None, box, RoiConfig(hc_enabled=True))
    with pytest.raises(RoiContractError):
        assemble_orientation_input(img, torch.rand(1, 8, 32, 32), box, RoiConfig(hc_enabled=True, hc_channels=64))
    with pytest.raises(RoiContractError):
        assemble_orientation_input(img, torch.rand(1, 8, 32, 32), box, RoiConfig(hc_enabled=False))


def test_roi_config_validation():
    with pytest.raises(ValueError):
        RoiConfig(k_object=0)
    with pytest.raises(ValueError):
        RoiConfig(crop_size=4)
