import io

import numpy as np
import pytest
from PIL import Image

from infarctseg.errors import ConfigurationError, ShapeError
from infarctseg.overlay import BLUE, RED, OverlaySpec, pick_slice, png_bytes, render_case, render_overlay, window


def count_color(rgb, color):
    return int(np.all(rgb == np.array(color, np.uint8), axis=-1).sum())


def ct(rng=None):
    return np.linspace(-20, 100, 64).reshape(8, 8)


def test_empty_masks_grayscale():
    z = np.zeros((8, 8), np.uint8)
    rgb = render_overlay(ct(), z, z)
    assert rgb.dtype == np.uint8 and rgb.shape == (8, 8, 3)
    assert np.array_equal(rgb[..., 0], rgb[..., 1]) and np.array_equal(rgb[..., 1], rgb[..., 2])


def test_window_limits():
    g = window(np.array([0.0, 40.0, 80.0, -500.0, 500.0]), 40, 80)
    assert g.tolist() == [0, 128, 255, 0, 255]


def test_identical_masks_overlap_color():
    m = np.zeros((8, 8), np.uint8)
    m[2:5, 3:6] = 1
    rgb = render_overlay(ct(), m, m)
    spec = OverlaySpec()
    assert spec.overlap_color == (128, 0, 128)
    assert count_color(rgb, spec.overlap_color) == 9
    assert count_color(rgb, BLUE) == count_color(rgb, RED) == 0


def test_disjoint_two_pixel_masks():
    gt, pred = np.zeros((8, 8), np.uint8), np.zeros((8, 8), np.uint8)
    gt[1, 1:3] = 1
    pred[6, 4:6] = 1
    rgb = render_overlay(ct(), gt, pred)
    assert count_color(rgb, BLUE) == 2 and count_color(rgb, RED) == 2


def test_overlap_modes():
    m = np.ones((2, 2), np.uint8)
    assert count_color(render_overlay(np.zeros((2, 2)), m, m, OverlaySpec(overlap="gt-on-top")), BLUE) == 4
    assert count_color(render_overlay(np.zeros((2, 2)), m, m, OverlaySpec(overlap="pred-on-top")), RED) == 4


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        OverlaySpec(gt_color=RED, pred_color=RED)
    with pytest.raises(ConfigurationError):
        OverlaySpec(overlap="xor")
    with pytest.raises(ConfigurationError):
        OverlaySpec(window_width=0)


def test_extent_mismatch():
    with pytest.raises(ShapeError):
        render_overlay(np.zeros((4, 4)), np.zeros((4, 5)), np.zeros((4, 4)))


def test_png_deterministic_and_decodable():
    gt = np.zeros((8, 8), np.uint8)
    gt[2:4, 2:4] = 1
    a = png_bytes(render_overlay(ct(), gt, np.roll(gt, 1, axis=1)))
    b = png_bytes(render_overlay(ct(), gt, np.roll(gt, 1, axis=1)))
    assert a == b
    img = np.asarray(Image.open(io.BytesIO(a)))
    assert img.shape == (8, 8, 3)


def test_auto_slice_selection():
    gt = np.zeros((5, 4, 4), np.uint8)
    gt[3, :2] = 1
    gt[1, 0, 0] = 1
    assert pick_slice(gt) == 3
    pred = np.zeros_like(gt)
    pred[4] = 1
    assert pick_slice(np.zeros_like(gt), pred) == 4
    assert pick_slice(np.zeros_like(gt)) == 2
    k, rgb = render_case(np.zeros((5, 4, 4)), gt, pred)
    assert k == 3 and rgb.shape == (4, 4, 3)
