import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oagdefense.metrics import (
    PSNR_CAP,
    IdentityDefense,
    MeanFilterDefense,
    capped_psnr,
    mean_filter_defense,
    psnr,
    residual_map,
)
from oagdefense.tensor_core import ConfigError


def test_identical_images():
    a = np.random.default_rng(0).uniform(0, 255, (3, 8, 8))
    assert psnr(a, a) == math.inf
    assert capped_psnr(a, a) == PSNR_CAP == 99.0


def test_unit_offset_closed_form():
    a = np.random.default_rng(1).uniform(0, 254, (3, 8, 8))
    # MSE = 1, so PSNR = 10 log10(255^2)
    assert psnr(a, a + 1) == pytest.approx(20 * math.log10(255), abs=1e-12)
    assert psnr(a, a + 1) == pytest.approx(48.1308036, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 4, 4), elements=st.floats(0, 255)), arrays(np.float64, (2, 4, 4), elements=st.floats(0, 255)))
def test_psnr_symmetric(a, b):
    assert psnr(a, b) == psnr(b, a)


def test_shape_mismatch():
    with pytest.raises(ConfigError):
        psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))
    with pytest.raises(ConfigError):
        residual_map(np.zeros((3, 4, 4)), np.zeros((1, 4, 4)))


def test_residual_equal_is_zero():
    a = np.full((3, 5, 5), 7.0)
    r = residual_map(a, a)
    assert r.shape == (5, 5) and not r.any()


def test_residual_single_pixel():
    a = np.zeros((3, 5, 5))
    b = a.copy()
    b[1, 2, 3] = 4.0
    expected = np.zeros((5, 5))
    expected[2, 3] = 1.0
    np.testing.assert_array_equal(residual_map(a, b), expected)


def test_residual_channel_max_then_normalise():
    a = np.zeros((2, 1, 2))
    b = np.array([[[1.0, 0.0]], [[0.0, 4.0]]])
    np.testing.assert_array_equal(residual_map(a, b), [[0.25, 1.0]])


def test_mean_filter_constant():
    img = np.full((3, 6, 7), 42.0)
    np.testing.assert_allclose(mean_filter_defense(img, 5), img)


def test_mean_filter_hand_example():
    img = np.arange(1.0, 10.0).reshape(1, 3, 3)
    # edge replication: the corner window reads [1,1,2],[1,1,2],[4,4,5]
    expected = np.array([[21, 27, 33], [39, 45, 51], [57, 63, 69]]) / 9.0
    np.testing.assert_allclose(mean_filter_defense(img, 3)[0], expected, atol=1e-12)


@pytest.mark.parametrize("window", [0, 1, 2, 4])
def test_mean_filter_rejects_bad_window(window):
    with pytest.raises(ConfigError):
        mean_filter_defense(np.zeros((1, 4, 4)), window)
    with pytest.raises(ConfigError):
        MeanFilterDefense(window)


def test_channels_filtered_independently():
    img = np.zeros((2, 5, 5))
    img[0, 2, 2] = 9.0
    out = mean_filter_defense(img, 3)
    assert not out[1].any()
    assert out[0, 1:4, 1:4] == pytest.approx(np.ones((3, 3)))


def test_defense_wrappers():
    img = np.random.default_rng(2).uniform(0, 255, (3, 6, 6))
    np.testing.assert_array_equal(IdentityDefense()(img, 4), img)
    np.testing.assert_array_equal(MeanFilterDefense(3)(img), mean_filter_defense(img, 3))
    assert MeanFilterDefense(5).describe() == {"defense": "mean_filter", "window": 5}
