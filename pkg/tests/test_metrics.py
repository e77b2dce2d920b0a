import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from skimage.metrics import structural_similarity

from illumopt.metrics import (
    BaselineKind,
    avg_spatial_freq_power,
    mse,
    radial_bins,
    relative_mse,
    ssim,
    standard_pattern,
)
from illumopt.optics import LedArray, LedClass, Pupil, classify_led, led_spec

FULL = LedArray(rows=15, cols=15, channels=(632e-9, 540e-9, 480e-9), pitch=4e-3, distance=80e-3)
C1, C2 = 0.01**2, 0.03**2


# -- baselines --------------------------------------------------------------------

def test_center_has_three_weights():
    p = standard_pattern("center", FULL, Pupil(0.085))
    nz = np.flatnonzero(p.weights)
    assert nz.size == 3
    assert all(FULL.unravel(i)[:2] == (7, 7) for i in nz)


def test_all_lights_everything():
    assert np.count_nonzero(standard_pattern("all", FULL, Pupil(0.085)).weights) == 675


def test_dc_antisymmetric_bright_field_only():
    pupil = Pupil(0.085)
    p = standard_pattern("dc", FULL, pupil)
    assert p.weights.sum() == 0
    for i in np.flatnonzero(p.weights):
        assert classify_led(led_spec(FULL, i), pupil) is LedClass.BRIGHT_FIELD
        row, col, _ = FULL.unravel(i)
        assert p.weights[i] == (1.0 if col < 7 else -1.0)
    # inner 3x3 minus the center column, three colors
    assert np.count_nonzero(p.weights) == 18


def test_offaxis_is_four_mm_out():
    p = standard_pattern("offaxis", FULL, Pupil(0.085))
    nz = np.flatnonzero(p.weights)
    assert nz.size == 3
    for i in nz:
        led = led_spec(FULL, i)
        assert math.degrees(led.angle) == pytest.approx(2.862, abs=1e-3)


def test_random_is_seeded_uniform():
    a = standard_pattern(BaselineKind("random", 3), FULL, Pupil(0.085))
    b = standard_pattern(BaselineKind("random", 3), FULL, Pupil(0.085))
    np.testing.assert_array_equal(a.weights, b.weights)
    assert 0 <= a.weights.min() and a.weights.max() <= 1
    with pytest.raises(ValueError):
        BaselineKind("ring")


# -- mse ------------------------------------------------------------------------------

def test_mse_basics():
    x = np.random.default_rng(0).random((5, 7))
    assert mse(x, x) == 0
    assert mse(np.zeros((3, 3)), np.ones((3, 3))) == 1
    y = np.random.default_rng(1).random((5, 7))
    acc = 0.0
    for i in range(5):
        for j in range(7):
            acc += (x[i, j] - y[i, j]) ** 2
    assert mse(x, y) == pytest.approx(acc / 35, rel=1e-12)
    assert mse(x, y) == mse(y, x)
    with pytest.raises(ValueError):
        mse(x, y.T)


# -- ssim ------------------------------------------------------------------------------

def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(2)
    a, b = rng.random((32, 32)), rng.random((32, 32))
    assert abs(ssim(a, a) - 1) < 1e-9
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12
    assert -1 <= ssim(a, b) <= 1


def test_ssim_constant_closed_form():
    mu1, mu2 = 0.5, 0.6
    expected = (2 * mu1 * mu2 + C1) / (mu1**2 + mu2**2 + C1)
    assert ssim(np.full((16, 16), mu1), np.full((16, 16), mu2)) == pytest.approx(expected, abs=1e-9)


def test_ssim_matches_reference_implementation():
    rng = np.random.default_rng(3)
    a = rng.random((40, 40))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    ref = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-7)


def test_ssim_affine_constant_images():
    # for constant images only the luminance term survives
    for alpha, beta in [(0.5, 0.1), (2.0, -0.3)]:
        m1, m2 = alpha * 0.3 + beta, alpha * 0.4 + beta
        expected = (2 * m1 * m2 + C1) / (m1**2 + m2**2 + C1)
        assert ssim(np.full((12, 12), m1), np.full((12, 12), m2)) == pytest.approx(expected, abs=1e-12)


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.ones((8, 8)), np.ones((8, 8)))
    with pytest.raises(ValueError):
        ssim(np.ones((12, 12)), np.ones((12, 13)))


# -- relative performance -------------------------------------------------------------

def test_relative_mse():
    assert relative_mse([0.04, 0.02, 0.09], 0.01) == pytest.approx(2.0)
    assert relative_mse({"a": 0.5}, 0.5) == 1.0
    assert relative_mse([0.1, 0.2], 0.3) < 1
    assert relative_mse([0.1], 0.0) == math.inf
    with pytest.raises(ValueError):
        relative_mse([], 0.1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1e-6, 10), min_size=1, max_size=6), st.floats(1e-6, 10), st.floats(1e-3, 1e3))
def test_relative_mse_scale_invariant(standard, learned, c):
    assert relative_mse([c * s for s in standard], c * learned) == pytest.approx(relative_mse(standard, learned),
                                                                                  rel=1e-12)


# -- spectrum -----------------------------------------------------------------------------

def test_delta_gives_flat_spectrum():
    n = 16
    img = np.zeros((n, n))
    img[0, 0] = 1
    profile, moment = avg_spatial_freq_power([img])
    radius = radial_bins(n)
    counts = np.bincount(radius.ravel())
    np.testing.assert_allclose(profile, counts, atol=1e-12)
    brute = sum(radius[i, j] for i in range(n) for j in range(n)) / n**2
    assert moment == pytest.approx(brute, rel=1e-12)


@pytest.mark.parametrize("kx,ky", [(5, 0), (0, 9), (3, 4), (6, 8)])
def test_sinusoid_moment(kx, ky):
    n = 32
    y, x = np.indices((n, n))
    img = np.cos(2 * np.pi * (kx * x + ky * y) / n) + 0.7
    _, moment = avg_spatial_freq_power([img], exclude_dc=True)
    assert abs(moment - math.hypot(kx, ky)) <= 1


def test_energy_conservation():
    rng = np.random.default_rng(4)
    imgs = [rng.random((24, 24)) for _ in range(3)]
    profile, _ = avg_spatial_freq_power(imgs)
    # Parseval: sum |F|^2 = n^2 sum |x|^2
    total = np.mean([24**2 * np.sum(im**2) for im in imgs])
    assert math.fsum(profile) == pytest.approx(total, rel=1e-9)


def test_constant_without_dc_has_zero_moment():
    profile, moment = avg_spatial_freq_power([np.full((8, 8), 3.0)], exclude_dc=True)
    assert moment == 0.0
    assert np.allclose(profile, 0)
    with pytest.raises(ValueError):
        avg_spatial_freq_power([])
