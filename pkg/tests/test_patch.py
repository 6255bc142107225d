import numpy as np
import pytest
from hypothesis import given, strategies as st

from flgpr.dataset import Frame, Lane, LaneSpec, SignatureParams
from flgpr.patch import (ComplexPatch, OutOfLaneError, background_mask, extract_patch,
                         normalize_patch, select_frame)


def test_center_pixel_is_frame_pixel(small_lane):
    f = small_lane.frames["HH"][2]
    r, c = 120, 50
    e, n = f.pixel_to_utm(r, c)
    assert select_frame(small_lane, (e, n), "HH") is f
    p = extract_patch(small_lane, (float(e), float(n)), "HH")
    assert p.pixels.shape == (100, 100)
    assert p.pixels[50, 50] == f.pixels[r, c]
    # neighbours follow the frame grid
    assert p.pixels[40, 45] == f.pixels[r - 10, c - 5]


def test_patch_dims_near_edges(small_lane):
    (e0, e1), (n0, n1) = small_lane.bounds
    for utm in [(e0, n0), (e1 - 1e-6, n1 - 1e-6), (e0 + 0.1, n1 - 0.1)]:
        assert extract_patch(small_lane, utm, "VV").pixels.shape == (100, 100)


def test_outside_lane_rejected(small_lane):
    (e0, _), (n0, _) = small_lane.bounds
    with pytest.raises(OutOfLaneError):
        extract_patch(small_lane, (e0 - 1.0, n0 + 1.0), "VV")


def test_frame_nearest_standoff_selected():
    spec = LaneSpec("F", 4.0, 3.0, 0, clutter_density=0.0, seed=0, channels=("VV",),
                    signature=SignatureParams(origin_utm=(0.0, 0.0)))
    # two overlapping 6 m frames, centres 2 m apart; sensors 5 m behind the centres
    fa = Frame("VV", np.full((200, 100), 1 + 0j, np.complex64), 0.03, (0.0, -1.0))
    fb = Frame("VV", np.full((200, 100), 2 + 0j, np.complex64), 0.03, (0.0, 1.0))
    lane = Lane(spec, {"VV": [fa, fb]}, [])
    # fa centre at 1.985, fb centre at 3.985: a point at 2.5 is closer to fa's centre
    assert select_frame(lane, (1.0, 2.5), "VV") is fa
    assert select_frame(lane, (1.0, 3.2), "VV") is fb
    assert extract_patch(lane, (1.0, 3.2), "VV").pixels[50, 50] == 2


def test_constant_patch_degenerate():
    xp = normalize_patch(np.full((100, 100), 4.0 + 0j))
    assert xp.degenerate
    assert np.all(xp.pixels == 0)


def test_gaussian_background_standardised(rng):
    x = rng.normal(5.0, 2.0, (100, 100))
    x[25:75, 25:75] = 0.0
    xp = normalize_patch(np.abs(x))
    bg = xp.pixels[background_mask((100, 100), 50)]
    assert abs(bg.mean()) < 0.05 and abs(bg.std() - 1.0) < 0.05
    assert abs(bg.mean()) < 1e-12 and abs(bg.std() - 1.0) < 1e-12


def test_toy_4x4_direct():
    x = np.array([[1, 2, 3, 4], [5, 9, 9, 6], [7, 9, 9, 8], [10, 11, 12, 13]], dtype=float)
    bg = np.array([1, 2, 3, 4, 5, 6, 7, 8, 10, 11, 12, 13], dtype=float)
    mu = bg.sum() / 12
    sd = np.sqrt(((bg - mu) ** 2).sum() / 12)
    xp = normalize_patch(x.astype(complex), center=2)
    np.testing.assert_allclose(xp.pixels, (x - mu) / sd, rtol=0, atol=1e-12)
    assert xp.bg_mean == pytest.approx(mu, abs=1e-12)
    assert xp.bg_std == pytest.approx(sd, abs=1e-12)


@given(st.integers(0, 2**31), st.integers(-20, 20))
def test_power_of_two_scale_exact(seed, k):
    x = np.random.default_rng(seed).normal(size=(100, 100)) + 1j
    a = 2.0 ** k
    assert np.array_equal(normalize_patch(a * x).pixels, normalize_patch(x).pixels)


@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_scale_invariance(seed, a):
    x = np.random.default_rng(seed).normal(size=(100, 100)) * (1 + 1j)
    np.testing.assert_allclose(normalize_patch(a * x).pixels, normalize_patch(x).pixels,
                               rtol=1e-10, atol=1e-10)


def test_complex_patch_input(small_lane):
    p = extract_patch(small_lane, small_lane.truth[0].utm, "HH")
    assert isinstance(p, ComplexPatch)
    xp = normalize_patch(p)
    assert xp.pixels.dtype == np.float64 and not xp.degenerate
