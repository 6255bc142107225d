import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flgpr.dataset import Frame, LaneSpec, SignatureParams, generate_lane
from flgpr.prescreener import (Alarm, ConfidenceImage, dp_means, dp_means_cluster, local_maxima,
                               prescreen_lane, read_alarms_csv, rx_confidence, scan_order,
                               write_alarms_csv)


def rx_direct(mag, r, c, fore, back):
    """Windowed RX statistic at one pixel by explicit masking."""
    hb, hf = back // 2, fore // 2
    bwin = mag[r - hb:r - hb + back, c - hb:c - hb + back].astype(np.float64)
    mask = np.ones_like(bwin, dtype=bool)
    mask[hb - hf:hb - hf + fore, hb - hf:hb - hf + fore] = False
    fg = bwin[~mask]
    bg = bwin[mask]
    return (fg.mean() - bg.mean()) ** 2 / bg.var()


def frame_of(mag, res=0.03, origin=(0.0, 0.0)):
    return Frame("VV", np.asarray(mag, dtype=np.complex128), res, origin)


def test_constant_frame_gives_zero():
    conf = rx_confidence(frame_of(np.full((100, 100), 3.0)))
    assert np.all(conf.values == 0)


def test_bright_block_matches_direct_window(rng):
    mag = rng.rayleigh(1.0, (100, 100))
    mag[45:55, 45:55] += 6.0
    conf = rx_confidence(frame_of(mag))
    for r, c in [(50, 50), (45, 52), (58, 41), (40, 60)]:
        ref = rx_direct(mag, r, c, 40, 80)
        assert conf.values[r, c] == pytest.approx(ref, rel=1e-12, abs=1e-12)


def test_lambda_nonnegative_and_border_zero(rng):
    conf = rx_confidence(frame_of(rng.rayleigh(1.0, (120, 130))))
    assert np.all(conf.values >= 0)
    assert np.all(conf.values[:40] == 0) and np.all(conf.values[:, :40] == 0)
    # window [r - 40, r + 40) fits for r <= h - 40
    assert np.all(conf.values[-39:] == 0) and np.all(conf.values[:, -39:] == 0)
    assert conf.values[80, 60] > 0 and conf.values[60, 90] > 0


@given(st.floats(0.01, 100.0), st.floats(-50.0, 50.0), st.integers(0, 2**31))
def test_affine_invariance(a, b, seed):
    mag = np.random.default_rng(seed).rayleigh(1.0, (90, 90)) + 2.0
    base = rx_confidence(frame_of(mag)).values
    moved = rx_confidence(frame_of(np.abs(a * mag + b))).values if b > -2 * a else None
    if moved is not None:
        np.testing.assert_allclose(moved, base, rtol=1e-9, atol=1e-10)


def test_frame_smaller_than_background_rejected():
    with pytest.raises(ValueError):
        rx_confidence(frame_of(np.ones((50, 50))))


def _conf(values, res=0.03, origin=(10.0, 20.0)):
    return ConfidenceImage(np.asarray(values, dtype=np.float64), frame_of(np.zeros_like(values), res, origin))


def test_ramp_has_no_local_maxima():
    r = np.add.outer(np.arange(20.0), np.arange(20.0))
    assert local_maxima(_conf(r)) == []


def test_single_peak_one_alarm_at_peak():
    v = np.zeros((15, 15))
    v[6, 9] = 5.0
    out = local_maxima(_conf(v))
    assert len(out) == 1
    assert out[0].confidence == 5.0
    assert out[0].utm == pytest.approx((10.0 + 9 * 0.03, 20.0 + 6 * 0.03))


def test_two_equal_peaks_three_apart():
    v = np.zeros((15, 15))
    v[7, 5] = v[7, 8] = 2.0
    out = local_maxima(_conf(v))
    assert sorted(a.utm[0] for a in out) == pytest.approx([10.15, 10.24])


def test_plateau_gives_nothing():
    v = np.zeros((10, 10))
    v[4:6, 4:6] = 1.0
    assert local_maxima(_conf(v)) == []


def test_min_confidence_filters():
    v = np.zeros((10, 10))
    v[3, 3] = 1.0
    v[6, 6] = 3.0
    assert [a.confidence for a in local_maxima(_conf(v), 2.0)] == [3.0]


def test_dpmeans_merges_close_pair():
    out = dp_means_cluster([Alarm((0.0, 0.0), 3.0), Alarm((0.5, 0.0), 4.0)], 1.0)
    assert len(out) == 1
    assert out[0].confidence == pytest.approx(5.0, abs=1e-15)
    assert out[0].cluster_members == 2
    assert out[0].utm == pytest.approx((0.25, 0.0))


def test_dpmeans_keeps_distant_pair():
    out = dp_means_cluster([Alarm((0.0, 0.0), 3.0), Alarm((2.5, 0.0), 4.0)], 1.0)
    assert sorted(a.confidence for a in out) == [3.0, 4.0]


def test_dpmeans_empty():
    assert dp_means_cluster([], 1.0) == []


@given(st.integers(0, 2**31), st.integers(1, 60), st.floats(0.3, 3.0))
def test_dpmeans_members_within_radius_and_objective_monotone(seed, n, radius):
    pts = np.random.default_rng(seed).uniform(0, 10, (n, 2))
    res = dp_means(pts, radius, max_iter=200)
    assert res.converged
    d = np.linalg.norm(pts - res.centers[res.labels], axis=1)
    assert np.all(d <= radius + 1e-9)
    assert np.all(np.diff(res.objective) <= 1e-9 * max(1.0, res.objective[0]))


def test_scan_order_descending_then_utm():
    a = [Alarm((1.0, 0.0), 2.0), Alarm((0.0, 5.0), 2.0), Alarm((3.0, 3.0), 9.0)]
    assert scan_order(a) == [2, 1, 0]


def _bright_lane(snr=30.0, **kw):
    spec = LaneSpec("X", 8.0, 3.0, 1, {"VV": (snr, snr)}, clutter_density=0.0, seed=11,
                    channels=("VV",), n_metal=0,
                    signature=SignatureParams(target_size_m=(0.4, 0.4)), **kw)
    return generate_lane(spec)


def test_high_snr_target_detected():
    lane = _bright_lane()
    alarms = prescreen_lane(lane, 0.004)
    t = np.array(lane.truth[0].utm)
    assert any(np.linalg.norm(np.array(a.utm) - t) <= 1.0 for a in alarms)
    conf = [a.confidence for a in alarms]
    assert conf == sorted(conf, reverse=True)
    assert all(lane.contains(*a.utm) for a in alarms)


def test_infinite_threshold_empty():
    lane = _bright_lane(snr=0.0)
    assert prescreen_lane(lane, math.inf) == []


def test_prescreen_deterministic():
    lane = _bright_lane()
    a = prescreen_lane(lane, 0.004)
    b = prescreen_lane(lane, 0.004)
    assert a == b


def test_alarm_csv_roundtrip(tmp_path):
    alarms = [Alarm((500000.123456789, 3600000.5), 1.25, "prescreener", 3),
              Alarm((1.0, 2.0), 0.0, "classifier", 1)]
    p = tmp_path / "a.csv"
    write_alarms_csv(alarms, p)
    assert p.read_text().splitlines()[0] == "easting_m,northing_m,confidence,source,cluster_members"
    assert read_alarms_csv(p) == alarms
