"""Temporal decode checks against brute-force loop oracles plus the
slice-then-evaluate identity that underpins the render fast path."""

import math

import numpy as np
import pytest

from voxvid import hh, temporal


def matvec_oracle(mat, vec):
    out = np.zeros(mat.shape[0])
    for i in range(mat.shape[0]):
        s = 0.0
        for j in range(mat.shape[1]):
            s += float(mat[i, j]) * float(vec[j])
        out[i] = s
    return out


@pytest.fixture
def bases():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(12, 7))
    b = rng.normal(size=(12, 7))
    return temporal.TemporalBases(a, b)


def test_zero_weights_zero_density(bases):
    np.testing.assert_array_equal(temporal.decode_density(bases, np.zeros(7)), np.zeros(12))


def test_identity_basis_selection():
    eye = np.eye(8, dtype=np.float32)
    bases = temporal.TemporalBases(eye, eye)
    out = temporal.decode_density(bases, np.eye(8)[0])
    np.testing.assert_array_equal(out, np.eye(8)[0])


def test_density_matches_loop_oracle(bases):
    rng = np.random.default_rng(4)
    for _ in range(20):
        w = rng.normal(size=7)
        expect = np.maximum(0.0, matvec_oracle(bases.a, w))
        np.testing.assert_allclose(temporal.decode_density(bases, w), expect, atol=1e-12)


def test_density_non_negative(bases):
    rng = np.random.default_rng(5)
    for _ in range(50):
        out = temporal.decode_density(bases, rng.normal(size=7) * 10)
        assert (out >= 0).all()


def test_hyper_angle_zero_weights_gives_half_pi(bases):
    out = temporal.decode_hyper_angle(bases, np.zeros(7))
    np.testing.assert_allclose(out, np.full(12, math.pi / 2), atol=1e-15)


def test_hyper_angle_saturation():
    ones = np.ones((4, 1), dtype=np.float32)
    bases = temporal.TemporalBases(ones, ones)
    hi = temporal.decode_hyper_angle(bases, np.array([30.0]))
    lo = temporal.decode_hyper_angle(bases, np.array([-30.0]))
    np.testing.assert_allclose(hi, math.pi, atol=1e-12)
    np.testing.assert_allclose(lo, 0.0, atol=1e-12)
    # strictly interior while the sigmoid is still resolvable in float64
    assert (hi < math.pi).all() and (lo > 0.0).all()


def test_hyper_angle_matches_loop_oracle(bases):
    rng = np.random.default_rng(6)
    for _ in range(20):
        w = rng.normal(size=7)
        raw = matvec_oracle(bases.b, w)
        expect = math.pi / (1.0 + np.exp(-raw))
        np.testing.assert_allclose(temporal.decode_hyper_angle(bases, w), expect, atol=1e-12)


def test_shape_mismatch_raises(bases):
    with pytest.raises(ValueError, match="w_sigma"):
        temporal.decode_density(bases, np.zeros(5))
    with pytest.raises(ValueError, match="w_gamma"):
        temporal.decode_hyper_angle(bases, np.zeros(9))


# ---------------------------------------------------------------------------
# color decode


def test_constant_color_from_dc_row():
    w = np.zeros((14, 3))
    w[0] = [1.0, -0.5, 2.0]
    vals = [
        temporal.decode_color(w, g, t, p)
        for (g, t, p) in [(0.3, 0.1, 0.2), (2.0, 1.5, 4.0), (1.0, 3.0, 5.5)]
    ]
    for v in vals[1:]:
        np.testing.assert_allclose(v, vals[0], atol=1e-13)


def test_zero_weights_mid_gray():
    np.testing.assert_allclose(
        temporal.decode_color(np.zeros((14, 3)), 1.0, 0.5, 0.5), [0.5, 0.5, 0.5], atol=1e-15
    )


def test_color_matches_brute_force_sum():
    rng = np.random.default_rng(8)
    w = rng.normal(size=(14, 3))
    idx = hh.index_list(2)
    for _ in range(100):
        g = rng.uniform(0, math.pi)
        t = rng.uniform(0, math.pi)
        p = rng.uniform(0, 2 * math.pi)
        expect = np.zeros(3)
        for k, i in enumerate(idx):
            expect += w[k] * hh.real_hh(i, hh.HyperDirection(t, p, g))
        got = temporal.decode_color(w, g, t, p, apply_sigmoid=False)
        np.testing.assert_allclose(got, expect, atol=1e-12)


# ---------------------------------------------------------------------------
# slicing


def test_slice_shape():
    q = temporal.slice_sh(np.zeros((14, 3)), 1.0)
    assert q.shape == (9, 3)


def test_slice_identity_against_decode():
    rng = np.random.default_rng(9)
    w = rng.normal(size=(14, 3))
    for _ in range(1000):
        g = rng.uniform(0, math.pi)
        t = rng.uniform(0, math.pi)
        p = rng.uniform(0, 2 * math.pi)
        q = temporal.slice_sh(w, g)
        via_slice = np.array([hh.sh_eval(q[:, ch], t, p) for ch in range(3)])
        direct = temporal.decode_color(w, g, t, p, apply_sigmoid=False)
        np.testing.assert_allclose(via_slice, direct, atol=1e-12)


def test_slice_at_gamma_zero_keeps_only_l0():
    rng = np.random.default_rng(10)
    w = rng.normal(size=(14, 3))
    q = temporal.slice_sh(w, 0.0)
    assert np.abs(q[1:]).max() == 0.0  # rows with l >= 1 vanish
    assert np.abs(q[0]).max() > 0.0


# ---------------------------------------------------------------------------
# jacobians and payload bookkeeping


def test_decode_jacobians_match_finite_differences(bases):
    rng = np.random.default_rng(11)
    w = rng.normal(size=7)
    h = 1e-5
    jac_d = temporal.decode_density_jacobian(bases, w)
    jac_g = temporal.decode_hyper_angle_jacobian(bases, w)
    for j in range(7):
        e = np.zeros(7)
        e[j] = h
        fd_d = (temporal.decode_density(bases, w + e) - temporal.decode_density(bases, w - e)) / (2 * h)
        fd_g = (temporal.decode_hyper_angle(bases, w + e) - temporal.decode_hyper_angle(bases, w - e)) / (2 * h)
        np.testing.assert_allclose(jac_d[:, j], fd_d, atol=1e-6)
        np.testing.assert_allclose(jac_g[:, j], fd_g, atol=1e-6)


def test_payload_length_104_at_paper_sizes():
    assert temporal.payload_length(31, 14) == 104
    assert temporal.payload_length(31, 14, with_edit=True) == 109
    cv = temporal.CoefficientVector(np.zeros(31), np.zeros(31), np.zeros((14, 3)))
    assert cv.payload_length == 104


def test_edit_channel_validation():
    with pytest.raises(ValueError):
        temporal.EditChannels(target_rgb=(1.5, 0, 0), time_range=(0, 3))
    with pytest.raises(ValueError):
        temporal.EditChannels(target_rgb=(0.5, 0, 0), time_range=(0, 3), target_density=-1.0)
    e = temporal.EditChannels(target_rgb=(0.5, 0.2, 0.1), time_range=(4, 2))
    assert not e.active


def test_bump_bases_overcomplete_allowed():
    tb = temporal.make_bump_bases(16, 31)
    assert tb.frames == 16 and tb.count == 31
    assert (tb.a[:, 0] == 1.0).all()


def test_track_value_modes():
    track = np.array([0.0, 1.0, 4.0])
    assert temporal.track_value(track, 1.4, "nearest") == 1.0
    assert temporal.track_value(track, 1.5, "linear") == pytest.approx(2.5)
    assert temporal.track_value(track, -3.0) == 0.0
    with pytest.raises(ValueError):
        temporal.track_value(track, 1.0, "cubic")
