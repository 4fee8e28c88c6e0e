import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import textured
from keep.alignment import SimilarityTransform, align_frame, estimate_similarity, smooth_landmarks
from keep.errors import InvalidArgumentError, RankDeficiencyError


def second_difference_energy(track):
    return float(np.mean(np.diff(track, n=2, axis=0) ** 2))


def test_constant_track_unchanged():
    track = np.broadcast_to(np.array([[3.5, -2.0], [100.25, 7.0]]), (50, 2, 2))
    assert np.max(np.abs(smooth_landmarks(track) - track)) < 1e-12


def test_linear_track_interior_unchanged():
    t = np.arange(100, dtype=float)
    track = np.stack([2.5 * t + 1, -0.75 * t + 40], axis=-1)[:, None, :]
    out = smooth_landmarks(track, 5, 20)
    assert np.max(np.abs(out[20:80] - track[20:80])) < 1e-9


def test_noisy_sinusoid_smoothed():
    rng = np.random.default_rng(0)
    t = np.arange(200)
    clean = np.stack([50 + 10 * np.sin(2 * np.pi * t / 100), 80 + 5 * np.cos(2 * np.pi * t / 70)], axis=-1)
    noisy = (clean + rng.normal(0, 1.5, clean.shape))[:, None, :]
    out = smooth_landmarks(noisy, 5, 20)
    assert second_difference_energy(out) < second_difference_energy(noisy)


def test_smoothing_argument_checks():
    track = np.zeros((5, 1, 2))
    with pytest.raises(InvalidArgumentError):
        smooth_landmarks(track, sigma=0)
    with pytest.raises(InvalidArgumentError):
        smooth_landmarks(track, radius=0)
    with pytest.raises(InvalidArgumentError):
        smooth_landmarks(np.full((5, 1, 2), np.nan))


@given(st.integers(0, 2**32 - 1), st.floats(-500, 500), st.floats(-500, 500))
@settings(max_examples=30)
def test_smoothing_commutes_with_translation(seed, cx, cy):
    track = np.random.default_rng(seed).normal(0, 10, (30, 3, 2))
    c = np.array([cx, cy])
    np.testing.assert_allclose(smooth_landmarks(track + c), smooth_landmarks(track) + c, rtol=0, atol=1e-9)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30)
def test_smoothing_does_not_increase_variance(seed):
    track = np.random.default_rng(seed).normal(0, 10, (40, 2, 2))
    out = smooth_landmarks(track, 3, 10)
    assert np.all(out.var(axis=0) <= track.var(axis=0) + 1e-9)


def test_similarity_identity():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
    tr = estimate_similarity(pts, pts)
    assert tr.scale == pytest.approx(1.0)
    assert tr.rotation == pytest.approx(0.0, abs=1e-12)
    assert tr.translation == pytest.approx((0.0, 0.0), abs=1e-12)


def test_similarity_rotation_quarter_turn():
    src = np.array([[1.0, 0.0], [0.0, 2.0], [-3.0, 1.0]])
    dst = src @ np.array([[0.0, -1.0], [1.0, 0.0]]).T
    tr = estimate_similarity(src, dst)
    assert abs(tr.rotation - math.pi / 2) < 1e-9
    assert abs(tr.scale - 1) < 1e-9
    assert np.allclose(tr.translation, 0, atol=1e-9)


def test_similarity_scale_and_shift():
    src = np.array([[0.0, 0.0], [4.0, 1.0], [2.0, 5.0], [-1.0, 3.0]])
    tr = estimate_similarity(src, 2 * src + np.array([5.0, -3.0]))
    assert tr.scale == pytest.approx(2.0, abs=1e-12)
    assert tr.rotation == pytest.approx(0.0, abs=1e-12)
    assert tr.translation == pytest.approx((5.0, -3.0), abs=1e-12)


@given(st.floats(0.2, 5), st.floats(-3, 3), st.floats(-50, 50), st.floats(-50, 50), st.integers(0, 2**32 - 1))
@settings(max_examples=40)
def test_similarity_recovers_exact_pairs(scale, rot, tx, ty, seed):
    src = np.random.default_rng(seed).normal(0, 10, (6, 2))
    truth = SimilarityTransform(scale, rot, (tx, ty))
    est = estimate_similarity(src, truth.apply(src))
    np.testing.assert_allclose(est.apply(src), truth.apply(src), atol=1e-7)


def test_similarity_degenerate():
    with pytest.raises(RankDeficiencyError):
        estimate_similarity(np.ones((3, 2)), np.zeros((3, 2)))
    with pytest.raises(InvalidArgumentError):
        estimate_similarity(np.ones((1, 2)), np.ones((1, 2)))
    with pytest.raises(InvalidArgumentError):
        SimilarityTransform(scale=0.0)


def test_align_frame_examples():
    f = textured(20, 24, 3, seed=4)
    assert align_frame(f, SimilarityTransform(), (20, 24)).tobytes() == f.tobytes()
    shifted = align_frame(f, SimilarityTransform(translation=(3.0, 2.0)), (20, 24))
    np.testing.assert_array_equal(shifted[2:, 3:], f[:-2, :-3])
    const = align_frame(np.full((10, 10, 1), 0.3), SimilarityTransform(1.7, 0.4, (2.0, -5.0)), (12, 9))
    assert np.all(const == 0.3)
