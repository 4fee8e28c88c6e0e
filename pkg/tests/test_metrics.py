import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff, rel_err, textured
from keep.errors import InvalidArgumentError
from keep.metrics import (
    LossWeights,
    ToyTemporalPatchGAN,
    akd,
    gan_grads,
    gan_losses,
    ids,
    l1_grad,
    l1_loss,
    l2_grad,
    l2_loss,
    perceptual_loss,
    pooled_embedder,
    psnr,
    ssim,
    stage3_composite,
    temporal_warp_error,
)
from keep.motion import warp


def checkerboard(n=32, cell=4):
    return (np.indices((n, n)).sum(axis=0) // cell % 2).astype(float)


def test_psnr_examples():
    a = textured(8, 8, 3)
    assert psnr(a, a) == 100.0
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.5)) == pytest.approx(10 * math.log10(4), abs=1e-12)
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0, abs=1e-9)
    b = textured(8, 8, 3, seed=1)
    assert psnr(a, b) == psnr(b, a)
    with pytest.raises(InvalidArgumentError):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))


def test_ssim_examples():
    a = textured(24, 24, 3, seed=2)
    assert ssim(a, a) == 1.0
    assert ssim(np.full((16, 16), 0.4), np.full((16, 16), 0.4)) == 1.0
    b = textured(24, 24, 3, seed=3)
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-9


def test_ssim_inverted_checkerboard_golden():
    a = checkerboard()
    value = ssim(a, 1 - a)
    assert value < 0
    assert value == pytest.approx(-0.8726659938747038, abs=1e-12)  # recorded golden


def test_akd_examples():
    # integer coordinates keep the (3, 4) offset exact after addition
    gt = np.random.default_rng(0).integers(-200, 200, (6, 5, 2)).astype(float)
    assert akd(gt, gt) == (0.0, 0.0)
    assert akd(gt + np.array([3.0, 4.0]), gt) == (5.0, 0.0)
    real = np.random.default_rng(0).normal(0, 20, (6, 5, 2))
    m, sd = akd(real + np.array([3.0, 4.0]), real)
    assert abs(m - 5) < 1e-12 and sd < 1e-12
    two = np.zeros((2, 1, 2))
    pred = np.array([[[5.0, 0.0]], [[0.0, 7.0]]])
    assert akd(pred, two) == (6.0, 1.0)
    with pytest.raises(InvalidArgumentError):
        akd(np.zeros((2, 1, 2)), np.zeros((3, 1, 2)))


@given(st.floats(-3, 3), st.floats(-100, 100), st.floats(-100, 100))
@settings(max_examples=30)
def test_akd_rigid_invariance(theta, tx, ty):
    rng = np.random.default_rng(1)
    gt, pred = rng.normal(0, 20, (4, 3, 2)), rng.normal(0, 20, (4, 3, 2))
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    move = lambda p: p @ rot.T + np.array([tx, ty])  # noqa: E731
    np.testing.assert_allclose(akd(move(pred), move(gt)), akd(pred, gt), atol=1e-9)


def test_ids_examples():
    frames = [textured(16, 16, 3, seed=s) for s in range(3)]
    assert ids(frames, frames) == pytest.approx((1.0, 0.0), abs=1e-12)
    other = [textured(16, 16, 3, seed=s + 10) for s in range(3)]
    assert ids(frames, other, embedder=lambda f: np.ones(4))[0] == pytest.approx(1.0)
    sims = iter([0.8, 1.0])

    def embed_pair(_frame, state={"n": 0}):
        # alternate pred/gt embeddings to hit the given cosines
        state["n"] += 1
        if state["n"] % 2:
            return np.array([1.0, 0.0])
        s = next(sims)
        return np.array([s, math.sqrt(1 - s * s)])

    m, sd = ids([0, 0], [0, 0], embedder=embed_pair)
    assert (m, sd) == pytest.approx((0.9, 0.1), abs=1e-12)
    with pytest.raises(InvalidArgumentError):
        ids(frames, frames[:2])


def test_pooled_embedder_unit_norm():
    v = pooled_embedder(textured(32, 24, 3, seed=0))
    assert v.shape == (192,)
    assert abs(np.linalg.norm(v) - 1) < 1e-6
    assert abs(np.linalg.norm(pooled_embedder(np.zeros((8, 8, 1)))) - 1) < 1e-12


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20)
def test_ids_bounds(seed):
    rng = np.random.default_rng(seed)
    a = [rng.normal(size=(8, 8, 1)) for _ in range(3)]
    b = [rng.normal(size=(8, 8, 1)) for _ in range(3)]
    m, sd = ids(a, b)
    assert -1 <= m <= 1 and sd >= 0


def test_temporal_warp_error_examples():
    f = textured(12, 12, 1)
    zero = np.zeros((12, 12, 2))
    assert temporal_warp_error([f, f, f], [zero, zero]) == 0.0
    assert temporal_warp_error([np.zeros((4, 4)), np.ones((4, 4))], [np.zeros((4, 4, 2))]) == 1.0
    flow = np.random.default_rng(0).uniform(-2, 2, (12, 12, 2))
    seq = [f]
    for _ in range(3):
        seq.append(warp(seq[-1], flow))
    assert temporal_warp_error(seq, [flow] * 3) < 1e-6
    empty = np.zeros((4, 4), dtype=np.uint8)
    assert temporal_warp_error([np.zeros((4, 4)), np.ones((4, 4))], [np.zeros((4, 4, 2))], [empty]) == 0.0
    with pytest.raises(InvalidArgumentError):
        temporal_warp_error([f, f], [])


def test_stage3_composite():
    assert stage3_composite((1, 1, 1, 1)) == pytest.approx(1.21)
    assert stage3_composite((0, 0, 0, 0)) == 0
    assert stage3_composite((3, 1, 4, 1), LossWeights(0, 0, 0, 0)) == 0
    with pytest.raises(InvalidArgumentError):
        LossWeights(l1=-1)


def test_pixel_losses_examples():
    a = textured(4, 4, 2)
    assert l1_loss(a, a) == 0 and l2_loss(a, a) == 0
    assert l1_loss(a + 0.2, a) == pytest.approx(0.2)
    assert l2_loss(a + 0.2, a) == pytest.approx(0.04)


def test_pixel_loss_gradients():
    rng = np.random.default_rng(31)
    a, b = rng.random((8, 8)), rng.random((8, 8))
    assert np.min(np.abs(a - b)) > 1e-4  # away from kinks
    assert rel_err(l1_grad(a, b), central_diff(lambda x: l1_loss(x, b), a)) < 1e-4
    assert rel_err(l2_grad(a, b), central_diff(lambda x: l2_loss(x, b), a)) < 1e-4


def test_gan_losses_examples():
    d, g = gan_losses([0.5], [0.5])
    assert d == pytest.approx(2 * math.log(2), abs=1e-12)
    assert g == pytest.approx(math.log(2), abs=1e-12)
    assert gan_losses([0.5], [0.999999])[1] == pytest.approx(1e-6, rel=1e-3)
    for bad in ([0.0], [1.0], []):
        with pytest.raises(InvalidArgumentError):
            gan_losses(bad, [0.5])


def test_gan_gradients():
    rng = np.random.default_rng(4)
    r, f = rng.uniform(0.05, 0.95, (8, 8)), rng.uniform(0.05, 0.95, (8, 8))
    g = gan_grads(r, f)
    assert rel_err(g["d_wrt_real"], central_diff(lambda x: gan_losses(x, f)[0], r)) < 1e-4
    assert rel_err(g["d_wrt_fake"], central_diff(lambda x: gan_losses(r, x)[0], f)) < 1e-4
    assert rel_err(g["g_wrt_fake"], central_diff(lambda x: gan_losses(r, x)[1], f)) < 1e-4


def test_perceptual_proxy_examples():
    w = 32
    a = textured(w, w, 1)
    assert perceptual_loss(a, a) == 0
    assert perceptual_loss(np.full((w, w), 0.2), np.full((w, w), 0.9)) == 0
    ramp = np.tile(np.arange(w) / (w - 1), (w, 1))
    s = 1 / (w - 1)
    # slopes s, 2s, 4s per pixel at scales 1, 1/2, 1/4
    assert perceptual_loss(ramp, np.full((w, w), 0.5)) == pytest.approx((s**2 + 4 * s**2 + 16 * s**2) / 3, rel=1e-12)


def test_toy_patch_gan_scores():
    gan = ToyTemporalPatchGAN(channels=3, seed=1)
    scores = gan(textured(8, 8, 3)[None].repeat(4, axis=0))
    assert scores.shape == (4, 8, 8)
    assert np.all((scores > 0) & (scores < 1))
    with pytest.raises(InvalidArgumentError):
        gan(np.zeros((2, 8, 8, 1)))
