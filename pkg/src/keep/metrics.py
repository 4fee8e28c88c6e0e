"""Fidelity, identity and pose metrics, the temporal warping error, and the
training losses with analytic gradients.

Standard deviations over frames are population (``ddof=0``) values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from keep.alignment import as_track
from keep.errors import InvalidArgumentError
from keep.motion import warp
from keep.tensor import SeededRng, as_frame, gaussian_kernel, resample, sigmoid

PSNR_CAP = 100.0
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _pair(a, b):
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise InvalidArgumentError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


# ---------------------------------------------------------------------------
# fidelity


def psnr(a, b) -> float:
    x, y = _pair(a, b)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _ssim_filter(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    return np.stack([ndimage.correlate(img[:, :, c], window, mode="mirror") for c in range(img.shape[2])], axis=2)


def ssim_map(a, b) -> np.ndarray:
    x, y = _pair(as_frame(a), as_frame(b))
    win = gaussian_kernel(1.5, radius=5)  # 11x11
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mx, my = _ssim_filter(x, win), _ssim_filter(y, win)
    sxx = _ssim_filter(x * x, win) - mx * mx
    syy = _ssim_filter(y * y, win) - my * my
    sxy = _ssim_filter(x * y, win) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim(a, b) -> float:
    """Single-scale SSIM (11x11 Gaussian window, sigma 1.5, dynamic range 1)."""
    return float(np.mean(ssim_map(a, b)))


# ---------------------------------------------------------------------------
# landmarks and identity


def akd(pred, gt) -> tuple[float, float]:
    """Mean landmark distance and its standard deviation over frames."""
    p, g = as_track(pred), as_track(gt)
    if p.shape != g.shape:
        raise InvalidArgumentError(f"track shapes differ: {p.shape} vs {g.shape}")
    per_frame = akd_per_frame(p, g)
    return float(per_frame.mean()), float(per_frame.std())


def akd_per_frame(pred, gt) -> np.ndarray:
    p, g = as_track(pred), as_track(gt)
    return np.sqrt(((p - g) ** 2).sum(axis=2)).mean(axis=1)


def adaptive_avg_pool(frame, out_h: int, out_w: int) -> np.ndarray:
    f = as_frame(frame)
    h, w, c = f.shape
    out = np.empty((out_h, out_w, c))
    for i in range(out_h):
        y0, y1 = (i * h) // out_h, -((-(i + 1) * h) // out_h)
        for j in range(out_w):
            x0, x1 = (j * w) // out_w, -((-(j + 1) * w) // out_w)
            out[i, j] = f[y0:y1, x0:x1].mean(axis=(0, 1))
    return out


def pooled_embedder(frame) -> np.ndarray:
    """Default identity embedding: 8x8 average-pooled grid, unit-normalized.

    Stands in for a face-recognition network. An all-zero frame maps to the
    uniform unit vector.
    """
    v = adaptive_avg_pool(frame, 8, 8).ravel()
    n = np.linalg.norm(v)
    if n == 0.0:
        return np.full(v.size, 1.0 / math.sqrt(v.size))
    return v / n


def ids_per_frame(pred_frames, gt_frames, embedder: Callable | None = None) -> np.ndarray:
    if len(pred_frames) != len(gt_frames):
        raise InvalidArgumentError(f"sequence lengths differ: {len(pred_frames)} vs {len(gt_frames)}")
    embed = embedder or pooled_embedder
    sims = []
    for p, g in zip(pred_frames, gt_frames):
        ep, eg = np.asarray(embed(p), dtype=np.float64), np.asarray(embed(g), dtype=np.float64)
        cos = float(ep @ eg / (np.linalg.norm(ep) * np.linalg.norm(eg)))
        sims.append(min(1.0, max(-1.0, cos)))
    return np.asarray(sims)


def ids(pred_frames, gt_frames, embedder: Callable | None = None) -> tuple[float, float]:
    s = ids_per_frame(pred_frames, gt_frames, embedder)
    return float(s.mean()), float(s.std())


# ---------------------------------------------------------------------------
# temporal consistency


def warp_error_terms(frames: Sequence, flows: Sequence, masks: Sequence | None = None) -> list[float]:
    if len(flows) != len(frames) - 1 or (masks is not None and len(masks) != len(flows)):
        raise InvalidArgumentError("need T frames and T-1 flows/masks")
    terms = []
    for t in range(1, len(frames)):
        cur = as_frame(frames[t])
        resid = np.abs(cur - warp(as_frame(frames[t - 1]), flows[t - 1]))
        if masks is None:
            m = np.ones(cur.shape[:2], dtype=bool)
        else:
            m = np.asarray(masks[t - 1]).astype(bool)
        if not m.any():
            terms.append(0.0)
            continue
        terms.append(float(resid[m].mean()))
    return terms


def temporal_warp_error(frames: Sequence, flows: Sequence, masks: Sequence | None = None) -> float:
    """Sum over t >= 2 of the masked mean ``|y_t - warp(y_{t-1}, flow)|``."""
    return float(sum(warp_error_terms(frames, flows, masks)))


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class LossWeights:
    l1: float = 0.01
    per: float = 1.0
    adv: float = 0.1
    temp: float = 0.1

    def __post_init__(self):
        if min(self.l1, self.per, self.adv, self.temp) < 0:
            raise InvalidArgumentError("loss weights must be non-negative")


def stage3_composite(parts: Sequence[float], weights: LossWeights | None = None) -> float:
    w = weights or LossWeights()
    l1, l_per, l_adv, l_temp = parts
    return w.l1 * l1 + w.per * l_per + w.adv * l_adv + w.temp * l_temp


def l1_loss(a, b) -> float:
    x, y = _pair(a, b)
    return float(np.mean(np.abs(x - y)))


def l1_grad(a, b) -> np.ndarray:
    """Gradient of ``l1_loss`` with respect to ``a`` (zero at the kink)."""
    x, y = _pair(a, b)
    return np.sign(x - y) / x.size


def l2_loss(a, b) -> float:
    x, y = _pair(a, b)
    return float(np.mean((x - y) ** 2))


def l2_grad(a, b) -> np.ndarray:
    x, y = _pair(a, b)
    return 2.0 * (x - y) / x.size


def _scores(s, name):
    arr = np.asarray(s, dtype=np.float64)
    if arr.size == 0 or np.any(arr <= 0.0) or np.any(arr >= 1.0):
        raise InvalidArgumentError(f"{name} scores must lie in (0, 1)")
    return arr


def gan_losses(real_scores, fake_scores) -> tuple[float, float]:
    """Discriminator and generator log losses on probability scores.

    ``d = -mean log D(real) - mean log(1 - D(fake))``, ``g = -mean log D(fake)``.
    """
    r, f = _scores(real_scores, "real"), _scores(fake_scores, "fake")
    d_loss = -float(np.mean(np.log(r))) - float(np.mean(np.log1p(-f)))
    g_loss = -float(np.mean(np.log(f)))
    return d_loss, g_loss


def gan_grads(real_scores, fake_scores) -> dict[str, np.ndarray]:
    r, f = _scores(real_scores, "real"), _scores(fake_scores, "fake")
    return {
        "d_wrt_real": -1.0 / (r * r.size),
        "d_wrt_fake": 1.0 / ((1.0 - f) * f.size),
        "g_wrt_fake": -1.0 / (f * f.size),
    }


def gradient_features(image) -> list[np.ndarray]:
    """Forward differences ``dx``, ``dy`` at scales 1, 1/2 and 1/4."""
    img = as_frame(image)
    feats = []
    for factor in (1, 0.5, 0.25):
        s = img if factor == 1 else resample(img, factor, "bilinear")
        feats.append(np.diff(s, axis=1))
        feats.append(np.diff(s, axis=0))
    return feats


def perceptual_loss(a, b, feature_hook: Callable | None = None) -> float:
    """Perceptual proxy: per-scale feature distance averaged over scales.

    Features come in ``(dx, dy)`` pairs per scale; a scale contributes
    ``mean((dxa-dxb)^2) + mean((dya-dyb)^2)``. Not LPIPS.
    """
    x, y = _pair(as_frame(a), as_frame(b))
    hook = feature_hook or gradient_features
    fa, fb = hook(x), hook(y)
    terms = [float(np.mean((p - q) ** 2)) if p.size else 0.0 for p, q in zip(fa, fb)]
    per_scale = [terms[i] + terms[i + 1] for i in range(0, len(terms), 2)]
    return float(np.mean(per_scale))


class ToyTemporalPatchGAN:
    """Seeded 3x3x3 convolution over ``(T, H, W, C)`` clips followed by a logistic.

    Produces patch probabilities for shape exercises only; it is never trained.
    """

    def __init__(self, channels: int = 3, seed: int = 0):
        rng = SeededRng(seed)
        self.weight = rng.normal((3, 3, 3, channels), 1.0 / math.sqrt(27 * channels))
        self.bias = 0.0

    def __call__(self, clip) -> np.ndarray:
        x = np.asarray(clip, dtype=np.float64)
        if x.ndim != 4 or x.shape[3] != self.weight.shape[3]:
            raise InvalidArgumentError(f"clip must be (T, H, W, {self.weight.shape[3]})")
        resp = sum(
            ndimage.correlate(x[..., c], self.weight[..., c], mode="nearest") for c in range(x.shape[3])
        )
        return np.clip(sigmoid(resp + self.bias), 1e-6, 1 - 1e-6)
