"""Landmark trajectory smoothing and similarity alignment."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from keep.errors import InvalidArgumentError, RankDeficiencyError
from keep.tensor import as_frame, bilinear_sample


def as_track(points) -> np.ndarray:
    """Landmark track as a float64 ``(T, L, 2)`` array of ``(x, y)`` pixels."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise InvalidArgumentError(f"landmark track must be (T, L, 2), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("landmark track has non-finite coordinates")
    return arr


def temporal_weights(sigma: float, radius: int) -> np.ndarray:
    n = np.arange(-radius, radius + 1, dtype=np.float64)
    return np.exp(-(n * n) / (2.0 * sigma * sigma))


def smooth_landmarks(track, sigma: float = 5.0, radius: int = 20) -> np.ndarray:
    """Gaussian low-pass along time, per landmark and coordinate.

    Weights are renormalized over the part of the window inside the clip, so
    boundary frames use a truncated window and constant tracks are fixed points.
    """
    if not sigma > 0:
        raise InvalidArgumentError(f"sigma must be positive, got {sigma}")
    if radius < 1:
        raise InvalidArgumentError(f"radius must be >= 1, got {radius}")
    pts = as_track(track)
    T = pts.shape[0]
    base = temporal_weights(sigma, radius)
    out = np.empty_like(pts)
    for t in range(T):
        lo, hi = max(0, t - radius), min(T, t + radius + 1)
        w = base[lo - t + radius : hi - t + radius]
        w = w / w.sum()
        out[t] = np.tensordot(w, pts[lo:hi], axes=(0, 0))
    return out


@dataclass(frozen=True)
class SimilarityTransform:
    """``q = scale * R(rotation) @ p + translation``."""

    scale: float = 1.0
    rotation: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not self.scale > 0:
            raise InvalidArgumentError("similarity scale must be positive")

    @property
    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return self.scale * np.array([[c, -s], [s, c]])

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.matrix.T + np.asarray(self.translation)

    def inverse_apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64) - np.asarray(self.translation)
        return p @ np.linalg.inv(self.matrix).T


def estimate_similarity(src_points, dst_points) -> SimilarityTransform:
    """Least-squares similarity (Umeyama) mapping ``src_points`` onto ``dst_points``."""
    src = np.asarray(src_points, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst_points, dtype=np.float64).reshape(-1, 2)
    if src.shape != dst.shape or len(src) < 2:
        raise InvalidArgumentError("need at least two matching point pairs")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    s0, d0 = src - mu_s, dst - mu_d
    var_s = np.mean((s0**2).sum(axis=1))
    if var_s <= 1e-300:
        raise RankDeficiencyError("source points are coincident")
    cov = d0.T @ s0 / len(src)
    u, sv, vt = np.linalg.svd(cov)
    d = np.ones(2)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[1] = -1.0
    rot = u @ np.diag(d) @ vt
    scale = float((sv * d).sum() / var_s)
    if not scale > 0:
        raise RankDeficiencyError("degenerate point configuration")
    trans = mu_d - scale * rot @ mu_s
    return SimilarityTransform(scale, math.atan2(rot[1, 0], rot[0, 0]), (float(trans[0]), float(trans[1])))


def align_frame(frame, transform: SimilarityTransform, out_shape: tuple[int, int]) -> np.ndarray:
    """Resample ``frame`` so that source pixel ``p`` lands at ``transform(p)``."""
    f = as_frame(frame)
    h, w = out_shape
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    src = transform.inverse_apply(np.stack([gx, gy], axis=-1))
    return bilinear_sample(f, src[..., 0], src[..., 1])
