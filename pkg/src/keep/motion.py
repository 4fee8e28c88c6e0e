"""Block-matching flow, backward warping and forward-backward validity masks.

Flow convention: ``flow[y, x] = (u, v)`` means the content at ``(x, y)`` in
the target frame comes from ``(x + u, y + v)`` in the source frame, so
``warp(source, flow)`` predicts the target.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from keep.errors import InvalidArgumentError
from keep.tensor import as_frame, bilinear_sample, resize

DEFAULT_BLOCK = 8
DEFAULT_SEARCH_RADIUS = 8
FB_ALPHA = 0.01
FB_BETA = 0.5


def _check_flow(flow, shape=None) -> np.ndarray:
    f = np.asarray(flow, dtype=np.float64)
    if f.ndim != 3 or f.shape[2] != 2:
        raise InvalidArgumentError(f"flow must be (H, W, 2), got {f.shape}")
    if shape is not None and f.shape[:2] != tuple(shape):
        raise InvalidArgumentError(f"flow shape {f.shape[:2]} does not match frame {tuple(shape)}")
    return f


def _candidates(radius: int) -> list[tuple[int, int]]:
    # tie-break order: smallest magnitude, then u, then v
    offsets = [(u, v) for u in range(-radius, radius + 1) for v in range(-radius, radius + 1)]
    return sorted(offsets, key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1]))


def _block_sums(err: np.ndarray, block: int) -> np.ndarray:
    """Per-tile sums over the last two axes; partial edge tiles sum what they have."""
    *lead, h, w = err.shape
    gh, gw = -(-h // block), -(-w // block)
    padded = np.zeros((*lead, gh * block, gw * block))
    padded[..., :h, :w] = err
    return padded.reshape(*lead, gh, block, gw, block).sum(axis=(-3, -1))


def estimate_flow_block_matching(
    prev,
    next,
    block: int = DEFAULT_BLOCK,
    search_radius: int = DEFAULT_SEARCH_RADIUS,
    threads: int = 1,
) -> np.ndarray:
    """Integer block matching by sum of absolute differences.

    Each ``block``-sized tile of ``next`` is matched against ``prev`` shifted
    by every integer displacement within ``search_radius``; candidates outside
    ``prev`` read border-clamped pixels. The per-block field is bilinearly
    interpolated to pixels, anchored at block centers.
    """
    a = as_frame(prev)
    b = as_frame(next)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if block < 4:
        raise InvalidArgumentError("block must be >= 4")
    if search_radius < 1:
        raise InvalidArgumentError("search_radius must be >= 1")
    h, w = a.shape[:2]
    r = search_radius
    src = np.pad(a, ((r, r), (r, r), (0, 0)), mode="edge")

    def sad_row(v):
        # all horizontal displacements for one vertical offset at once
        band = src[r + v : r + v + h]  # (h, w + 2r, c)
        shifted = sliding_window_view(band, w, axis=1)  # (h, 2r+1, c, w)
        err = np.abs(b.transpose(0, 2, 1)[:, None] - shifted).sum(axis=2)  # (h, 2r+1, w)
        return _block_sums(err.transpose(1, 0, 2), block)  # (2r+1, gh, gw)

    rows = range(-r, r + 1)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            by_row = list(pool.map(sad_row, rows))
    else:
        by_row = [sad_row(v) for v in rows]
    sad = np.stack(by_row)  # (v, u, gh, gw)
    cands = _candidates(r)
    ordered = np.stack([sad[v + r, u + r] for u, v in cands])
    best = np.argmin(ordered, axis=0)  # first minimum wins
    grid = np.asarray(cands, dtype=np.float64)[best]  # (gh, gw, 2)
    return upsample_block_field(grid, (h, w), block)


def upsample_block_field(grid, shape, block: int) -> np.ndarray:
    h, w = shape
    ys = np.clip((np.arange(h) + 0.5) / block - 0.5, 0, grid.shape[0] - 1)
    xs = np.clip((np.arange(w) + 0.5) / block - 0.5, 0, grid.shape[1] - 1)
    gx, gy = np.meshgrid(xs, ys)
    return bilinear_sample(grid, gx, gy)


def warp(frame, flow) -> np.ndarray:
    """Backward warp: ``out(p) = frame(p + flow(p))``, bilinear, border clamped."""
    f = as_frame(frame)
    fl = _check_flow(flow, f.shape[:2])
    h, w = f.shape[:2]
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    out = bilinear_sample(f, gx + fl[:, :, 0], gy + fl[:, :, 1])
    if np.asarray(frame).ndim == 2:
        return out[:, :, 0]
    return out


def fb_consistency_mask(fwd, bwd, alpha: float = FB_ALPHA, beta: float = FB_BETA) -> np.ndarray:
    """1 where the forward flow and the back-projected backward flow cancel.

    Valid iff ``|f + b'|^2 <= alpha * (|f|^2 + |b'|^2) + beta`` with
    ``b' = bwd`` sampled at ``p + fwd(p)``.
    """
    f = _check_flow(fwd)
    b = _check_flow(bwd, f.shape[:2])
    if alpha < 0 or beta < 0:
        raise InvalidArgumentError("alpha and beta must be non-negative")
    back = warp(b, f)
    lhs = ((f + back) ** 2).sum(axis=2)
    rhs = alpha * ((f**2).sum(axis=2) + (back**2).sum(axis=2)) + beta
    return (lhs <= rhs).astype(np.uint8)


def rescale_flow(flow, shape) -> np.ndarray:
    """Resample a flow field to ``shape`` and scale displacements to match."""
    f = _check_flow(flow)
    h, w = f.shape[:2]
    if (h, w) == tuple(shape):
        return f
    out = resize(f, shape, "bilinear")
    out[:, :, 0] *= shape[1] / w
    out[:, :, 1] *= shape[0] / h
    return out
