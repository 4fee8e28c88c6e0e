"""Dense tensor kernels shared by every other module.

Frames are numpy arrays laid out ``(height, width, channels)``. Kernels here
work in float64; float32 is used only at the file boundary (see ``keep.io``).
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
from scipy import ndimage

from keep.errors import InvalidArgumentError

_MASK64 = 0xFFFF_FFFF_FFFF_FFFF
_MASK32 = 0xFFFF_FFFF
PCG_MULTIPLIER = 6364136223846793005


def as_frame(x) -> np.ndarray:
    """Return ``x`` as a float64 ``(H, W, C)`` array (2-D input gains a channel axis)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise InvalidArgumentError(f"expected a rank-3 frame, got shape {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# convolution and kernels


def conv2d(image, kernel, padding: str = "reflect") -> np.ndarray:
    """Convolve each channel of ``image`` with a 2-D ``kernel``.

    ``padding`` is ``"reflect"`` (mirror about the edge pixel, edge not
    repeated) or ``"zero"``. Output has the input's shape; 2-D input stays 2-D.
    """
    img = np.asarray(image, dtype=np.float64)
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
        raise InvalidArgumentError(f"kernel must be 2-D with odd sides, got {k.shape}")
    modes = {"reflect": "mirror", "zero": "constant"}
    if padding not in modes:
        raise InvalidArgumentError(f"unknown padding mode {padding!r}")
    squeeze = img.ndim == 2
    img3 = as_frame(img)
    out = np.empty_like(img3)
    for ch in range(img3.shape[2]):
        out[:, :, ch] = ndimage.convolve(img3[:, :, ch], k, mode=modes[padding], cval=0.0)
    return out[:, :, 0] if squeeze else out


def gaussian_kernel_1d(sigma: float, radius: int | None = None) -> np.ndarray:
    if not sigma > 0:
        raise InvalidArgumentError(f"sigma must be positive, got {sigma}")
    if radius is None:
        radius = max(1, math.ceil(3 * sigma))
    if radius < 1:
        raise InvalidArgumentError(f"radius must be >= 1, got {radius}")
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def gaussian_kernel(sigma: float, radius: int | None = None) -> np.ndarray:
    """Truncated isotropic Gaussian of side ``2*radius+1``, renormalized to sum to 1.

    ``radius`` defaults to ``ceil(3*sigma)``.
    """
    if not sigma > 0:
        raise InvalidArgumentError(f"sigma must be positive, got {sigma}")
    if radius is None:
        radius = max(1, math.ceil(3 * sigma))
    if radius < 1:
        raise InvalidArgumentError(f"radius must be >= 1, got {radius}")
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    dx, dy = np.meshgrid(x, x)
    w = np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))
    return w / w.sum()


def gaussian_blur(image, sigma: float, radius: int | None = None, padding: str = "reflect") -> np.ndarray:
    """Separable equivalent of ``conv2d(image, gaussian_kernel(sigma, radius))``."""
    k = gaussian_kernel_1d(sigma, radius)
    modes = {"reflect": "mirror", "zero": "constant"}
    if padding not in modes:
        raise InvalidArgumentError(f"unknown padding mode {padding!r}")
    img = as_frame(image)
    out = ndimage.convolve1d(img, k, axis=0, mode=modes[padding])
    return ndimage.convolve1d(out, k, axis=1, mode=modes[padding])


# ---------------------------------------------------------------------------
# resampling


def _axis_coords(n_in: int, n_out: int) -> np.ndarray:
    # pixel-center (align-corners-false) source coordinates
    return (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5


def _lerp_axis(x: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = x.shape[axis]
    if n_in == n_out:
        return x
    src = np.clip(_axis_coords(n_in, n_out), 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = src - i0
    shape = [1] * x.ndim
    shape[axis] = n_out
    w = w.reshape(shape)
    a = np.take(x, i0, axis=axis)
    b = np.take(x, i1, axis=axis)
    return a + w * (b - a)


def _nearest_axis(x: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = x.shape[axis]
    if n_in == n_out:
        return x
    idx = np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.intp)
    return np.take(x, np.minimum(idx, n_in - 1), axis=axis)


def output_size(n: int, factor) -> int:
    return int(math.floor(n * Fraction(factor) + Fraction(1, 2)))


def resample(image, factor, mode: str = "bilinear") -> np.ndarray:
    """Rescale spatial dims by ``factor`` (a float or ``Fraction``).

    Output size is ``round(n * factor)``; sampling is at pixel centers with
    border clamping.
    """
    if not float(factor) > 0:
        raise InvalidArgumentError(f"resample factor must be positive, got {factor}")
    img = np.asarray(image, dtype=np.float64)
    h = output_size(img.shape[0], factor)
    w = output_size(img.shape[1], factor)
    return resize(img, (h, w), mode)


def resize(image, shape: tuple[int, int], mode: str = "bilinear") -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    h, w = shape
    if h < 1 or w < 1:
        raise InvalidArgumentError(f"output size must be >= 1, got {shape}")
    if mode == "bilinear":
        step = _lerp_axis
    elif mode == "nearest":
        step = _nearest_axis
    else:
        raise InvalidArgumentError(f"unknown resample mode {mode!r}")
    return step(step(img, h, 0), w, 1)


def bilinear_sample(image, xs, ys) -> np.ndarray:
    """Sample ``image`` at fractional pixel positions with border clamping.

    Returns an array of shape ``xs.shape + (C,)``.
    """
    img = as_frame(image)
    height, width = img.shape[:2]
    x = np.clip(np.asarray(xs, dtype=np.float64), 0.0, width - 1)
    y = np.clip(np.asarray(ys, dtype=np.float64), 0.0, height - 1)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    wx = (x - x0)[..., None]
    wy = (y - y0)[..., None]
    top = img[y0, x0] + wx * (img[y0, x1] - img[y0, x0])
    bottom = img[y1, x0] + wx * (img[y1, x1] - img[y1, x0])
    return top + wy * (bottom - top)


# ---------------------------------------------------------------------------
# softmax


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise InvalidArgumentError("softmax of an empty vector")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# random numbers


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def child_seed(parent_seed: int, stream_id: int) -> int:
    return splitmix64((parent_seed ^ stream_id) & _MASK64)


def _xsh_rr(old):
    xorshifted = (((old >> 18) ^ old) >> 27) & _MASK32
    rot = old >> 59
    return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & _MASK32


class SeededRng:
    """PCG32 (XSH-RR) generator with Box-Muller normals.

    Seeding follows the reference ``pcg32_srandom_r(seed, stream)`` routine,
    so a given ``(seed, stream)`` pair yields the same stream everywhere.
    Not thread-safe; derive children with :meth:`spawn` instead of sharing.
    """

    def __init__(self, seed: int, stream: int = 0):
        if seed < 0:
            raise InvalidArgumentError("seed must be non-negative")
        self.seed = seed & _MASK64
        self.state = 0
        self.increment = ((stream << 1) | 1) & _MASK64
        self.next_u32()
        self.state = (self.state + self.seed) & _MASK64
        self.next_u32()
        self._cached_normal: float | None = None

    def spawn(self, stream_id: int) -> "SeededRng":
        return SeededRng(child_seed(self.seed, stream_id))

    def next_u32(self) -> int:
        old = self.state
        self.state = (old * PCG_MULTIPLIER + self.increment) & _MASK64
        return _xsh_rr(old)

    def u32_array(self, n: int) -> np.ndarray:
        """Next ``n`` outputs, identical to ``n`` calls of :meth:`next_u32`."""
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        # closed-form jump: s_k = A_k * s_0 + C_k (mod 2**64)
        mult = np.ones(1, dtype=np.uint64)
        add = np.zeros(1, dtype=np.uint64)
        a_m, c_m = PCG_MULTIPLIER, self.increment
        while mult.size < n:
            mult = np.concatenate([mult, mult * np.uint64(a_m)])
            add = np.concatenate([add, mult[: add.size] * np.uint64(c_m) + add])
            c_m = (a_m * c_m + c_m) & _MASK64
            a_m = (a_m * a_m) & _MASK64
        mult, add = mult[:n], add[:n]
        states = mult * np.uint64(self.state) + add
        last = int(states[-1])
        self.state = (last * PCG_MULTIPLIER + self.increment) & _MASK64
        return _xsh_rr(states)

    def uniform(self) -> float:
        """Uniform on [0, 1): 32-bit output divided by 2**32."""
        return self.next_u32() / 4294967296.0

    def uniform_array(self, n: int) -> np.ndarray:
        return self.u32_array(n).astype(np.float64) / 4294967296.0

    def gaussian(self) -> float:
        if self._cached_normal is not None:
            value, self._cached_normal = self._cached_normal, None
            return value
        u1 = (self.next_u32() + 1) / 4294967296.0  # (0, 1]
        u2 = self.next_u32() / 4294967296.0
        r = math.sqrt(-2.0 * math.log(u1))
        self._cached_normal = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def gaussian_array(self, n: int) -> np.ndarray:
        """Next ``n`` normals, identical to ``n`` calls of :meth:`gaussian`."""
        out = np.empty(n, dtype=np.float64)
        start = 0
        if n and self._cached_normal is not None:
            out[0] = self._cached_normal
            self._cached_normal = None
            start = 1
        remaining = n - start
        if remaining <= 0:
            return out
        pairs = (remaining + 1) // 2
        raw = self.u32_array(2 * pairs).astype(np.float64)
        u1 = (raw[0::2] + 1.0) / 4294967296.0
        u2 = raw[1::2] / 4294967296.0
        r = np.sqrt(-2.0 * np.log(u1))
        values = np.empty(2 * pairs)
        values[0::2] = r * np.cos(2.0 * np.pi * u2)
        values[1::2] = r * np.sin(2.0 * np.pi * u2)
        out[start:] = values[:remaining]
        if remaining % 2:
            self._cached_normal = float(values[-1])
        return out

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        return self.gaussian_array(int(np.prod(shape))).reshape(shape) * std
