"""Blind degradation: blur -> 4x downsample -> noise -> codec -> 4x upsample."""

from __future__ import annotations

import math
import shlex
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from keep.errors import ExternalToolError, InvalidArgumentError
from keep.io import read_frame, write_frame
from keep.tensor import SeededRng, as_frame, child_seed, gaussian_blur, resample

BLUR_BOUNDS = (2.0, 10.0)
NOISE_BOUNDS = (0.0, 10.0)  # 8-bit units
CRF_BOUNDS = (25.0, 45.0)
DCT_BLOCK = 8
# H.264-style intra rounding offset; < 1/2 widens the zero bin
DEADZONE_OFFSET = 1.0 / 3.0

SPLITS = {
    "mild": ((2.0, 4.0), (0.0, 3.0), (25.0, 32.0)),
    "medium": ((4.0, 7.0), (3.0, 7.0), (32.0, 38.0)),
    "heavy": ((7.0, 10.0), (7.0, 10.0), (38.0, 45.0)),
}


@dataclass(frozen=True)
class DegradationConfig:
    blur_sigma_range: tuple[float, float] = BLUR_BOUNDS
    noise_sigma_range: tuple[float, float] = NOISE_BOUNDS
    crf_range: tuple[float, float] = CRF_BOUNDS
    scale: int = 4
    codec_mode: str = "proxy"  # proxy | none | external
    codec_command: str | None = None  # template with {input} {output} {crf}
    seed: int = 0
    allow_out_of_bounds: bool = False

    def __post_init__(self):
        named = {
            "blur_sigma_range": (self.blur_sigma_range, BLUR_BOUNDS),
            "noise_sigma_range": (self.noise_sigma_range, NOISE_BOUNDS),
            "crf_range": (self.crf_range, CRF_BOUNDS),
        }
        for name, ((lo, hi), (blo, bhi)) in named.items():
            if lo > hi:
                raise InvalidArgumentError(f"{name}: lower bound {lo} exceeds upper {hi}")
            if not self.allow_out_of_bounds and (lo < blo or hi > bhi):
                raise InvalidArgumentError(f"{name} [{lo}, {hi}] leaves [{blo}, {bhi}]")
        if self.codec_mode not in ("proxy", "none", "external"):
            raise InvalidArgumentError(f"unknown codec mode {self.codec_mode!r}")
        if self.codec_mode == "external" and not self.codec_command:
            raise InvalidArgumentError("external codec mode needs a command template")
        if self.scale < 1:
            raise InvalidArgumentError("scale must be >= 1")


@dataclass(frozen=True)
class DegradationRecord:
    blur_sigma: float
    noise_sigma: float
    crf: float
    codec: str
    frame_seeds: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def make_split(split: str, seed: int = 0, **overrides) -> DegradationConfig:
    try:
        blur, noise, crf = SPLITS[split]
    except KeyError:
        raise InvalidArgumentError(f"unknown split {split!r}; expected mild, medium or heavy") from None
    return DegradationConfig(blur_sigma_range=blur, noise_sigma_range=noise, crf_range=crf, seed=seed, **overrides)


# ---------------------------------------------------------------------------
# codec proxy


def dct_matrix(n: int = DCT_BLOCK) -> np.ndarray:
    """Orthonormal DCT-II matrix (rows are basis vectors)."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


def quant_step(crf: float) -> float:
    return 2.0 ** ((crf - 25.0) / 6.0) / 64.0


def codec_proxy(frame, crf: float) -> np.ndarray:
    """8x8 block DCT with dead-zone quantization; one step doubling per 6 CRF."""
    if not 0.0 <= crf <= 51.0:
        raise InvalidArgumentError(f"crf must lie in [0, 51], got {crf}")
    f = as_frame(frame)
    h, w, c = f.shape
    b = DCT_BLOCK
    ph, pw = -(-h // b) * b, -(-w // b) * b
    padded = np.zeros((ph, pw, c))
    padded[:h, :w] = f
    blocks = padded.reshape(ph // b, b, pw // b, b, c)
    m = dct_matrix(b)
    coef = np.einsum("ki,aibjc,lj->akblc", m, blocks, m)
    step = quant_step(crf)
    levels = np.sign(coef) * np.floor(np.abs(coef) / step + DEADZONE_OFFSET)
    recon = np.einsum("ki,akblc,lj->aibjc", m, levels * step, m)
    out = recon.reshape(ph, pw, c)[:h, :w]
    return np.clip(out, 0.0, 1.0)


def external_codec(frame, crf: float, template: str) -> np.ndarray:
    """Round-trip ``frame`` through a user command, e.g. ``"enc {input} {output} {crf}"``."""
    f = as_frame(frame)
    suffix = ".pgm" if f.shape[2] == 1 else ".ppm"
    with tempfile.TemporaryDirectory() as tmp:
        src = Path(tmp) / f"in{suffix}"
        dst = Path(tmp) / f"out{suffix}"
        write_frame(src, f)
        cmd = [part.format(input=src, output=dst, crf=crf) for part in shlex.split(template)]
        try:
            proc = subprocess.run(cmd, capture_output=True, text=True)
        except OSError as exc:
            raise ExternalToolError(f"cannot run codec command {cmd[0]!r}: {exc}") from exc
        if proc.returncode != 0:
            raise ExternalToolError(f"codec command exited {proc.returncode}: {proc.stderr.strip()[:200]}")
        if not dst.exists():
            raise ExternalToolError("codec command produced no output file")
        out = read_frame(dst)
    if out.shape != f.shape:
        raise ExternalToolError(f"codec output shape {out.shape} differs from input {f.shape}")
    return out


# ---------------------------------------------------------------------------
# pipeline


def degrade_frame(
    frame,
    blur_sigma: float,
    noise_sigma: float,
    crf: float,
    rng: SeededRng,
    config: DegradationConfig,
    return_stages: bool = False,
):
    y = as_frame(frame)
    blurred = gaussian_blur(y, blur_sigma, radius=max(1, math.ceil(3 * blur_sigma)))
    small = resample(blurred, 1 / config.scale if config.scale > 1 else 1, "bilinear")
    noise = rng.normal(small.shape, noise_sigma / 255.0) if noise_sigma > 0 else np.zeros_like(small)
    noisy = np.clip(small + noise, 0.0, 1.0)
    if config.codec_mode == "proxy":
        coded = codec_proxy(noisy, crf)
    elif config.codec_mode == "external":
        coded = external_codec(noisy, crf, config.codec_command)
    else:
        coded = noisy
    lq = np.clip(resample(coded, config.scale, "bilinear"), 0.0, 1.0)
    if return_stages:
        return lq, {"blurred": blurred, "downsampled": small, "noisy": noisy, "coded": coded}
    return lq


def sample_parameters(config: DegradationConfig) -> tuple[float, float, float]:
    rng = SeededRng(config.seed)

    def draw(lo, hi):
        return lo + (hi - lo) * rng.uniform()

    return draw(*config.blur_sigma_range), draw(*config.noise_sigma_range), draw(*config.crf_range)


def degrade_sequence(hq: Sequence, config: DegradationConfig, threads: int = 1):
    """Degrade a clip. Blur sigma, noise level and CRF are drawn once per clip;
    noise samples come from a per-frame child generator."""
    frames = [as_frame(f) for f in hq]
    for f in frames:
        if f.shape[0] % config.scale or f.shape[1] % config.scale:
            raise InvalidArgumentError(f"frame {f.shape[:2]} not divisible by scale {config.scale}")
    sigma, delta, crf = sample_parameters(config)
    seeds = [child_seed(config.seed, i + 1) for i in range(len(frames))]

    def work(i):
        return degrade_frame(frames[i], sigma, delta, crf, SeededRng(seeds[i]), config)

    if threads > 1 and len(frames) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            lq = list(pool.map(work, range(len(frames))))
    else:
        lq = [work(i) for i in range(len(frames))]
    codec = {"proxy": "dct-proxy", "none": "none", "external": f"cmd:{config.codec_command}"}[config.codec_mode]
    return lq, DegradationRecord(sigma, delta, crf, codec, seeds)
