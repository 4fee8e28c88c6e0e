"""Vector-quantized codebook and the code-level losses.

Stop-gradient is expressed by routing: each loss reports which argument its
gradient belongs to instead of relying on an autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from keep.errors import InvalidArgumentError
from keep.tensor import SeededRng, softmax

DEFAULT_CODES = 64
DEFAULT_DIM = 16


@dataclass(frozen=True)
class Codebook:
    codes: np.ndarray  # (N, d)

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.float64)
        if codes.ndim != 2 or codes.shape[0] < 1:
            raise InvalidArgumentError(f"codebook must be (N>=1, d), got {codes.shape}")
        if not np.all(np.isfinite(codes)):
            raise InvalidArgumentError("codebook contains non-finite values")
        object.__setattr__(self, "codes", codes)

    @property
    def size(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    @classmethod
    def random(cls, n: int = DEFAULT_CODES, d: int = DEFAULT_DIM, seed: int = 0) -> "Codebook":
        """Gaussian codes rescaled to unit RMS."""
        codes = SeededRng(seed).normal((n, d))
        return cls(codes / np.sqrt(np.mean(codes**2)))


@dataclass(frozen=True)
class QuantizedCode:
    indices: np.ndarray  # (h, w) int
    quantized: np.ndarray  # (h, w, d)


@dataclass(frozen=True)
class GradientRoute:
    """Gradient of a scalar loss with respect to the one argument it flows to."""

    target: str
    grad: np.ndarray


@dataclass(frozen=True)
class CodeLosses:
    codebook_loss: float
    commit_loss: float
    codebook_grad: GradientRoute  # flows to the selected codes only
    commit_grad: GradientRoute  # flows to the encoder output only


def quantize(state, book: Codebook) -> QuantizedCode:
    """Nearest code per token by squared Euclidean distance; ties go to the lowest index."""
    z = np.asarray(state, dtype=np.float64)
    if z.ndim != 3 or z.shape[2] != book.dim:
        raise InvalidArgumentError(f"state {z.shape} does not match code dimension {book.dim}")
    h, w, d = z.shape
    flat = z.reshape(-1, d)
    # explicit differences keep equal distances bitwise equal
    dist = ((flat[:, None, :] - book.codes[None, :, :]) ** 2).sum(axis=2)
    idx = np.argmin(dist, axis=1)
    return QuantizedCode(idx.reshape(h, w), book.codes[idx].reshape(h, w, d))


def code_losses(encoder_out, quantized: QuantizedCode, beta_commit: float = 1.0) -> CodeLosses:
    e = np.asarray(encoder_out, dtype=np.float64)
    q = quantized.quantized
    if e.shape != q.shape:
        raise InvalidArgumentError(f"shape mismatch: {e.shape} vs {q.shape}")
    diff = e - q
    mse = float(np.mean(diff**2))
    n = diff.size
    return CodeLosses(
        codebook_loss=mse,
        commit_loss=beta_commit * mse,
        codebook_grad=GradientRoute("codes", -2.0 * diff / n),
        commit_grad=GradientRoute("encoder_out", beta_commit * 2.0 * diff / n),
    )


def scatter_to_codes(token_grad, indices, n_codes: int) -> np.ndarray:
    """Accumulate a per-token gradient onto codebook rows."""
    g = np.asarray(token_grad, dtype=np.float64)
    out = np.zeros((n_codes, g.shape[-1]))
    np.add.at(out, np.asarray(indices).ravel(), g.reshape(-1, g.shape[-1]))
    return out


def _check_targets(logits, targets):
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets)
    if z.ndim != 3 or t.shape != z.shape[:2]:
        raise InvalidArgumentError(f"logits {z.shape} and targets {t.shape} disagree")
    if np.any(t < 0) or np.any(t >= z.shape[2]):
        raise InvalidArgumentError("target index out of range")
    return z, t.astype(np.intp)


def token_cross_entropy(logits, target_indices) -> float:
    """Mean over tokens of ``-log softmax(logits)[target]``."""
    z, t = _check_targets(logits, target_indices)
    shifted = z - z.max(axis=2, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=2))
    picked = np.take_along_axis(shifted, t[:, :, None], axis=2)[:, :, 0]
    return float(np.mean(log_norm - picked))


def token_cross_entropy_grad(logits, target_indices) -> np.ndarray:
    z, t = _check_targets(logits, target_indices)
    p = softmax(z, axis=2)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, t[:, :, None], 1.0, axis=2)
    return (p - onehot) / (t.size)


class LogitProducer(Protocol):
    def __call__(self, state: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class LinearLogitHead:
    """Seeded per-token linear map from latent channels to code logits."""

    weight: np.ndarray  # (c, N)
    bias: np.ndarray  # (N,)

    @classmethod
    def random(cls, channels: int, n_codes: int, seed: int = 0) -> "LinearLogitHead":
        rng = SeededRng(seed)
        return cls(rng.normal((channels, n_codes), 1.0 / np.sqrt(channels)), np.zeros(n_codes))

    def __call__(self, state):
        return np.asarray(state, dtype=np.float64) @ self.weight + self.bias
