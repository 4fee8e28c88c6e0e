"""Network blocks at desk scale: attention, feature modulation, the gain
network and the toy codecs standing in for the learned encoders/decoder."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from keep.errors import InvalidArgumentError
from keep.tensor import SeededRng, as_frame, sigmoid, softmax

TOKEN_STRIDE = 32
# logistic stays strictly inside (0, 1) in float64 for |x| <= 30
_LOGIT_LIMIT = 30.0


def _same_shape(*states):
    arrs = [np.asarray(s, dtype=np.float64) for s in states]
    for a in arrs[1:]:
        if a.shape != arrs[0].shape:
            raise InvalidArgumentError(f"state shapes differ: {arrs[0].shape} vs {a.shape}")
    if arrs[0].ndim != 3:
        raise InvalidArgumentError(f"expected (h, w, c) states, got {arrs[0].shape}")
    return arrs


# ---------------------------------------------------------------------------
# attention


@dataclass(frozen=True)
class AttentionWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def identity(cls, d: int) -> "AttentionWeights":
        eye = np.eye(d)
        return cls(eye, eye.copy(), eye.copy())

    @classmethod
    def zeros(cls, d: int) -> "AttentionWeights":
        z = np.zeros((d, d))
        return cls(z, z.copy(), z.copy())

    @classmethod
    def random(cls, d: int, seed: int = 0) -> "AttentionWeights":
        rng = SeededRng(seed)
        s = 1.0 / np.sqrt(d)
        return cls(rng.normal((d, d), s), rng.normal((d, d), s), rng.normal((d, d), s))


def attention_matrix(queries, keys, weights: AttentionWeights) -> np.ndarray:
    """Row-stochastic ``softmax(Q K^T / sqrt(d))`` for token rows ``queries``, ``keys``."""
    q = queries @ weights.w_q.T
    k = keys @ weights.w_k.T
    return softmax(q @ k.T / np.sqrt(weights.dim), axis=1)


def _attend(query_state, kv_tokens, weights: AttentionWeights, return_weights: bool):
    h, w, c = query_state.shape
    if c != weights.dim:
        raise InvalidArgumentError(f"channels {c} do not match attention dim {weights.dim}")
    q_tokens = query_state.reshape(-1, c)
    attn = attention_matrix(q_tokens, kv_tokens, weights)
    out = (attn @ (kv_tokens @ weights.w_v.T)).reshape(h, w, c)
    return (out, attn) if return_weights else out


def cross_frame_attention(v_t, v_prev, weights: AttentionWeights, return_weights: bool = False):
    """Current tokens query the previous frame's tokens (single head, no residual)."""
    cur, prev = _same_shape(v_t, v_prev)
    return _attend(cur, prev.reshape(-1, prev.shape[2]), weights, return_weights)


def st_attention(query_state, anchor_state, prev_state, weights: AttentionWeights, return_weights: bool = False):
    """Like cross-frame attention but keys/values are anchor tokens followed by previous tokens."""
    q, anchor, prev = _same_shape(query_state, anchor_state, prev_state)
    c = q.shape[2]
    kv = np.concatenate([anchor.reshape(-1, c), prev.reshape(-1, c)], axis=0)
    return _attend(q, kv, weights, return_weights)


# ---------------------------------------------------------------------------
# convolutions


@dataclass(frozen=True)
class ConvLayer:
    weight: np.ndarray  # (kh, kw, c_in, c_out)
    bias: np.ndarray  # (c_out,)

    def __call__(self, x) -> np.ndarray:
        x = as_frame(x)
        kh, kw, cin, cout = self.weight.shape
        if x.shape[2] != cin:
            raise InvalidArgumentError(f"conv expects {cin} channels, got {x.shape[2]}")
        ph, pw = kh // 2, kw // 2
        padded = np.pad(x, ((ph, ph), (pw, pw), (0, 0)))
        windows = sliding_window_view(padded, (kh, kw), axis=(0, 1))  # (H, W, cin, kh, kw)
        return np.einsum("hwcij,ijco->hwo", windows, self.weight) + self.bias

    @classmethod
    def random(cls, size: int, c_in: int, c_out: int, rng: SeededRng) -> "ConvLayer":
        scale = np.sqrt(2.0 / (size * size * c_in))
        return cls(rng.normal((size, size, c_in, c_out), scale), np.zeros(c_out))

    @classmethod
    def zeros(cls, size: int, c_in: int, c_out: int) -> "ConvLayer":
        return cls(np.zeros((size, size, c_in, c_out)), np.zeros(c_out))


def relu(x):
    return np.maximum(x, 0.0)


@dataclass(frozen=True)
class ConvStack:
    """Convolutions with a rectifier between consecutive layers (none after the last)."""

    layers: tuple[ConvLayer, ...]

    def __call__(self, x):
        out = as_frame(x)
        for i, layer in enumerate(self.layers):
            out = layer(out)
            if i < len(self.layers) - 1:
                out = relu(out)
        return out

    @classmethod
    def random(cls, channels: int, depth: int = 2, seed: int = 0) -> "ConvStack":
        rng = SeededRng(seed)
        layers = [ConvLayer.random(3, channels, channels, rng) for _ in range(depth - 1)]
        last = ConvLayer.random(3, channels, 2 * channels, rng)
        last = ConvLayer(last.weight * 0.1, last.bias)
        return cls(tuple(layers) + (last,))


def cft(decoder_feat, encoder_feat, modulation: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Affine modulation ``F_d + alpha * F_d + beta`` with ``(alpha, beta)`` predicted from ``F_e``."""
    fd, fe = _same_shape(as_frame(decoder_feat), as_frame(encoder_feat))
    ab = np.asarray(modulation(fe), dtype=np.float64)
    c = fd.shape[2]
    if ab.shape != fd.shape[:2] + (2 * c,):
        raise InvalidArgumentError(f"modulation must output {2 * c} channels, got {ab.shape}")
    alpha, beta = ab[:, :, :c], ab[:, :, c:]
    return fd + (alpha * fd + beta)


# ---------------------------------------------------------------------------
# Kalman gain network


@dataclass(frozen=True)
class KgnParams:
    st_attention: AttentionWeights
    uncertainty: tuple[ConvLayer, ConvLayer]
    gain_head: ConvLayer  # 1x1, c -> 1

    @classmethod
    def random(cls, channels: int, seed: int = 0) -> "KgnParams":
        rng = SeededRng(seed)
        attn = AttentionWeights.random(channels, seed=rng.next_u32())
        convs = (ConvLayer.random(3, channels, channels, rng), ConvLayer.random(3, channels, channels, rng))
        return cls(attn, convs, ConvLayer.random(1, channels, 1, rng))

    @classmethod
    def zeros(cls, channels: int) -> "KgnParams":
        return cls(
            AttentionWeights.zeros(channels),
            (ConvLayer.zeros(3, channels, channels), ConvLayer.zeros(3, channels, channels)),
            ConvLayer.zeros(1, channels, 1),
        )

    def to_arrays(self) -> dict[str, np.ndarray]:
        a = self.st_attention
        c1, c2 = self.uncertainty
        return {
            "attn_w_q": a.w_q, "attn_w_k": a.w_k, "attn_w_v": a.w_v,
            "conv1_weight": c1.weight, "conv1_bias": c1.bias,
            "conv2_weight": c2.weight, "conv2_bias": c2.bias,
            "head_weight": self.gain_head.weight, "head_bias": self.gain_head.bias,
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "KgnParams":
        g = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
        try:
            return cls(
                AttentionWeights(g["attn_w_q"], g["attn_w_k"], g["attn_w_v"]),
                (ConvLayer(g["conv1_weight"], g["conv1_bias"]), ConvLayer(g["conv2_weight"], g["conv2_bias"])),
                ConvLayer(g["head_weight"], g["head_bias"]),
            )
        except KeyError as exc:
            raise InvalidArgumentError(f"missing KGN parameter {exc.args[0]}") from exc


def kgn_uncertainty(anchor, prev_obs, current_obs, params: KgnParams) -> np.ndarray:
    feats = st_attention(current_obs, anchor, prev_obs, params.st_attention)
    c1, c2 = params.uncertainty
    return c2(relu(c1(feats)))


def kgn_gain(anchor, prev_obs, current_obs, params: KgnParams) -> np.ndarray:
    """Per-token gain in the open interval (0, 1), shape ``(h, w)``."""
    feats = kgn_uncertainty(anchor, prev_obs, current_obs, params)
    logits = params.gain_head(feats)[:, :, 0]
    return sigmoid(np.clip(logits, -_LOGIT_LIMIT, _LOGIT_LIMIT))


# ---------------------------------------------------------------------------
# toy codecs


def _pairwise_block_sum(x: np.ndarray, axis: int, size: int) -> np.ndarray:
    # halving reduction: sums of equal values stay exact
    n = x.shape[axis]
    shape = list(x.shape)
    shape[axis : axis + 1] = [n // size, size]
    x = x.reshape(shape)
    sub = axis + 1
    while x.shape[sub] > 1:
        if x.shape[sub] % 2:
            return x.sum(axis=sub)
        half = x.shape[sub] // 2
        x = np.take(x, np.arange(half), axis=sub) + np.take(x, np.arange(half, 2 * half), axis=sub)
    return np.squeeze(x, axis=sub)


def block_mean(frame, size: int) -> np.ndarray:
    f = as_frame(frame)
    h, w = f.shape[:2]
    if h % size or w % size:
        raise InvalidArgumentError(f"frame {h}x{w} is not divisible by {size}")
    s = _pairwise_block_sum(_pairwise_block_sum(f, 0, size), 1, size)
    return s / float(size * size)


def block_upsample(state, size: int) -> np.ndarray:
    z = np.asarray(state, dtype=np.float64)
    return np.repeat(np.repeat(z, size, axis=0), size, axis=1)


@dataclass(frozen=True)
class ToyCodec:
    """Stand-in encoder/decoder pair.

    ``pool-identity``: encode is a per-channel block mean over ``scale`` x
    ``scale`` tiles and decode is nearest upsampling, so
    ``encode(decode(z)) == z`` exactly. ``conv-seeded`` adds a seeded 1x1
    channel projection to ``channels`` latent channels (decode applies its
    pseudo-inverse).
    """

    mode: str = "pool-identity"
    scale: int = TOKEN_STRIDE
    channels: int | None = None
    seed: int = 0
    _proj: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.mode not in ("pool-identity", "conv-seeded"):
            raise InvalidArgumentError(f"unknown codec mode {self.mode!r}")
        if self.mode == "conv-seeded" and self.channels is None:
            raise InvalidArgumentError("conv-seeded codec needs a channel count")

    def _projection(self, c_in: int) -> np.ndarray:
        cached = self._proj
        if cached is None or cached.shape[0] != c_in:
            cached = SeededRng(self.seed).normal((c_in, self.channels), 1.0 / np.sqrt(c_in))
            object.__setattr__(self, "_proj", cached)
        return cached

    def latent_shape(self, frame_shape) -> tuple[int, int, int]:
        h, w = frame_shape[:2]
        c = frame_shape[2] if len(frame_shape) == 3 else 1
        return h // self.scale, w // self.scale, (c if self.mode == "pool-identity" else self.channels)

    def encode(self, frame) -> np.ndarray:
        z = block_mean(frame, self.scale)
        if self.mode == "conv-seeded":
            z = z @ self._projection(z.shape[2])
        return z

    def decode(self, state, frame_channels: int | None = None) -> np.ndarray:
        z = np.asarray(state, dtype=np.float64)
        if self.mode == "conv-seeded":
            if frame_channels is None:
                frame_channels = self._proj.shape[0] if self._proj is not None else 3
            z = z @ np.linalg.pinv(self._projection(frame_channels))
        return block_upsample(z, self.scale)


def toy_encode(frame, codec: ToyCodec) -> np.ndarray:
    return codec.encode(frame)


def toy_decode(state, codec: ToyCodec, frame_channels: int | None = None) -> np.ndarray:
    return codec.decode(state, frame_channels)
