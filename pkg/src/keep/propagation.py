"""Recursive latent propagation over a frame sequence.

Per frame ``t >= 2``::

    flow   = flow(x[t-1], x[t])
    prior  = E_H(warp(y_hat[t-1], flow))
    obs    = E_L(x[t])
    gain   = KGN(obs[1], obs[t-1], obs[t])  | fixed | oracle schedule
    post   = (1 - gain) * prior + gain * obs
    y_hat  = D(post)

Frame 1 initializes ``post[1] = obs[1]`` and ``y_hat[1] = D(post[1])``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from keep.codebook import Codebook, quantize
from keep.errors import InvalidArgumentError, InvalidStateError, KeepIOError
from keep.io import flow_name, read_flo
from keep.motion import DEFAULT_BLOCK, DEFAULT_SEARCH_RADIUS, estimate_flow_block_matching, rescale_flow, warp
from keep.nets import AttentionWeights, KgnParams, ToyCodec, cross_frame_attention, kgn_gain
from keep.state_space import LinearGaussianSystem, kalman_oracle, update
from keep.tensor import as_frame, resize


@dataclass(frozen=True)
class KgnGain:
    params: KgnParams | None = None  # seeded random from KeepConfig.seed when None


@dataclass(frozen=True)
class FixedGain:
    k: float

    def __post_init__(self):
        if not 0.0 <= self.k <= 1.0:
            raise InvalidArgumentError(f"fixed gain must lie in [0, 1], got {self.k}")


@dataclass(frozen=True)
class OracleGain:
    """Gains from the scalar Kalman recursion of ``system``.

    The system's ``F`` also scales the predicted state and observations are
    divided by ``H`` (engine gain ``K * H``), which makes the pipeline the
    exact nonlinear counterpart of the linear filter. ``P0`` is the variance
    attached to the first posterior.
    """

    system: LinearGaussianSystem


@dataclass(frozen=True)
class BlockMatchingFlow:
    block: int = DEFAULT_BLOCK
    search_radius: int = DEFAULT_SEARCH_RADIUS


@dataclass(frozen=True)
class IngestedFlow:
    """Precomputed flows: ``flows[t-2]`` is the flow into frame ``t``, or files
    ``flow_NNNNNN.flo`` (named by the target frame) in ``directory``."""

    flows: tuple | None = None
    directory: str | None = None


GainSource = Union[KgnGain, FixedGain, OracleGain]
FlowSource = Union[BlockMatchingFlow, IngestedFlow]


def default_threads() -> int:
    value = os.environ.get("KEEP_THREADS")
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            raise InvalidArgumentError(f"KEEP_THREADS must be an integer, got {value!r}") from None
    return os.cpu_count() or 1


@dataclass(frozen=True)
class KeepConfig:
    gain_source: GainSource = field(default_factory=KgnGain)
    flow_source: FlowSource = field(default_factory=BlockMatchingFlow)
    codec: ToyCodec = field(default_factory=ToyCodec)
    quantize_after_update: bool = False
    codebook: Codebook | None = None
    cfa_enabled: bool = False
    cfa_weights: AttentionWeights | None = None
    seed: int = 0
    threads: int = 1


@dataclass
class SequenceResult:
    restored: list[np.ndarray]
    posteriors: list[np.ndarray]
    gains: list[np.ndarray]
    priors: list[np.ndarray]
    observations: list[np.ndarray]

    def mean_gains(self) -> list[float]:
        return [float(np.mean(g)) for g in self.gains]


def flow_for_step(frames: Sequence, t: int, config: KeepConfig, shape=None) -> np.ndarray:
    """Flow from frame ``t-1`` to frame ``t`` (1-based ``t``), at ``shape`` if given."""
    if not 2 <= t <= len(frames):
        raise InvalidArgumentError(f"flow step {t} outside 2..{len(frames)}")
    src = config.flow_source
    if isinstance(src, IngestedFlow):
        if src.flows is not None:
            if t - 2 >= len(src.flows):
                raise KeepIOError(f"no ingested flow for frame {t}")
            flow = np.asarray(src.flows[t - 2], dtype=np.float64)
        else:
            path = Path(src.directory) / flow_name(t)
            if not path.exists():
                raise KeepIOError(f"missing flow file for frame {t}: {path}")
            flow = read_flo(path)
        target = shape or np.asarray(frames[t - 1]).shape[:2]
        return rescale_flow(flow, target)
    prev = as_frame(frames[t - 2])
    cur = as_frame(frames[t - 1])
    if shape is not None and tuple(shape) != prev.shape[:2]:
        # estimate at the resolution of the frame being warped
        prev = resize(prev, shape)
        cur = resize(cur, shape)
    return estimate_flow_block_matching(prev, cur, src.block, src.search_radius, threads=config.threads)


def _check_frames(frames) -> list[np.ndarray]:
    seq = [as_frame(f) for f in frames]
    if not seq:
        raise InvalidArgumentError("empty frame sequence")
    for i, f in enumerate(seq[1:], start=2):
        if f.shape != seq[0].shape:
            raise InvalidStateError(f"frame {i} has shape {f.shape}, expected {seq[0].shape}")
    return seq


def run_keep(frames: Sequence, config: KeepConfig | None = None) -> SequenceResult:
    config = config or KeepConfig()
    seq = _check_frames(frames)
    codec = config.codec
    channels = seq[0].shape[2]
    gain_src = config.gain_source

    transition, obs_scale = 1.0, 1.0
    schedule = None
    if isinstance(gain_src, OracleGain):
        system = gain_src.system
        h = float(system.H)
        transition, obs_scale = float(system.F), 1.0 / h
        steps = kalman_oracle(system, np.zeros(len(seq) - 1), 0.0)
        schedule = [s.gain * h for s in steps]

    def encode(x):
        z = codec.encode(x)
        return z * obs_scale if obs_scale != 1.0 else z

    def decode(z):
        return codec.decode(z, channels)

    obs1 = encode(seq[0])
    token_shape = obs1.shape[:2]
    kgn_params = None
    if isinstance(gain_src, KgnGain):
        kgn_params = gain_src.params or KgnParams.random(obs1.shape[2], seed=config.seed)
    if config.quantize_after_update and config.codebook is None:
        raise InvalidArgumentError("quantize_after_update needs a codebook")
    cfa_weights = config.cfa_weights
    if config.cfa_enabled and cfa_weights is None:
        cfa_weights = AttentionWeights.random(obs1.shape[2], seed=config.seed ^ 0xCFA)

    post = obs1
    feat_prev = post
    result = SequenceResult([decode(post)], [post], [np.ones(token_shape)], [obs1], [obs1])

    for t in range(2, len(seq) + 1):
        y_prev = result.restored[-1]
        flow = flow_for_step(seq, t, config, shape=y_prev.shape[:2])
        prior = codec.encode(warp(y_prev, flow))
        if transition != 1.0:
            prior = transition * prior
        obs = encode(seq[t - 1])
        if obs.shape != obs1.shape or prior.shape != obs1.shape:
            raise InvalidStateError(f"latent shape drift at frame {t}")

        if isinstance(gain_src, FixedGain):
            gain = np.full(token_shape, gain_src.k)
        elif schedule is not None:
            gain = np.full(token_shape, schedule[t - 2])
        else:
            gain = kgn_gain(obs1, result.observations[-1], obs, kgn_params)

        post = update(prior, obs, gain)
        if config.quantize_after_update:
            post = quantize(post, config.codebook).quantized
        if not np.all(np.isfinite(post)):
            raise InvalidStateError(f"non-finite posterior at frame {t}")

        feat = post
        if config.cfa_enabled:
            feat = cross_frame_attention(post, feat_prev, cfa_weights)
        feat_prev = feat

        result.restored.append(decode(feat))
        result.posteriors.append(post)
        result.gains.append(gain)
        result.priors.append(prior)
        result.observations.append(obs)
    return result
