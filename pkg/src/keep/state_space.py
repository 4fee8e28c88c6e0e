"""Predict / innovation / update algebra and the closed-form scalar Kalman oracle.

The update uses the convex form ``post = (1 - K) * prior + K * observed``:
the gain weights the observation, so ``K -> 1`` means trusting the measurement.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from keep.errors import InvalidArgumentError, InvalidStateError


@dataclass(frozen=True)
class StateSpaceModel:
    dynamic: Callable[[np.ndarray], np.ndarray]
    encoder: Callable[[np.ndarray], np.ndarray]
    generator: Callable[[np.ndarray], np.ndarray]
    hq_encoder: Callable[[np.ndarray], np.ndarray] | None = None

    def encode_hq(self, frame):
        return (self.hq_encoder or self.encoder)(frame)


@dataclass(frozen=True)
class Innovation:
    delta: np.ndarray


@dataclass(frozen=True)
class LinearGaussianSystem:
    """Scalar or diagonal linear-Gaussian system. Array-valued fields act per component."""

    F: float | np.ndarray = 1.0
    H: float | np.ndarray = 1.0
    Q: float | np.ndarray = 0.0
    R: float | np.ndarray = 1.0
    P0: float | np.ndarray = 1.0

    def __post_init__(self):
        if np.any(np.asarray(self.R) <= 0):
            raise InvalidArgumentError("measurement variance R must be > 0")
        if np.any(np.asarray(self.Q) < 0) or np.any(np.asarray(self.P0) < 0):
            raise InvalidArgumentError("Q and P0 must be >= 0")


@dataclass(frozen=True)
class OracleStep:
    prior_mean: float | np.ndarray
    prior_variance: float | np.ndarray
    gain: float | np.ndarray
    posterior_mean: float | np.ndarray
    posterior_variance: float | np.ndarray


def _finite(x, what: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidStateError(f"{what} contains non-finite values")
    return arr


def predict(model: StateSpaceModel, posterior_prev) -> np.ndarray:
    state = _finite(posterior_prev, "posterior")
    return _finite(model.dynamic(state), "prior")


def innovation(prior, observed) -> Innovation:
    p = np.asarray(prior, dtype=np.float64)
    o = np.asarray(observed, dtype=np.float64)
    if p.shape != o.shape:
        raise InvalidArgumentError(f"state shapes differ: {p.shape} vs {o.shape}")
    return Innovation(p - o)


def _gain_for(gain, state: np.ndarray) -> np.ndarray:
    k = np.asarray(gain, dtype=np.float64)
    if np.any(~(k >= 0.0)) or np.any(~(k <= 1.0)):
        raise InvalidArgumentError("gain entries must lie in [0, 1]")
    if k.ndim == 0:
        return k
    if state.ndim == 3 and k.shape == state.shape[:2]:
        return k[:, :, None]
    if k.shape == state.shape:
        return k
    raise InvalidArgumentError(f"gain shape {k.shape} does not fit state {state.shape}")


def update(prior, observed, gain) -> np.ndarray:
    """Blend prior and observation per token; gain ``(h, w)`` broadcasts over channels."""
    p = np.asarray(prior, dtype=np.float64)
    o = np.asarray(observed, dtype=np.float64)
    if p.shape != o.shape:
        raise InvalidArgumentError(f"state shapes differ: {p.shape} vs {o.shape}")
    k = _gain_for(gain, p)
    post = (1.0 - k) * p + k * o
    # rounding can step one ulp outside the hull; clip back onto it
    return np.clip(post, np.minimum(p, o), np.maximum(p, o))


def filter_sequence(model: StateSpaceModel, observations: Sequence, gains: Sequence, initial=None):
    """Run predict/update over ``observations`` with externally supplied gains.

    ``initial`` is the first posterior; when omitted it is ``encoder(obs[0])``
    and the first gain is unused. Returns ``(priors, posteriors)``.
    """
    obs = list(observations)
    if not obs:
        raise InvalidArgumentError("empty observation sequence")
    if initial is None:
        post = _finite(model.encoder(obs[0]), "observation")
        priors, posts = [post], [post]
        start = 1
    else:
        post = _finite(initial, "initial state")
        priors, posts = [], []
        start = 0
    for t in range(start, len(obs)):
        prior = predict(model, post)
        post = update(prior, model.encoder(obs[t]), gains[t])
        priors.append(prior)
        posts.append(post)
    return priors, posts


def kalman_oracle(system: LinearGaussianSystem, observations, initial_mean) -> list[OracleStep]:
    """Classical Kalman recursion for scalar / diagonal systems, one record per observation."""
    F = np.asarray(system.F, dtype=np.float64)
    H = np.asarray(system.H, dtype=np.float64)
    Q = np.asarray(system.Q, dtype=np.float64)
    R = np.asarray(system.R, dtype=np.float64)
    if np.any(R <= 0):
        raise InvalidArgumentError("measurement variance R must be > 0")
    mean = np.asarray(initial_mean, dtype=np.float64)
    var = np.asarray(system.P0, dtype=np.float64)
    scalar = all(np.ndim(v) == 0 for v in (F, H, Q, R, var, mean))
    steps = []
    for z in observations:
        z = np.asarray(z, dtype=np.float64)
        prior_mean = F * mean
        prior_var = F * var * F + Q
        gain = prior_var * H / (H * prior_var * H + R)
        mean = prior_mean + gain * (z - H * prior_mean)
        var = (1.0 - gain * H) * prior_var
        if scalar and z.ndim == 0:
            steps.append(OracleStep(float(prior_mean), float(prior_var), float(gain), float(mean), float(var)))
        else:
            steps.append(OracleStep(prior_mean, prior_var, gain, mean, var))
    return steps


def oracle_gains(system: LinearGaussianSystem, steps: int):
    """Gain schedule of the oracle; it does not depend on the observed values."""
    return [s.gain for s in kalman_oracle(system, np.zeros(steps), 0.0)]
