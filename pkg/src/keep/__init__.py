"""Kalman-style latent feature propagation for sequential image restoration."""

__version__ = "0.1.0"

from keep.propagation import KeepConfig, SequenceResult, run_keep  # noqa: E402
from keep.state_space import LinearGaussianSystem, kalman_oracle, update  # noqa: E402

__all__ = ["KeepConfig", "LinearGaussianSystem", "SequenceResult", "kalman_oracle", "run_keep", "update"]
