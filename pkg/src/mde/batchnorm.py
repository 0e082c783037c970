"""Batch-normalization layer state, the forward transform, and running-estimate updates.

A layer's state carries the learnable per-channel scale/shift and the running
mean/variance accumulated by exponential moving average during training. The
running estimates stand in for source-data statistics at drift-scoring time.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .linalg import as_tensor4

__all__ = [
    "GAMMA_FLOOR",
    "BnLayerState",
    "BatchStats",
    "batch_stats",
    "bn_forward",
    "ema_update",
    "source_normalize",
    "target_normalize",
]

# Sign-preserving clamp applied to gamma wherever it appears in a denominator,
# so drift scoring survives degenerate channels instead of aborting.
GAMMA_FLOOR = 1e-6


def _channel_vector(v, name: str) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1:
        raise ValueError(f"{name} must be a 1-D per-channel vector, got ndim={a.ndim}")
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains NaN or Inf")
    return a


@dataclass(frozen=True)
class BnLayerState:
    """Per-channel BN parameters (gamma, beta) and running estimates (mean, variance).

    `running_var` stores the variance; the standard deviation used by the
    forward transform is sqrt(running_var + eps), computed on demand.
    `retain_alpha` is the EMA retain factor: an update keeps alpha of the old
    running value and mixes in (1 - alpha) of the new batch statistic.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    retain_alpha: float = 0.9
    eps: float = 1e-5

    def __post_init__(self):
        for name in ("gamma", "beta", "running_mean", "running_var"):
            object.__setattr__(self, name, _channel_vector(getattr(self, name), name))
        c = self.gamma.shape[0]
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape[0] != c:
                raise ValueError(f"{name} has length {getattr(self, name).shape[0]}, expected {c}")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")
        if not 0.0 <= self.retain_alpha <= 1.0:
            raise ValueError(f"retain_alpha must lie in [0, 1], got {self.retain_alpha}")
        if self.eps < 0:
            raise ValueError(f"eps must be non-negative, got {self.eps}")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @classmethod
    def identity(cls, channels: int, retain_alpha: float = 0.9, eps: float = 1e-5) -> "BnLayerState":
        """Fresh state: unit scale, zero shift, zero running mean, unit running variance."""
        return cls(
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            retain_alpha=retain_alpha,
            eps=eps,
        )


@dataclass(frozen=True)
class BatchStats:
    """Per-channel mean and biased (population) variance of one mini-batch."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _channel_vector(self.mean, "mean"))
        object.__setattr__(self, "var", _channel_vector(self.var, "var"))
        if self.mean.shape != self.var.shape:
            raise ValueError("mean and var must have equal length")
        if np.any(self.var < 0):
            raise ValueError("var must be non-negative")

    @property
    def channels(self) -> int:
        return self.mean.shape[0]


def batch_stats(x) -> BatchStats:
    """Per-channel mean and biased variance over the batch and spatial axes."""
    a = as_tensor4(x)
    return BatchStats(mean=a.mean(axis=(0, 2, 3)), var=a.var(axis=(0, 2, 3)))


def _check_channels(c_data: int, c_state: int):
    if c_data != c_state:
        raise ValueError(f"channel mismatch: data has {c_data}, state has {c_state}")


def bn_forward(x, s: BnLayerState) -> np.ndarray:
    """Inference-mode BN: y = gamma * (x - running_mean) / sqrt(running_var + eps) + beta."""
    a = as_tensor4(x)
    _check_channels(a.shape[1], s.channels)
    inv_std = 1.0 / np.sqrt(s.running_var + s.eps)
    shape = (1, s.channels, 1, 1)
    return (a - s.running_mean.reshape(shape)) * (s.gamma * inv_std).reshape(shape) + s.beta.reshape(shape)


def ema_update(s: BnLayerState, b: BatchStats) -> BnLayerState:
    """New state with running estimates moved toward `b`: run <- alpha*run + (1-alpha)*batch."""
    _check_channels(b.channels, s.channels)
    a = s.retain_alpha
    return replace(
        s,
        running_mean=a * s.running_mean + (1.0 - a) * b.mean,
        running_var=a * s.running_var + (1.0 - a) * b.var,
    )


def clamped_gamma(gamma: np.ndarray) -> np.ndarray:
    """Sign-preserving clamp of gamma away from zero (zero maps to +GAMMA_FLOOR)."""
    return np.where(gamma < 0.0, np.minimum(gamma, -GAMMA_FLOOR), np.maximum(gamma, GAMMA_FLOOR))


def source_normalize(y, s: BnLayerState) -> np.ndarray:
    """Undo the learnable affine part of BN: (y - beta) / gamma, with gamma clamped.

    Applied to a BN output this recovers (x - running_mean) / sqrt(running_var + eps),
    the input as seen through the source-data statistics.
    """
    a = as_tensor4(y)
    _check_channels(a.shape[1], s.channels)
    shape = (1, s.channels, 1, 1)
    return (a - s.beta.reshape(shape)) / clamped_gamma(s.gamma).reshape(shape)


def target_normalize(x, b: BatchStats, eps: float = 1e-5) -> np.ndarray:
    """Normalize by the mini-batch's own statistics: (x - mean) / sqrt(var + eps)."""
    a = as_tensor4(x)
    _check_channels(a.shape[1], b.channels)
    if eps < 0:
        raise ValueError(f"eps must be non-negative, got {eps}")
    shape = (1, b.channels, 1, 1)
    return (a - b.mean.reshape(shape)) / np.sqrt(b.var + eps).reshape(shape)
