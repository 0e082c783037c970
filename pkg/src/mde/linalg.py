"""Dense activation tensors and truncated-SVD low-rank refinement.

Activations are plain float64 numpy arrays in (batch, channel, height, width)
layout; matrices are 2-D float64 arrays. The helpers here validate those
conventions and provide the channel reshaping and rank truncation used to
refine normalization-layer inputs before drift scoring.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SvdResult",
    "as_tensor4",
    "as_matrix",
    "reshape_channels",
    "sample_from_channels",
    "svd",
    "truncate_reconstruct",
    "refine_low_rank",
]


def as_tensor4(x) -> np.ndarray:
    """Coerce to a (B, C, H, W) float64 array, rejecting bad shapes and non-finite values."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 4:
        raise ValueError(f"expected a (batch, channel, height, width) array, got ndim={a.ndim}")
    if min(a.shape) < 1:
        raise ValueError(f"empty tensor: shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError("tensor contains NaN or Inf")
    return a


def as_matrix(m) -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting bad shapes and non-finite values."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={a.ndim}")
    if min(a.shape) < 1:
        raise ValueError(f"empty matrix: shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError("matrix contains NaN or Inf")
    return a


def reshape_channels(x, sample_index: int) -> np.ndarray:
    """Return sample `sample_index` of a (B, C, H, W) tensor as a C x (H*W) matrix.

    Element (c, h*W + w) of the result equals x[sample_index, c, h, w].
    """
    a = as_tensor4(x)
    b = a.shape[0]
    if not 0 <= sample_index < b:
        raise IndexError(f"sample index {sample_index} out of range for batch of {b}")
    c, h, w = a.shape[1:]
    return a[sample_index].reshape(c, h * w).copy()


def sample_from_channels(m, height: int, width: int) -> np.ndarray:
    """Inverse of reshape_channels for one sample: C x (H*W) matrix back to (C, H, W)."""
    a = as_matrix(m)
    if a.shape[1] != height * width:
        raise ValueError(f"matrix has {a.shape[1]} columns, expected {height}*{width}")
    return a.reshape(a.shape[0], height, width).copy()


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD factors: u (rows x k), singular_values (k, non-increasing), vt (k x cols)."""

    u: np.ndarray
    singular_values: np.ndarray
    vt: np.ndarray


def svd(m, tol: float = 1e-10) -> SvdResult:
    """Thin singular value decomposition of a matrix, k = min(rows, cols).

    `tol` is the accepted convergence tolerance; the LAPACK backend converges
    well below it, so it only participates in argument validation.
    """
    a = as_matrix(m)
    if tol <= 0:
        raise ValueError("tol must be positive")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    return SvdResult(u=u, singular_values=s, vt=vt)


def truncate_reconstruct(m, r_tr: float) -> np.ndarray:
    """Best rank-k approximation of `m`, keeping k = ceil(r_tr * min(rows, cols)) singular values.

    ceil rounding means any r_tr in (0, 1] keeps at least one component.
    """
    a = as_matrix(m)
    if not 0.0 < r_tr <= 1.0:
        raise ValueError(f"truncation ratio must lie in (0, 1], got {r_tr}")
    k = math.ceil(r_tr * min(a.shape))
    res = svd(a)
    u = res.u[:, :k]
    s = res.singular_values[:k]
    vt = res.vt[:k, :]
    return (u * s) @ vt


def refine_low_rank(x, r_tr: float) -> np.ndarray:
    """Apply truncate_reconstruct to every sample's C x (H*W) view of a (B, C, H, W) tensor."""
    a = as_tensor4(x)
    b, c, h, w = a.shape
    out = np.empty_like(a)
    for i in range(b):
        out[i] = truncate_reconstruct(a[i].reshape(c, h * w), r_tr).reshape(c, h, w)
    return out
