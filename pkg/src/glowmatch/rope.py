"""Rotary relative positional encoding for 2D keypoints.

Each attention head's feature space is split into 2D subspaces; subspace k of
point i is rotated by the angle ``theta[i, k] = basis[k] . p_i`` where ``p_i``
is the normalized 2D position.  Because plane rotations compose additively,
rotating queries by R(p_i) and keys by R(p_j) makes every dot-product score
depend only on the relative position ``p_j - p_i``.

Angles depend only on positions and the learned frequency basis, so they are
computed once per image per pass and reused by every layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ContractViolation
from .features import NormalizedPoints


def init_basis(rng: np.random.Generator, subspaces: int, dtype=np.float32) -> np.ndarray:
    """Random frequency basis, one 2D vector per rotation subspace."""
    return rng.normal(0.0, 1.0, size=(subspaces, 2)).astype(dtype)


@dataclass
class RotationCache:
    """Per-point rotation angles for one image, shared by all layers.

    ``theta`` is a Tensor when the frequency basis is being trained (so
    gradients can reach it) and may wrap a plain array otherwise.
    """

    theta: nc.Tensor  # (N, K) angles

    @property
    def n(self) -> int:
        return self.theta.shape[0]

    @property
    def cos(self) -> np.ndarray:
        return np.cos(self.theta.data)

    @property
    def sin(self) -> np.ndarray:
        return np.sin(self.theta.data)

    def rotate(self, x) -> nc.Tensor:
        """Rotate per-head vectors ``x`` (..., N, 2K) by the cached angles."""
        return nc.rotate_pairs(x, self.theta)

    def take(self, idx: np.ndarray) -> "RotationCache":
        """Row-subset of the cache (after point pruning)."""
        return RotationCache(nc.Tensor(self.theta.data[idx]))


def build_cache(points: NormalizedPoints, basis) -> RotationCache:
    """Project normalized coordinates onto the frequency basis once per pass."""
    basis_t = basis if isinstance(basis, nc.Tensor) else nc.Tensor(np.asarray(basis))
    if not np.all(np.isfinite(basis_t.data)):
        raise ContractViolation("rotary basis contains non-finite entries")
    coords = nc.Tensor(np.ascontiguousarray(points.coords, dtype=basis_t.dtype))
    theta = nc.matmul(coords, nc.transpose(basis_t, (1, 0)))  # (N, K)
    return RotationCache(theta)


def apply_rotation(vec: np.ndarray, cos_row: np.ndarray, sin_row: np.ndarray) -> np.ndarray:
    """Rotate one even-width vector by one cache entry (plain-array helper)."""
    vec = np.asarray(vec)
    if vec.shape[-1] % 2 != 0:
        raise ContractViolation(f"vector width must be even, got {vec.shape[-1]}")
    out = np.empty_like(vec)
    xe, xo = vec[..., 0::2], vec[..., 1::2]
    out[..., 0::2] = xe * cos_row - xo * sin_row
    out[..., 1::2] = xe * sin_row + xo * cos_row
    return out
