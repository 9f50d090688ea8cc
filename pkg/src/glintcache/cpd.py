"""Canonical polyadic decomposition of stacked NDF blocks.

A group of ``L`` angular blocks of side ``t`` is stacked into a tensor
``D[x, y, z]`` (``x`` along h_x, ``y`` along h_y, ``z`` the slab) and
approximated by ``sum_r C[r] * X[r, x] * Y[r, y] * Z[r, z]``.  Per-rank
prefix sums of ``X`` and ``Y`` turn any rectangle average into two
subtractions per axis, because the mean of an outer product over a
rectangle is the product of the per-axis means.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass(eq=False)
class BlockTensor:
    """``t x t x L`` stack of non-blank NDF blocks.

    ``block_index[z]`` records where slab ``z`` came from, as
    ``(level, cell_row, cell_col, block_row, block_col)``.
    """

    values: np.ndarray
    block_index: list = field(default_factory=list)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[0] != v.shape[1]:
            raise ValueError(f"block tensor must be t x t x L, got {v.shape}")
        if v.shape[2] < 1:
            raise ValueError("block tensor needs at least one slab")
        if not np.all(np.isfinite(v)):
            raise ValueError("block tensor contains non-finite values")
        if np.any(v < 0):
            raise ValueError("block tensor values must be non-negative")
        if np.any(np.all(v == 0, axis=(0, 1))):
            raise ValueError("blank slabs must be pruned before stacking")
        self.values = v

    @property
    def t(self):
        return self.values.shape[0]

    @property
    def L(self):
        return self.values.shape[2]


@dataclass(eq=False)
class CpFactors:
    """Rank-R factors; rows of X, Y, Z are unit-norm, magnitudes live in C."""

    C: np.ndarray  # (R,)
    X: np.ndarray  # (R, t)
    Y: np.ndarray  # (R, t)
    Z: np.ndarray  # (R, L)
    fit_error: float = float("nan")
    iterations: int = 0
    history: np.ndarray = field(default_factory=lambda: np.zeros(0))
    X_sat: np.ndarray | None = None
    Y_sat: np.ndarray | None = None

    @property
    def R(self):
        return len(self.C)

    @property
    def t(self):
        return self.X.shape[1]

    @property
    def L(self):
        return self.Z.shape[1]

    def dense(self) -> np.ndarray:
        """Full ``t x t x L`` reconstruction."""
        return np.einsum("r,rx,ry,rz->xyz", self.C, self.X, self.Y, self.Z)


def _relative_error(T, norm2, C, X, Y, Z):
    approx = np.einsum("r,rx,ry,rz->xyz", C, X, Y, Z)
    return float(np.sum((T - approx) ** 2) / norm2)


def _svd_factors(slab, R):
    """Truncated SVD of a single slab recast as CP factors."""
    U, s, Vt = np.linalg.svd(slab)
    k = min(R, len(s))
    return CpFactors(C=s[:k].copy(), X=U[:, :k].T.copy(), Y=Vt[:k].copy(),
                     Z=np.ones((k, 1)))


def _normalise(F):
    norms = np.linalg.norm(F, axis=0)
    safe = np.where(norms > 0, norms, 1.0)
    return F / safe, norms


def cp_als(tensor, R: int, tol: float = 1e-4, max_iter: int = 500,
           seed: int = 0) -> CpFactors:
    """Rank-``R`` CP fit by alternating least squares.

    Each sweep solves the three linear least-squares subproblems exactly
    (pseudo-inverse of the Hadamard Gram matrix), so the objective never
    increases.  Iteration stops once the relative fit changes by less than
    ``tol`` between sweeps or after ``max_iter`` sweeps.  Initial factors are
    uniform in [0, 1) from ``seed``.  Single-slab tensors skip ALS and use a
    truncated SVD.  Components are returned sorted by decreasing weight.
    """
    T = tensor.values if isinstance(tensor, BlockTensor) else np.asarray(tensor, np.float64)
    if T.ndim != 3:
        raise ValueError("expected a 3-way tensor")
    if not np.all(np.isfinite(T)):
        raise ValueError("tensor contains non-finite values")
    if R < 1:
        raise ValueError("rank must be at least 1")
    if tol <= 0:
        raise ValueError("tol must be positive")
    I, J, K = T.shape
    if R > I * J * K:
        warnings.warn(f"rank {R} exceeds tensor size {I * J * K}; clamping", stacklevel=2)
        R = I * J * K

    norm2 = float(np.sum(T * T))
    if norm2 == 0.0:
        zeros = CpFactors(np.zeros(1), np.zeros((1, I)), np.zeros((1, J)), np.zeros((1, K)),
                          fit_error=0.0)
        return build_sats(zeros)

    if K == 1:
        f = _svd_factors(T[:, :, 0], R)
        f.fit_error = _relative_error(T, norm2, f.C, f.X, f.Y, f.Z)
        f.history = np.array([f.fit_error])
        return build_sats(f)

    rng = np.random.default_rng(seed)
    A = rng.random((I, R))
    B = rng.random((J, R))
    Cz = rng.random((K, R))
    weights = np.ones(R)
    T0 = T.reshape(I, J * K)                     # mode-0 unfolding, (j, k) row-major
    T1 = np.moveaxis(T, 1, 0).reshape(J, I * K)  # (i, k)
    T2 = np.moveaxis(T, 2, 0).reshape(K, I * J)  # (i, j)

    history = []
    prev_fit = None
    it = 0
    for it in range(1, max_iter + 1):
        # each update: F = T_(n) KR(others) pinv(Hadamard of Grams)
        kr = (B[:, None, :] * Cz[None, :, :]).reshape(J * K, R)
        A = T0 @ kr @ np.linalg.pinv((B.T @ B) * (Cz.T @ Cz))
        A, _ = _normalise(A)
        kr = (A[:, None, :] * Cz[None, :, :]).reshape(I * K, R)
        B = T1 @ kr @ np.linalg.pinv((A.T @ A) * (Cz.T @ Cz))
        B, _ = _normalise(B)
        kr = (A[:, None, :] * B[None, :, :]).reshape(I * J, R)
        Cz = T2 @ kr @ np.linalg.pinv((A.T @ A) * (B.T @ B))
        Cz, weights = _normalise(Cz)

        err = _relative_error(T, norm2, weights, A.T, B.T, Cz.T)
        history.append(err)
        fit = 1.0 - np.sqrt(err)
        if prev_fit is not None and abs(fit - prev_fit) < tol:
            break
        prev_fit = fit

    order = np.argsort(-weights, kind="stable")
    f = CpFactors(C=weights[order], X=A.T[order].copy(), Y=B.T[order].copy(),
                  Z=Cz.T[order].copy(), iterations=it, history=np.array(history))
    f.fit_error = _relative_error(T, norm2, f.C, f.X, f.Y, f.Z)
    log.debug("cp_als R=%d shape=%s sweeps=%d error=%.3g", R, T.shape, it, f.fit_error)
    return build_sats(f)


def prefix_sums(v: np.ndarray) -> np.ndarray:
    """Exclusive prefix sums along the last axis: ``out[..., k] = sum(v[..., :k])``."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (v.shape[-1] + 1,))
    np.cumsum(v, axis=-1, out=out[..., 1:])
    return out


def build_sats(factors: CpFactors) -> CpFactors:
    factors.X_sat = prefix_sums(factors.X)
    factors.Y_sat = prefix_sums(factors.Y)
    return factors


def segment_mean(sat: np.ndarray, lo, hi):
    """Mean of the underlying vector over the inclusive index range [lo, hi]."""
    return (sat[..., hi + 1] - sat[..., lo]) / (hi - lo + 1)


def reconstruct_block(factors: CpFactors, z: int) -> np.ndarray:
    """Dense ``t x t`` slab ``z``, indexed ``[x, y]``."""
    if not 0 <= z < factors.L:
        raise IndexError(f"slab {z} out of range for L={factors.L}")
    return np.einsum("r,rx,ry->xy", factors.C * factors.Z[:, z], factors.X, factors.Y)


def block_range_mean(factors: CpFactors, z, x1, x2, y1, y2) -> float:
    """Pre-clamp mean of slab ``z`` over ``[x1, x2] x [y1, y2]`` via the SATs."""
    return float(np.sum(factors.C * segment_mean(factors.X_sat, x1, x2)
                        * segment_mean(factors.Y_sat, y1, y2) * factors.Z[:, z]))
