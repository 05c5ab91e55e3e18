"""Temporal DCT/IDCT and the two positional encodings.

The DCT is the orthonormal DCT-II applied along the time axis, one coordinate
channel at a time. Orthonormality makes the inverse the transpose of the
forward basis and preserves L2 norms (Parseval), which keeps gradients through
the transform well scaled. Plans are cached per length because progressive
training touches several sequence lengths.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, matmul, reshape, transpose
from .errors import ConfigError, ShapeError

_plan_lock = threading.Lock()
_plan_cache: dict[int, "DctPlan"] = {}


@dataclass(frozen=True)
class DctPlan:
    """Precomputed orthonormal DCT-II basis for one sequence length."""

    length: int
    basis: np.ndarray  # (n, n); row j is the j-th cosine basis vector

    @staticmethod
    def for_length(n: int) -> "DctPlan":
        if n < 1:
            raise ShapeError(f"DCT length must be >= 1, got {n}")
        with _plan_lock:
            plan = _plan_cache.get(n)
            if plan is None:
                plan = DctPlan(length=n, basis=_dct_basis(n))
                _plan_cache[n] = plan
            return plan


def _dct_basis(n: int) -> np.ndarray:
    i = np.arange(n)
    j = i.reshape(-1, 1)
    basis = np.cos(np.pi * (2 * i + 1) * j / (2 * n))
    basis *= math.sqrt(2.0 / n)
    basis[0] = math.sqrt(1.0 / n)  # the j=0 cosines are all 1
    return basis


def dct_forward(seq: Tensor | np.ndarray) -> Tensor | np.ndarray:
    """DCT-II coefficients of ``seq`` along axis 0, per channel.

    Accepts a plain array (returns an array) or a tape tensor (returns a
    differentiable tensor; the transform is a constant linear map).
    """
    if isinstance(seq, Tensor):
        plan = DctPlan.for_length(seq.shape[0])
        return matmul(Tensor(plan.basis), seq)
    seq = np.asarray(seq, dtype=np.float64)
    plan = DctPlan.for_length(seq.shape[0])
    return plan.basis @ seq


def dct_forward_stacked(seq: Tensor | np.ndarray) -> Tensor | np.ndarray:
    """DCT-II along axis 1 of a (batch, n, channels) stack."""
    if isinstance(seq, Tensor):
        b, n, c = seq.shape
        plan = DctPlan.for_length(n)
        flat = reshape(transpose(seq, 1, 0, 2), n, b * c)
        return transpose(reshape(matmul(Tensor(plan.basis), flat), n, b, c), 1, 0, 2)
    seq = np.asarray(seq, dtype=np.float64)
    plan = DctPlan.for_length(seq.shape[1])
    return np.einsum("ts,bsc->btc", plan.basis, seq)


def dct_inverse(coeffs: Tensor | np.ndarray) -> Tensor | np.ndarray:
    """Exact inverse of :func:`dct_forward` (transpose of the orthonormal basis)."""
    if isinstance(coeffs, Tensor):
        plan = DctPlan.for_length(coeffs.shape[0])
        return matmul(Tensor(plan.basis.T.copy()), coeffs)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    plan = DctPlan.for_length(coeffs.shape[0])
    return plan.basis.T @ coeffs


def temporal_pe(length: int, dim: int) -> np.ndarray:
    """Sinusoidal position table: sin on even channels, cos on odd ones."""
    if dim % 2 != 0:
        raise ConfigError(f"temporal positional encoding needs an even dim, got {dim}")
    positions = np.arange(length, dtype=np.float64).reshape(-1, 1)
    freqs = np.exp(-math.log(10000.0) * np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.zeros((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(positions * freqs)
    table[:, 1::2] = np.cos(positions * freqs)
    return table


@dataclass(frozen=True)
class SpeMatrix:
    """Query-relative spatial encoding: one scalar in (0, 1] per (person, step).

    Entry (n, t) is exp(-||pose(n, t) - query||^2 / pose_dim); it is exactly 1
    where the pose equals the query and decays with squared distance. Values
    are computed from raw input poses and carry no gradient.
    """

    values: np.ndarray  # (N, k)
    queried_pose: np.ndarray  # (pose_dim,)


def spatial_pe(all_poses: np.ndarray, query_pose: np.ndarray) -> SpeMatrix:
    """Spatial encoding of every (person, step) pose against the query pose.

    ``all_poses`` is (N, k, pose_dim) with pose_dim = 3 * joints; the same
    flattening must be used for ``query_pose``.
    """
    all_poses = np.asarray(all_poses, dtype=np.float64)
    query_pose = np.asarray(query_pose, dtype=np.float64)
    if all_poses.ndim != 3 or all_poses.shape[-1] != query_pose.shape[-1]:
        raise ShapeError(
            f"pose dims disagree: all_poses {all_poses.shape}, query {query_pose.shape}"
        )
    diff = all_poses - query_pose
    sq_dist = np.einsum("nkd,nkd->nk", diff, diff)
    values = np.exp(-sq_dist / all_poses.shape[-1])
    return SpeMatrix(values=values, queried_pose=query_pose.copy())
