"""Point-set geometry: Chamfer distances, F1, farthest point sampling.

Non-differentiable kernels operate on plain numpy arrays (kd-tree backed);
``diff_*`` variants run on the tape with gradients flowing only through
the selected nearest pairs (ties broken by lowest index).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from scipy.spatial import cKDTree

from . import tape
from .tape import Tensor


class Provenance(IntEnum):
    INPUT = 0
    GENERATED = 1
    UPSAMPLED = 2


@dataclass
class PointSet:
    """N x 3 coordinates in the unit-normalized frame, optional provenance."""

    points: np.ndarray
    tags: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) < 1:
            raise ValueError(f"PointSet needs an (N, 3) array with N >= 1, got {self.points.shape}")
        if not np.isfinite(self.points).all():
            raise ValueError("PointSet coordinates must be finite")
        if self.tags is not None:
            self.tags = np.asarray(self.tags, dtype=np.int8)
            if self.tags.shape != (len(self.points),):
                raise ValueError("provenance tags must cover all points")

    def __len__(self):
        return len(self.points)


def as_points(x) -> np.ndarray:
    """Accept a PointSet or raw array and return the (N, 3) float64 view."""
    if isinstance(x, PointSet):
        return x.points
    if isinstance(x, Tensor):
        x = x.data
    pts = np.ascontiguousarray(x, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 1:
        raise ValueError(f"expected an (N, 3) point array with N >= 1, got {pts.shape}")
    return pts


class KdTree:
    """Exact nearest-neighbor index over one point set; immutable after build."""

    def __init__(self, points):
        self.points = as_points(points)
        self._tree = cKDTree(self.points)

    def query(self, q):
        """(distances, indices) of the nearest stored point per query."""
        d, i = self._tree.query(np.asarray(q, dtype=np.float64))
        return d, i


def _nn_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d, _ = cKDTree(b).query(a)
    return d * d


def chamfer_single(a, b) -> float:
    """Mean squared distance from each point of ``a`` to its nearest in ``b``."""
    a, b = as_points(a), as_points(b)
    return float(_nn_sq(a, b).mean())


def chamfer_bi(a, b) -> float:
    """Bidirectional Chamfer distance (sum of the two single-sided means)."""
    a, b = as_points(a), as_points(b)
    return float(_nn_sq(a, b).mean() + _nn_sq(b, a).mean())


def f1_score(pred, gt, tau: float) -> float:
    """F1 at threshold ``tau`` (unsquared distances), reported in [0, 100]."""
    if tau <= 0:
        raise ValueError(f"f1_score: tau must be positive, got {tau}")
    pred, gt = as_points(pred), as_points(gt)
    precision = float((np.sqrt(_nn_sq(pred, gt)) <= tau).mean())
    recall = float((np.sqrt(_nn_sq(gt, pred)) <= tau).mean())
    if precision + recall == 0.0:
        return 0.0
    return 100.0 * 2.0 * precision * recall / (precision + recall)


def canonical_seed_index(points) -> int:
    """Lexicographically smallest point; stable under permutation of the set."""
    pts = as_points(points)
    return int(np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))[0])


def fps_indices(points, k: int, seed_index: int = 0) -> np.ndarray:
    """Greedy max-min farthest point sampling, returning selected indices."""
    pts = as_points(points)
    n = len(pts)
    if not 1 <= k <= n:
        raise ValueError(f"fps: k must lie in [1, {n}], got {k}")
    if not 0 <= seed_index < n:
        raise ValueError(f"fps: seed_index {seed_index} out of range for {n} points")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = seed_index
    d = ((pts - pts[seed_index]) ** 2).sum(axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(d))
        chosen[i] = nxt
        d = np.minimum(d, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return chosen


def fps(P, k: int, seed_index: int = 0) -> PointSet:
    """Farthest point sampling preserving original coordinates and tags."""
    pts = as_points(P)
    idx = fps_indices(pts, k, seed_index)
    tags = P.tags[idx] if isinstance(P, PointSet) and P.tags is not None else None
    return PointSet(pts[idx], tags)


def huber(t: float, delta: float) -> float:
    """Scalar Huber: t^2/2 for |t| <= delta, delta*(|t| - delta/2) beyond."""
    if delta <= 0:
        raise ValueError(f"huber: delta must be positive, got {delta}")
    a = abs(t)
    if a <= delta:
        return 0.5 * t * t
    return delta * (a - 0.5 * delta)


# --- differentiable variants -------------------------------------------


def nn_indices(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Index into ``b`` of the nearest neighbor of each row of ``a``.

    Ties resolve to the lowest index (argmin on the explicit distance
    matrix for small inputs; kd-tree beyond that, where exact ties have
    measure zero).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] * b.shape[0] <= 4_000_000:
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d2, axis=1)
    _, idx = cKDTree(b).query(a)
    return idx


def _pair_mean_sq(a: Tensor, b: Tensor, idx: np.ndarray) -> Tensor:
    matched = tape.gather(b, idx, axis=0)
    return tape.tmean(tape.tsum(tape.square(tape.sub(a, matched)), axis=1))


def diff_chamfer_single(a: Tensor, b: Tensor) -> Tensor:
    """Differentiable single-sided Chamfer (a -> b), gradients through
    the selected nearest pairs only."""
    a, b = tape.as_tensor(a), tape.as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != 3 or b.shape[1] != 3:
        raise tape.ShapeError(f"diff_chamfer: expected (N,3)/(M,3), got {a.shape}, {b.shape}")
    idx = nn_indices(a.data, b.data)
    return _pair_mean_sq(a, b, idx)


def diff_chamfer_bi(a: Tensor, b: Tensor) -> Tensor:
    """Differentiable bidirectional Chamfer distance."""
    a, b = tape.as_tensor(a), tape.as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != 3 or b.shape[1] != 3:
        raise tape.ShapeError(f"diff_chamfer: expected (N,3)/(M,3), got {a.shape}, {b.shape}")
    ia = nn_indices(a.data, b.data)
    ib = nn_indices(b.data, a.data)
    return tape.add(_pair_mean_sq(a, b, ia), _pair_mean_sq(b, a, ib))


def diff_huber(t: Tensor, delta: float) -> Tensor:
    """Differentiable elementwise Huber (tape primitive re-export)."""
    return tape.huber(t, delta)
