"""KD-tree helpers shared by the skeleton, feature, and fusion stages."""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

_QUERY_CHUNK = 4096


def radius_graph(tree: cKDTree, points: np.ndarray, radii, workers: int = 1):
    """CSR ``(indptr, indices)`` of tree points within ``radii`` of each query point.

    ``radii`` may be a scalar or one radius per query point. Queries run in
    chunks so the intermediate Python lists stay small.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    radii = np.broadcast_to(np.asarray(radii, dtype=np.float64), (n,))
    counts = np.zeros(n, dtype=np.int64)
    parts = []
    for lo in range(0, n, _QUERY_CHUNK):
        hi = min(n, lo + _QUERY_CHUNK)
        lists = tree.query_ball_point(points[lo:hi], radii[lo:hi], workers=workers)
        lens = np.fromiter((len(x) for x in lists), dtype=np.int64, count=hi - lo)
        counts[lo:hi] = lens
        if lens.sum():
            parts.append(np.fromiter((j for x in lists for j in x), dtype=np.int64, count=int(lens.sum())))
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    indices = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
    return indptr, indices


def median_nn_spacing(points: np.ndarray) -> float:
    """Median distance from each point to its nearest distinct neighbour."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        return 0.0
    d, _ = cKDTree(points).query(points, k=2)
    d = d[:, 1]
    pos = d[d > 0]
    return float(np.median(pos)) if len(pos) else 0.0


def nearest_with_ties(tree: cKDTree, points: np.ndarray, k: int = 4):
    """Nearest tree point per query, lowest index among exact-distance ties."""
    k = min(k, tree.n)
    d, idx = tree.query(points, k=k)
    if k == 1:
        return d, idx
    ties = d == d[:, :1]
    idx_masked = np.where(ties, idx, np.iinfo(np.int64).max)
    return d[:, 0], idx_masked.min(axis=1)


def symmetric_hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    dab = cKDTree(b).query(a)[0].max()
    dba = cKDTree(a).query(b)[0].max()
    return float(max(dab, dba))
