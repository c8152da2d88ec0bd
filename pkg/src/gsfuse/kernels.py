"""Backend selection for the hot kernels.

The compiled Cython extension is used when it imports cleanly; otherwise the
numpy implementation in :mod:`._pykernels` takes over. Set
``GSFUSE_PURE_PYTHON=1`` to force the fallback.

Kernels
-------
mahalanobis_knn(indptr, indices, centers, means, inv_covs, k, radius_sq)
    For each row ``r`` (center ``centers[r]``) keep the ``k`` candidates with
    smallest squared Mahalanobis distance under the center's inverse
    covariance, excluding the center itself and anything beyond
    ``radius_sq``. Ties go to the lower index. Returns ``(nbr, d2)`` padded
    with ``-1`` / ``inf``.
kernel_aggregate(nbr, means, inv_covs, kernel_pts, feats)
    ``out[i, m] = sum_j exp(-0.5 d^T inv_covs[i] d) * feats[j]`` with
    ``d = means[j] - means[i] - kernel_pts[i, m]``.
assign_nearest(indptr, indices, means, inv_covs, nodes)
    Per Gaussian, the candidate node with the smallest squared Mahalanobis
    distance (lowest node index on ties).
dbscan_labels(indptr, indices, min_pts)
    Sequential-scan DBSCAN labels from a radius-neighbour graph; a point is
    core with at least ``min_pts`` neighbours other than itself.
"""
from __future__ import annotations

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("GSFUSE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        _impl = _pykernels

mahalanobis_knn = _impl.mahalanobis_knn
kernel_aggregate = _impl.kernel_aggregate
assign_nearest = _impl.assign_nearest
dbscan_labels = _impl.dbscan_labels


def backend_module(name: str):
    """Return the kernel module for ``"python"`` or ``"cython"`` explicitly."""
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")
