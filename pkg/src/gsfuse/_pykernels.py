"""Vectorized numpy versions of the hot kernels.

These are the reference fallback used when the compiled ``_ckernels``
extension is unavailable (or ``GSFUSE_PURE_PYTHON=1``). Both backends share
the exact signatures and tie-breaking rules documented in :mod:`.kernels`.
"""
from __future__ import annotations

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

_CHUNK = 4096


def _row_ids(indptr):
    return np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))


def _quad(delta, inv):
    # delta (P, 3), inv (P, 3, 3)
    return np.einsum("pi,pij,pj->p", delta, inv, delta)


def mahalanobis_knn(indptr, indices, centers, means, inv_covs, k, radius_sq):
    indptr = np.asarray(indptr, dtype=np.int64)
    indices = np.asarray(indices, dtype=np.int64)
    centers = np.asarray(centers, dtype=np.int64)
    n_rows = len(centers)
    nbr = np.full((n_rows, k), -1, dtype=np.int64)
    dist = np.full((n_rows, k), np.inf)
    if n_rows == 0 or k == 0:
        return nbr, dist
    rows = _row_ids(indptr)
    c = centers[rows]
    keep = indices != c
    rows, c, cand = rows[keep], c[keep], indices[keep]
    d2 = _quad(means[cand] - means[c], inv_covs[c])
    keep = d2 <= radius_sq
    rows, cand, d2 = rows[keep], cand[keep], d2[keep]
    order = np.lexsort((cand, d2, rows))
    rows, cand, d2 = rows[order], cand[order], d2[order]
    starts = np.searchsorted(rows, np.arange(n_rows))
    rank = np.arange(len(rows)) - starts[rows]
    sel = rank < k
    nbr[rows[sel], rank[sel]] = cand[sel]
    dist[rows[sel], rank[sel]] = d2[sel]
    return nbr, dist


def kernel_aggregate(nbr, means, inv_covs, kernel_pts, feats):
    nbr = np.asarray(nbr, dtype=np.int64)
    n, k = nbr.shape
    m = kernel_pts.shape[1]
    d_in = feats.shape[1]
    out = np.zeros((n, m, d_in))
    for lo in range(0, n, _CHUNK):
        hi = min(n, lo + _CHUNK)
        nb = nbr[lo:hi]
        valid = nb >= 0
        safe = np.where(valid, nb, 0)
        offs = means[safe] - means[lo:hi, None, :]                      # (c, k, 3)
        d = offs[:, :, None, :] - kernel_pts[lo:hi, None, :, :]         # (c, k, m, 3)
        q = np.einsum("ckmi,cij,ckmj->ckm", d, inv_covs[lo:hi], d)
        w = np.exp(-0.5 * q) * valid[:, :, None]
        out[lo:hi] = np.einsum("ckm,ckd->cmd", w, feats[safe])
    return out


def assign_nearest(indptr, indices, means, inv_covs, nodes):
    indptr = np.asarray(indptr, dtype=np.int64)
    indices = np.asarray(indices, dtype=np.int64)
    n = len(indptr) - 1
    assign = np.full(n, -1, dtype=np.int64)
    best = np.full(n, np.inf)
    if len(indices) == 0:
        return assign, best
    rows = _row_ids(indptr)
    d2 = _quad(nodes[indices] - means[rows], inv_covs[rows])
    order = np.lexsort((indices, d2, rows))
    rows_s = rows[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = rows_s[1:] != rows_s[:-1]
    pick = order[first]
    assign[rows[pick]] = indices[pick]
    best[rows[pick]] = d2[pick]
    return assign, best


def dbscan_labels(indptr, indices, min_pts):
    indptr = np.asarray(indptr, dtype=np.int64)
    indices = np.asarray(indices, dtype=np.int64)
    n = len(indptr) - 1
    rows = _row_ids(indptr)
    not_self = indices != rows
    counts = np.bincount(rows[not_self], minlength=n)
    core = counts >= min_pts
    labels = np.full(n, -1, dtype=np.int64)
    if not core.any():
        return labels
    edge = not_self & core[rows] & core[indices]
    g = csr_matrix((np.ones(edge.sum()), (rows[edge], indices[edge])), shape=(n, n))
    _, comp = connected_components(g, directed=False)
    core_idx = np.flatnonzero(core)
    # number clusters by their lowest core index, as a sequential scan would
    comp_core = comp[core_idx]
    first_seen = {}
    for c in comp_core:
        if c not in first_seen:
            first_seen[c] = len(first_seen)
    remap = np.array([first_seen.get(c, -1) for c in range(comp.max() + 1)])
    labels[core_idx] = remap[comp_core]
    # border points join the earliest-created cluster among their core neighbours
    border = ~core
    sel = not_self & border[rows] & core[indices]
    if sel.any():
        cl = labels[indices[sel]]
        r = rows[sel]
        best = np.full(n, np.iinfo(np.int64).max)
        np.minimum.at(best, r, cl)
        hit = best != np.iinfo(np.int64).max
        labels[hit] = best[hit]
    return labels
