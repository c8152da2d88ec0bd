# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Contracts mirror ``_pykernels`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, INFINITY

cnp.import_array()


cdef inline double _quad(double d0, double d1, double d2, const double[:, :, ::1] A, Py_ssize_t c) nogil:
    return (d0 * (A[c, 0, 0] * d0 + A[c, 0, 1] * d1 + A[c, 0, 2] * d2)
            + d1 * (A[c, 1, 0] * d0 + A[c, 1, 1] * d1 + A[c, 1, 2] * d2)
            + d2 * (A[c, 2, 0] * d0 + A[c, 2, 1] * d1 + A[c, 2, 2] * d2))


def mahalanobis_knn(const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] indices,
                    const cnp.int64_t[::1] centers, const double[:, ::1] means,
                    const double[:, :, ::1] inv_covs, Py_ssize_t k, double radius_sq):
    cdef Py_ssize_t n_rows = centers.shape[0]
    nbr_arr = np.full((n_rows, k), -1, dtype=np.int64)
    dist_arr = np.full((n_rows, k), np.inf)
    cdef cnp.int64_t[:, ::1] nbr = nbr_arr
    cdef double[:, ::1] dist = dist_arr
    cdef Py_ssize_t r, p, c, j, slot, filled
    cdef double d0, d1, d2, q
    if k == 0:
        return nbr_arr, dist_arr
    with nogil:
        for r in range(n_rows):
            c = centers[r]
            filled = 0
            for p in range(indptr[r], indptr[r + 1]):
                j = indices[p]
                if j == c:
                    continue
                d0 = means[j, 0] - means[c, 0]
                d1 = means[j, 1] - means[c, 1]
                d2 = means[j, 2] - means[c, 2]
                q = _quad(d0, d1, d2, inv_covs, c)
                if q > radius_sq:
                    continue
                if filled == k and (q > dist[r, k - 1] or (q == dist[r, k - 1] and j > nbr[r, k - 1])):
                    continue
                # insertion into the sorted buffer, ordered by (q, index)
                slot = filled if filled < k else k - 1
                while slot > 0 and (dist[r, slot - 1] > q or (dist[r, slot - 1] == q and nbr[r, slot - 1] > j)):
                    if slot < k:
                        dist[r, slot] = dist[r, slot - 1]
                        nbr[r, slot] = nbr[r, slot - 1]
                    slot -= 1
                dist[r, slot] = q
                nbr[r, slot] = j
                if filled < k:
                    filled += 1
    return nbr_arr, dist_arr


def kernel_aggregate(const cnp.int64_t[:, ::1] nbr, const double[:, ::1] means,
                     const double[:, :, ::1] inv_covs, const double[:, :, ::1] kernel_pts,
                     const double[:, ::1] feats):
    cdef Py_ssize_t n = nbr.shape[0], k = nbr.shape[1]
    cdef Py_ssize_t m_count = kernel_pts.shape[1], d_in = feats.shape[1]
    out_arr = np.zeros((n, m_count, d_in))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, a, j, m, d
    cdef double o0, o1, o2, e0, e1, e2, w
    with nogil:
        for i in range(n):
            for a in range(k):
                j = nbr[i, a]
                if j < 0:
                    continue
                o0 = means[j, 0] - means[i, 0]
                o1 = means[j, 1] - means[i, 1]
                o2 = means[j, 2] - means[i, 2]
                for m in range(m_count):
                    e0 = o0 - kernel_pts[i, m, 0]
                    e1 = o1 - kernel_pts[i, m, 1]
                    e2 = o2 - kernel_pts[i, m, 2]
                    w = exp(-0.5 * _quad(e0, e1, e2, inv_covs, i))
                    for d in range(d_in):
                        out[i, m, d] += w * feats[j, d]
    return out_arr


def assign_nearest(const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] indices,
                   const double[:, ::1] means, const double[:, :, ::1] inv_covs,
                   const double[:, ::1] nodes):
    cdef Py_ssize_t n = indptr.shape[0] - 1
    assign_arr = np.full(n, -1, dtype=np.int64)
    best_arr = np.full(n, np.inf)
    cdef cnp.int64_t[::1] assign = assign_arr
    cdef double[::1] best = best_arr
    cdef Py_ssize_t i, p, j
    cdef double q
    with nogil:
        for i in range(n):
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                q = _quad(nodes[j, 0] - means[i, 0], nodes[j, 1] - means[i, 1],
                          nodes[j, 2] - means[i, 2], inv_covs, i)
                if q < best[i] or (q == best[i] and (assign[i] < 0 or j < assign[i])):
                    best[i] = q
                    assign[i] = j
    return assign_arr, best_arr


def dbscan_labels(const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] indices, Py_ssize_t min_pts):
    cdef Py_ssize_t n = indptr.shape[0] - 1
    labels_arr = np.full(n, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] labels = labels_arr
    core_arr = np.zeros(n, dtype=np.uint8)
    cdef cnp.uint8_t[::1] core = core_arr
    queue_arr = np.empty(max(n, 1), dtype=np.int64)
    cdef cnp.int64_t[::1] queue = queue_arr
    cdef Py_ssize_t i, p, j, cnt, head, tail, cur
    cdef cnp.int64_t cluster = 0
    with nogil:
        for i in range(n):
            cnt = 0
            for p in range(indptr[i], indptr[i + 1]):
                if indices[p] != i:
                    cnt += 1
            core[i] = cnt >= min_pts
        for i in range(n):
            if not core[i] or labels[i] >= 0:
                continue
            labels[i] = cluster
            head = 0
            tail = 0
            queue[tail] = i
            tail += 1
            while head < tail:
                cur = queue[head]
                head += 1
                for p in range(indptr[cur], indptr[cur + 1]):
                    j = indices[p]
                    if labels[j] >= 0:
                        continue
                    labels[j] = cluster
                    if core[j]:
                        queue[tail] = j
                        tail += 1
            cluster += 1
    return labels_arr
