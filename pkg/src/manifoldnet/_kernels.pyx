# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled distance kernels.

Every reduction runs in a fixed sequential order (feature axis, then sample
axis) so that results are bit-identical to :mod:`manifoldnet._kernels_py`.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def sq_dists(const double[:, ::1] x, const double[:, ::1] c):
    """Squared L2 distances between every row of ``x`` and every row of ``c``."""
    cdef Py_ssize_t n = x.shape[0], m = c.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double acc, diff
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(n):
            for j in range(m):
                acc = 0.0
                for k in range(d):
                    diff = x[i, k] - c[j, k]
                    acc = acc + diff * diff
                o[i, j] = acc
    return out


def assign_nearest(const double[:, ::1] x, const double[:, ::1] c):
    """Index of the nearest row of ``c`` for each row of ``x`` (lowest index on ties)."""
    cdef Py_ssize_t n = x.shape[0], m = c.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, j, k, best
    cdef double acc, diff, best_d
    labels = np.empty(n, dtype=np.int64)
    dists = np.empty(n, dtype=np.float64)
    cdef cnp.int64_t[::1] lab = labels
    cdef double[::1] dd = dists
    with nogil:
        for i in range(n):
            best = 0
            best_d = 0.0
            for j in range(m):
                acc = 0.0
                for k in range(d):
                    diff = x[i, k] - c[j, k]
                    acc = acc + diff * diff
                if j == 0 or acc < best_d:
                    best = j
                    best_d = acc
            lab[i] = best
            dd[i] = best_d
    return labels, dists


def cluster_sums(const double[:, ::1] x, const cnp.int64_t[::1] labels, Py_ssize_t z):
    """Per-cluster coordinate sums and member counts, accumulated in sample order."""
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, k, lab
    sums = np.zeros((z, d), dtype=np.float64)
    counts = np.zeros(z, dtype=np.int64)
    cdef double[:, ::1] s = sums
    cdef cnp.int64_t[::1] cnt = counts
    with nogil:
        for i in range(n):
            lab = labels[i]
            cnt[lab] += 1
            for k in range(d):
                s[lab, k] = s[lab, k] + x[i, k]
    return sums, counts


def nearest_other(const double[:, ::1] q, const double[:, ::1] g, bint exclude_self):
    """Nearest gallery row for each query row.

    With ``exclude_self`` the gallery is the query set and row ``i`` never
    matches itself. Ties go to the lowest gallery index.
    """
    cdef Py_ssize_t n = q.shape[0], m = g.shape[0], d = q.shape[1]
    cdef Py_ssize_t i, j, k, best
    cdef double acc, diff, best_d
    cdef bint found
    out = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] o = out
    with nogil:
        for i in range(n):
            best = -1
            best_d = 0.0
            found = False
            for j in range(m):
                if exclude_self and j == i:
                    continue
                acc = 0.0
                for k in range(d):
                    diff = q[i, k] - g[j, k]
                    acc = acc + diff * diff
                if not found or acc < best_d:
                    best = j
                    best_d = acc
                    found = True
            o[i] = best
    return out

