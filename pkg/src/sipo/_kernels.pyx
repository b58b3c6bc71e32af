# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot numerical kernels (see ``_purekernels``)."""
import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt, INFINITY

cnp.import_array()


def rbf_similarity(queries, cloud, double sigma2):
    cdef const double[:, ::1] q = np.ascontiguousarray(queries, dtype=np.float64)
    cdef const double[:, ::1] c = np.ascontiguousarray(cloud, dtype=np.float64)
    cdef Py_ssize_t n = q.shape[0], m = c.shape[0], d = q.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double acc, sq, diff
    cdef double inv = 1.0 / (2.0 * sigma2)
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(m):
                sq = 0.0
                for k in range(d):
                    diff = q[i, k] - c[j, k]
                    sq = sq + diff * diff
                acc = acc + exp(-sq * inv)
            o[i] = acc / m
    return out


def kth_neighbor_distances(points, int k):
    cdef const double[:, ::1] p = np.ascontiguousarray(points, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0], d = p.shape[1]
    cdef Py_ssize_t i, j, a, pos
    cdef double sq, diff
    # per-row buffer holding the k smallest squared distances, sorted ascending
    best = np.empty(k, dtype=np.float64)
    cdef double[::1] b = best
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            for a in range(k):
                b[a] = INFINITY
            for j in range(n):
                if j == i:
                    continue
                sq = 0.0
                for a in range(d):
                    diff = p[i, a] - p[j, a]
                    sq = sq + diff * diff
                if sq < b[k - 1]:
                    pos = k - 1
                    while pos > 0 and b[pos - 1] > sq:
                        b[pos] = b[pos - 1]
                        pos = pos - 1
                    b[pos] = sq
            o[i] = sqrt(b[k - 1])
    return out


def gae(rewards, values, next_values, ends, double gamma, double lam):
    cdef const double[::1] r = np.ascontiguousarray(rewards, dtype=np.float64)
    cdef const double[::1] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef const double[::1] nv = np.ascontiguousarray(next_values, dtype=np.float64)
    cdef const cnp.uint8_t[::1] e = np.ascontiguousarray(ends, dtype=np.uint8)
    cdef Py_ssize_t n = r.shape[0], t
    cdef double running = 0.0, delta
    adv = np.empty(n, dtype=np.float64)
    cdef double[::1] a = adv
    with nogil:
        for t in range(n - 1, -1, -1):
            delta = r[t] + gamma * nv[t] - v[t]
            if e[t]:
                running = 0.0
            running = delta + gamma * lam * running
            a[t] = running
    return adv
