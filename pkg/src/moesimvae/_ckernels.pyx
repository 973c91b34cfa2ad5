# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the pairwise kernels in ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, INFINITY

cnp.import_array()


def knn_from_sqdist(sqdist, Py_ssize_t k):
    cdef double[:, ::1] d = np.ascontiguousarray(sqdist, dtype=np.float64)
    cdef Py_ssize_t n = d.shape[0]
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] out = np.zeros((n, n), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] adj = out
    cdef double[::1] best_d = np.empty(k, dtype=np.float64)
    cdef Py_ssize_t[::1] best_j = np.empty(k, dtype=np.intp)
    cdef Py_ssize_t i, j, m, filled
    cdef double dij
    for i in range(n):
        filled = 0
        for j in range(n):
            if j == i:
                continue
            dij = d[i, j]
            # columns arrive in increasing order, so a strict comparison keeps
            # the lower index ahead on ties
            if filled == k and dij >= best_d[k - 1]:
                continue
            m = filled if filled < k else k - 1
            while m > 0 and best_d[m - 1] > dij:
                best_d[m] = best_d[m - 1]
                best_j[m] = best_j[m - 1]
                m -= 1
            best_d[m] = dij
            best_j[m] = j
            if filled < k:
                filled += 1
        for m in range(filled):
            adj[i, best_j[m]] = 1
            adj[best_j[m], i] = 1
        adj[i, i] = 1
    return out


def similarity_bce(gram, target, bint include_diagonal, double eps):
    cdef double[:, ::1] g = np.ascontiguousarray(gram, dtype=np.float64)
    cdef cnp.uint8_t[:, ::1] s = np.ascontiguousarray(target, dtype=np.uint8)
    cdef Py_ssize_t n = g.shape[0], m = g.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] grad_arr = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] grad = grad_arr
    cdef double total = 0.0, v, gc
    cdef Py_ssize_t i, j
    for i in range(n):
        for j in range(m):
            if i == j and not include_diagonal:
                continue
            v = g[i, j]
            gc = v
            if gc < eps:
                gc = eps
            elif gc > 1.0 - eps:
                gc = 1.0 - eps
            if s[i, j]:
                total -= log(gc)
                if v > eps and v < 1.0 - eps:
                    grad[i, j] = -1.0 / gc
            else:
                total -= log1p(-gc)
                if v > eps and v < 1.0 - eps:
                    grad[i, j] = 1.0 / (1.0 - gc)
    return total, grad_arr


def rbf_kernel(x, y, double bandwidth):
    cdef double[:, ::1] a = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] b = np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t m = a.shape[0], n = b.shape[0], dim = a.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double scale = -1.0 / (2.0 * bandwidth * bandwidth)
    cdef double acc, diff
    cdef Py_ssize_t i, j, t
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(dim):
                diff = a[i, t] - b[j, t]
                acc += diff * diff
            out[i, j] = exp(acc * scale)
    return out_arr


def mmd_block_sums(kmat, in_x):
    cdef double[:, ::1] kk = np.ascontiguousarray(kmat, dtype=np.float64)
    cdef cnp.uint8_t[::1] mx = np.ascontiguousarray(in_x, dtype=np.uint8)
    cdef Py_ssize_t n = kk.shape[0], i, j
    cdef double sxx = 0.0, syy = 0.0, sxy = 0.0
    for i in range(n):
        for j in range(n):
            if mx[i] and mx[j]:
                if i != j:
                    sxx += kk[i, j]
            elif not mx[i] and not mx[j]:
                if i != j:
                    syy += kk[i, j]
            elif mx[i]:
                sxy += kk[i, j]
    return sxx, syy, sxy
