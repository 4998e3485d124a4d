# cython: language_level=3
"""Compiled inner loops. Signatures mirror ``domclp._pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY

cnp.import_array()


def masked_xent(const double[:, ::1] logits, const unsigned char[:, ::1] mask,
                const long long[::1] target):
    cdef Py_ssize_t n = logits.shape[0]
    cdef Py_ssize_t m = logits.shape[1]
    cdef Py_ssize_t i, k
    cdef double mx, s, lse, v
    loss_arr = np.empty(n, dtype=np.float64)
    grad_arr = np.zeros((n, m), dtype=np.float64)
    cdef double[::1] loss = loss_arr
    cdef double[:, ::1] grad = grad_arr
    with nogil:
        for i in range(n):
            mx = -INFINITY
            for k in range(m):
                if mask[i, k] and logits[i, k] > mx:
                    mx = logits[i, k]
            s = 0.0
            for k in range(m):
                if mask[i, k]:
                    v = exp(logits[i, k] - mx)
                    grad[i, k] = v
                    s = s + v
            lse = mx + log(s)
            loss[i] = lse - logits[i, target[i]]
            for k in range(m):
                if mask[i, k]:
                    grad[i, k] = grad[i, k] / s
            grad[i, target[i]] = grad[i, target[i]] - 1.0
    return loss_arr, grad_arr


def assign_nearest(const double[:, ::1] X, const double[:, ::1] C):
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t k = C.shape[0]
    cdef Py_ssize_t d = X.shape[1]
    cdef Py_ssize_t i, j, t, best
    cdef double acc, diff, bestd
    labels_arr = np.empty(n, dtype=np.int64)
    dist_arr = np.empty(n, dtype=np.float64)
    cdef long long[::1] labels = labels_arr
    cdef double[::1] dist = dist_arr
    with nogil:
        for i in range(n):
            best = 0
            bestd = INFINITY
            for j in range(k):
                acc = 0.0
                for t in range(d):
                    diff = X[i, t] - C[j, t]
                    acc = acc + diff * diff
                if acc < bestd:
                    bestd = acc
                    best = j
            labels[i] = best
            dist[i] = bestd
    return labels_arr, dist_arr
