# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops of the residual quantizer.

Semantics mirror gesticulate.kernels' numpy fallbacks exactly; ties in the
nearest-entry search resolve to the lowest index in both implementations.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def nearest_codes(double[:, ::1] latents, double[:, ::1] entries):
    """Index of the squared-distance-nearest entry for every latent row."""
    cdef Py_ssize_t n = latents.shape[0]
    cdef Py_ssize_t dim = latents.shape[1]
    cdef Py_ssize_t k = entries.shape[0]
    if entries.shape[1] != dim:
        raise ValueError("latents and entries disagree on channel count")
    out = np.empty(n, dtype=np.int64)
    cdef long long[::1] out_v = out
    cdef Py_ssize_t i, j, c, best_j
    cdef double best, dist, diff
    for i in range(n):
        best = np.inf
        best_j = 0
        for j in range(k):
            dist = 0.0
            for c in range(dim):
                diff = latents[i, c] - entries[j, c]
                dist += diff * diff
            if dist < best:  # strict: equal distances keep the lower index
                best = dist
                best_j = j
        out_v[i] = best_j
    return out


def code_stats(long long[::1] codes, double[:, ::1] latents, Py_ssize_t k):
    """Per-code hit counts and per-code sums of the assigned latents."""
    cdef Py_ssize_t n = latents.shape[0]
    cdef Py_ssize_t dim = latents.shape[1]
    if codes.shape[0] != n:
        raise ValueError("codes and latents disagree on row count")
    counts = np.zeros(k, dtype=np.float64)
    sums = np.zeros((k, dim), dtype=np.float64)
    cdef double[::1] counts_v = counts
    cdef double[:, ::1] sums_v = sums
    cdef Py_ssize_t i, c
    cdef long long code
    for i in range(n):
        code = codes[i]
        if code < 0 or code >= k:
            raise ValueError("code id out of range")
        counts_v[code] += 1.0
        for c in range(dim):
            sums_v[code, c] += latents[i, c]
    return counts, sums
