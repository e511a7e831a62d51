# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-pixel inference kernels; same contracts as ``_pykernels``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def select_rows(S):
    cdef double[:, ::1] s = np.ascontiguousarray(S, dtype=np.float64)
    cdef Py_ssize_t N = s.shape[0], C = s.shape[1], n, k
    selected = np.zeros(N, dtype=bool)
    cls = np.full(N, -1, dtype=np.int64)
    cdef cnp.npy_bool[::1] sel = selected
    cdef long long[::1] out = cls
    cdef double best
    cdef long long arg
    cdef bint any_nz
    for n in range(N):
        any_nz = False
        best = s[n, 0]
        arg = 0
        for k in range(C):
            if s[n, k] != 0:
                any_nz = True
            if s[n, k] > best:
                best = s[n, k]
                arg = k
        if any_nz:
            sel[n] = True
            out[n] = arg
    return selected, cls


def aggregate_labels(masks, confidences, class_ids, double threshold):
    cdef double[:, :, ::1] m = np.ascontiguousarray(masks, dtype=np.float64)
    cdef double[::1] conf = np.ascontiguousarray(confidences, dtype=np.float64)
    cdef long long[::1] ids = np.ascontiguousarray(class_ids, dtype=np.int64)
    cdef Py_ssize_t K = m.shape[0], H = m.shape[1], W = m.shape[2], i, y, x
    if K == 0:
        raise ValueError("aggregate_labels needs at least one mask")
    label = np.zeros((H, W), dtype=np.int64)
    cdef long long[:, ::1] out = label
    cdef double best
    cdef long long best_id
    cdef bint found
    for y in range(H):
        for x in range(W):
            found = False
            best = 0.0
            best_id = 0
            for i in range(K):
                if m[i, y, x] >= threshold:
                    if (not found or conf[i] > best
                            or (conf[i] == best and ids[i] < best_id)):
                        found = True
                        best = conf[i]
                        best_id = ids[i]
            out[y, x] = best_id
    return label


def confusion(pred, gt, Py_ssize_t num_labels):
    cdef long long[::1] p = np.ascontiguousarray(np.ravel(pred), dtype=np.int64)
    cdef long long[::1] g = np.ascontiguousarray(np.ravel(gt), dtype=np.int64)
    cdef Py_ssize_t n, P = p.shape[0]
    if g.shape[0] != P:
        raise ValueError("pred and gt sizes differ")
    mat = np.zeros((num_labels, num_labels), dtype=np.int64)
    cdef long long[:, ::1] out = mat
    for n in range(P):
        if p[n] < 0 or p[n] >= num_labels or g[n] < 0 or g[n] >= num_labels:
            raise ValueError("label out of range")
        out[g[n], p[n]] += 1
    return mat
