# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()

NAME = "cython"


cdef inline double _iou(double ax1, double ay1, double ax2, double ay2, double aa,
                        double bx1, double by1, double bx2, double by2, double ba) nogil:
    cdef double iw = (ax2 if ax2 < bx2 else bx2) - (ax1 if ax1 > bx1 else bx1)
    cdef double ih = (ay2 if ay2 < by2 else by2) - (ay1 if ay1 > by1 else by1)
    cdef double inter, v
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    v = inter / (aa + ba - inter)
    return v if v < 1.0 else 1.0


def nms(const double[:, ::1] boxes, const double[::1] scores, double thr):
    cdef Py_ssize_t n = boxes.shape[0]
    order_arr = np.argsort(-np.asarray(scores), kind="stable").astype(np.int64)
    cdef const long long[::1] order = order_arr
    x1a = np.empty(n); y1a = np.empty(n); x2a = np.empty(n); y2a = np.empty(n); ara = np.empty(n)
    cdef double[::1] x1 = x1a, y1 = y1a, x2 = x2a, y2 = y2a, ar = ara
    alive_arr = np.ones(n, dtype=np.uint8)
    cdef unsigned char[::1] alive = alive_arr
    keep_arr = np.empty(n, dtype=np.int64)
    cdef long long[::1] keep = keep_arr
    cdef Py_ssize_t i, j, nk = 0
    cdef long long o
    with nogil:
        for i in range(n):
            o = order[i]
            x1[i] = boxes[o, 0]
            y1[i] = boxes[o, 1]
            x2[i] = boxes[o, 0] + boxes[o, 2]
            y2[i] = boxes[o, 1] + boxes[o, 3]
            ar[i] = (x2[i] - x1[i]) * (y2[i] - y1[i])
        for i in range(n):
            if not alive[i]:
                continue
            keep[nk] = order[i]
            nk += 1
            for j in range(i + 1, n):
                if alive[j] and _iou(x1[i], y1[i], x2[i], y2[i], ar[i],
                                     x1[j], y1[j], x2[j], y2[j], ar[j]) > thr:
                    alive[j] = 0
    return keep_arr[:nk].copy()


def roi_pool(const float[:, :, ::1] data, const long long[:, ::1] r0, const long long[:, ::1] r1,
             const long long[:, ::1] c0, const long long[:, ::1] c1):
    cdef Py_ssize_t C = data.shape[0]
    cdef Py_ssize_t n = r0.shape[0], out = r0.shape[1]
    res_arr = np.zeros((n, C, out, out), dtype=np.float32)
    cdef float[:, :, :, ::1] res = res_arr
    cdef Py_ssize_t k, c, i, j, r, q
    cdef float m, v
    with nogil:
        for k in range(n):
            for c in range(C):
                for i in range(out):
                    if r1[k, i] <= r0[k, i]:
                        continue
                    for j in range(out):
                        if c1[k, j] <= c0[k, j]:
                            continue
                        m = -INFINITY
                        for r in range(r0[k, i], r1[k, i]):
                            for q in range(c0[k, j], c1[k, j]):
                                v = data[c, r, q]
                                if v > m:
                                    m = v
                        res[k, c, i, j] = m
    return res_arr


def histograms(const unsigned char[:, ::1] xq_t, const long long[::1] idx, const long long[::1] feats,
               const double[::1] w, const unsigned char[::1] pos):
    cdef Py_ssize_t F = feats.shape[0], n = idx.shape[0]
    out_arr = np.zeros((F, 2, 256), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t k, i
    cdef long long f, r
    with nogil:
        for k in range(F):
            f = feats[k]
            for i in range(n):
                r = idx[i]
                out[k, pos[r], xq_t[f, r]] += w[r]
    return out_arr


def forest_predict(const float[:, ::1] X, const int[::1] feature, const float[::1] threshold,
                   const int[::1] left, const int[::1] right, const float[::1] value,
                   const long long[::1] roots):
    cdef Py_ssize_t n = X.shape[0], T = roots.shape[0]
    total_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] total = total_arr
    cdef Py_ssize_t i, t
    cdef long long node
    cdef int f
    with nogil:
        for t in range(T):
            for i in range(n):
                node = roots[t]
                f = feature[node]
                while f >= 0:
                    if X[i, f] < threshold[node]:
                        node = left[node]
                    else:
                        node = right[node]
                    f = feature[node]
                total[i] += <double>value[node]
    return total_arr
