# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: same-padded conv1d and fused softmax cross-entropy.

Signatures mirror ``_kernels_py``. Inner loops run over a contiguous position
range precomputed per kernel tap, so they carry no padding branch.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


cdef inline Py_ssize_t _lo(Py_ssize_t k, Py_ssize_t pad) nogil:
    # first output position whose tap k reads inside the signal
    return pad - k if pad > k else 0


cdef inline Py_ssize_t _hi(Py_ssize_t k, Py_ssize_t pad, Py_ssize_t L) nogil:
    return L + pad - k if k > pad else L


def conv1d_forward(const double[:, :, ::1] x, const double[:, :, ::1] w,
                   const double[::1] b):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t O = w.shape[0], K = w.shape[2]
    cdef Py_ssize_t pad = K // 2
    cdef Py_ssize_t bi, o, c, k, l, lo, hi, shift
    cdef double wv
    cdef const double* xr
    cdef double* yr
    out = np.empty((B, O, L))
    cdef double[:, :, ::1] y = out
    with nogil:
        for bi in range(B):
            for o in range(O):
                yr = &y[bi, o, 0]
                for l in range(L):
                    yr[l] = b[o]
                for c in range(C):
                    xr = &x[bi, c, 0]
                    for k in range(K):
                        wv = w[o, c, k]
                        lo = _lo(k, pad)
                        hi = _hi(k, pad, L)
                        shift = k - pad
                        for l in range(lo, hi):
                            yr[l] += wv * xr[l + shift]
    return out


def conv1d_backward(const double[:, :, ::1] gy, const double[:, :, ::1] x,
                    const double[:, :, ::1] w):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t O = w.shape[0], K = w.shape[2]
    cdef Py_ssize_t pad = K // 2
    cdef Py_ssize_t bi, o, c, k, l, lo, hi, shift
    cdef double acc, g
    cdef const double* gr
    cdef const double* xr
    cdef double* gxr
    gx_arr = np.zeros((B, C, L))
    gw_arr = np.zeros((O, C, K))
    gb_arr = np.zeros(O)
    cdef double[:, :, ::1] gx = gx_arr
    cdef double[:, :, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    with nogil:
        for bi in range(B):
            for o in range(O):
                gr = &gy[bi, o, 0]
                acc = 0.0
                for l in range(L):
                    acc = acc + gr[l]
                gb[o] += acc
                for c in range(C):
                    xr = &x[bi, c, 0]
                    gxr = &gx[bi, c, 0]
                    for k in range(K):
                        lo = _lo(k, pad)
                        hi = _hi(k, pad, L)
                        shift = k - pad
                        g = w[o, c, k]
                        acc = 0.0
                        for l in range(lo, hi):
                            acc = acc + gr[l] * xr[l + shift]
                            gxr[l + shift] += g * gr[l]
                        gw[o, c, k] += acc
    return gx_arr, gw_arr, gb_arr


def softmax_xent(const double[:, :, ::1] logits, const cnp.int64_t[:, ::1] labels):
    cdef Py_ssize_t B = logits.shape[0], K = logits.shape[1], L = logits.shape[2]
    cdef Py_ssize_t bi, j, l, t
    cdef double m, s, e, total = 0.0
    cdef double n = <double>(B * L)
    grad_arr = np.empty((B, K, L))
    cdef double[:, :, ::1] grad = grad_arr
    with nogil:
        for bi in range(B):
            for l in range(L):
                m = logits[bi, 0, l]
                for j in range(1, K):
                    if logits[bi, j, l] > m:
                        m = logits[bi, j, l]
                s = 0.0
                for j in range(K):
                    e = exp(logits[bi, j, l] - m)
                    grad[bi, j, l] = e
                    s = s + e
                t = labels[bi, l]
                total += log(s) - (logits[bi, t, l] - m)
                for j in range(K):
                    grad[bi, j, l] = grad[bi, j, l] / s
                grad[bi, t, l] -= 1.0
                for j in range(K):
                    grad[bi, j, l] = grad[bi, j, l] / n
    return total / n, grad_arr
