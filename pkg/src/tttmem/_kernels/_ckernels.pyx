# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Drop-in twins of ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport erf, exp, sqrt, INFINITY

cnp.import_array()

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT2PI = 0.3989422804014327


def gelu_fwd(floating[:, ::1] h):
    cdef Py_ssize_t n = h.shape[0], m = h.shape[1], i, j
    dtype = np.float64 if floating is double else np.float32
    a_arr = np.empty((n, m), dtype=dtype)
    d_arr = np.empty((n, m), dtype=dtype)
    cdef floating[:, ::1] a = a_arr
    cdef floating[:, ::1] d = d_arr
    cdef double x, cdf, pdf
    with nogil:
        for i in range(n):
            for j in range(m):
                x = h[i, j]
                cdf = 0.5 * (1.0 + erf(x * INV_SQRT2))
                pdf = INV_SQRT2PI * exp(-0.5 * x * x)
                a[i, j] = <floating>(x * cdf)
                d[i, j] = <floating>(cdf + x * pdf)
    return a_arr, d_arr


def layer_norm_rows(floating[:, ::1] y, floating[::1] gain, floating[::1] bias, double eps):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.empty((n, m), dtype=dtype)
    yhat_arr = np.empty((n, m), dtype=dtype)
    inv_arr = np.empty(n, dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef floating[:, ::1] yhat = yhat_arr
    cdef floating[::1] inv = inv_arr
    cdef double mean, var, c, s
    with nogil:
        for i in range(n):
            mean = 0.0
            for j in range(m):
                mean += y[i, j]
            mean /= m
            var = 0.0
            for j in range(m):
                c = y[i, j] - mean
                var += c * c
            var /= m
            s = 1.0 / sqrt(var + eps)
            inv[i] = <floating>s
            for j in range(m):
                c = (y[i, j] - mean) * s
                yhat[i, j] = <floating>c
                out[i, j] = <floating>(c * gain[j] + bias[j])
    return out_arr, yhat_arr, inv_arr


def ln_project(floating[:, ::1] g, floating[:, ::1] yhat, floating[::1] inv_std):
    cdef Py_ssize_t n = g.shape[0], m = g.shape[1], i, j
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.empty((n, m), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef double mg, mgy, s
    with nogil:
        for i in range(n):
            mg = 0.0
            mgy = 0.0
            for j in range(m):
                mg += g[i, j]
                mgy += g[i, j] * yhat[i, j]
            mg /= m
            mgy /= m
            s = inv_std[i]
            for j in range(m):
                out[i, j] = <floating>((g[i, j] - mg - yhat[i, j] * mgy) * s)
    return out_arr


def adjacent_cosine(floating[:, ::1] z):
    cdef Py_ssize_t n = z.shape[0], m = z.shape[1], i, j
    out_arr = np.full(n, -np.inf, dtype=np.float64)
    if n < 2:
        return out_arr
    cdef double[::1] out = out_arr
    cdef double dot, na, nb, den
    with nogil:
        nb = 0.0
        for j in range(m):
            nb += z[0, j] * z[0, j]
        for i in range(n - 1):
            na = nb
            nb = 0.0
            dot = 0.0
            for j in range(m):
                nb += z[i + 1, j] * z[i + 1, j]
                dot += z[i, j] * z[i + 1, j]
            den = sqrt(na) * sqrt(nb)
            if den > 0.0:
                out[i] = dot / den
            else:
                out[i] = 0.0
        out[n - 1] = -INFINITY
    return out_arr


def prompt_importance(floating[:, :, ::1] attn):
    cdef Py_ssize_t nh = attn.shape[0], ns = attn.shape[1], nc = attn.shape[2], h, s, c
    out_arr = np.zeros(nc, dtype=np.float64)
    if nh == 0:
        return out_arr
    cdef double[::1] out = out_arr
    with nogil:
        for h in range(nh):
            for s in range(ns):
                for c in range(nc):
                    out[c] += attn[h, s, c]
        for c in range(nc):
            out[c] /= nh
    return out_arr
