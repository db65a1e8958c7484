# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled row-wise kernels. Signature-compatible with _kernels_py."""

import numpy as np

cimport numpy as cnp
from libc.math cimport erf, exp, sqrt

cnp.import_array()

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT_2PI = 0.3989422804014327


def gelu_fwd(object x):
    shape = x.shape
    cdef double[::1] xf = np.ascontiguousarray(x).reshape(-1)
    out = np.empty(xf.shape[0], dtype=np.float64)
    cdef double[::1] yf = out
    cdef Py_ssize_t i, n = xf.shape[0]
    cdef double v
    for i in range(n):
        v = xf[i]
        yf[i] = 0.5 * v * (1.0 + erf(v * INV_SQRT2))
    return out.reshape(shape)


def gelu_bwd(object x, object g):
    shape = x.shape
    cdef double[::1] xf = np.ascontiguousarray(x).reshape(-1)
    cdef double[::1] gf = np.ascontiguousarray(g).reshape(-1)
    out = np.empty(xf.shape[0], dtype=np.float64)
    cdef double[::1] df = out
    cdef Py_ssize_t i, n = xf.shape[0]
    cdef double v, cdf, pdf
    for i in range(n):
        v = xf[i]
        cdf = 0.5 * (1.0 + erf(v * INV_SQRT2))
        pdf = INV_SQRT_2PI * exp(-0.5 * v * v)
        df[i] = gf[i] * (cdf + v * pdf)
    return out.reshape(shape)


def layernorm_fwd(double[:, ::1] x, double[::1] gamma, double[::1] beta, double eps):
    cdef Py_ssize_t r, j, R = x.shape[0], D = x.shape[1]
    y_arr = np.empty((R, D), dtype=np.float64)
    mean_arr = np.empty(R, dtype=np.float64)
    rstd_arr = np.empty(R, dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[::1] mean = mean_arr
    cdef double[::1] rstd = rstd_arr
    cdef double s, var, m, rs, xc
    for r in range(R):
        s = 0.0
        for j in range(D):
            s += x[r, j]
        m = s / D
        var = 0.0
        for j in range(D):
            xc = x[r, j] - m
            var += xc * xc
        var /= D
        rs = 1.0 / sqrt(var + eps)
        mean[r] = m
        rstd[r] = rs
        for j in range(D):
            y[r, j] = (x[r, j] - m) * rs * gamma[j] + beta[j]
    return y_arr, mean_arr, rstd_arr


def layernorm_bwd(double[:, ::1] x, double[::1] mean, double[::1] rstd,
                  double[::1] gamma, double[:, ::1] g):
    cdef Py_ssize_t r, j, R = x.shape[0], D = x.shape[1]
    dx_arr = np.empty((R, D), dtype=np.float64)
    dgamma_arr = np.zeros(D, dtype=np.float64)
    dbeta_arr = np.zeros(D, dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgamma = dgamma_arr
    cdef double[::1] dbeta = dbeta_arr
    cdef double m1, m2, xhat, gy, rs, mn
    for r in range(R):
        rs = rstd[r]
        mn = mean[r]
        m1 = 0.0
        m2 = 0.0
        for j in range(D):
            xhat = (x[r, j] - mn) * rs
            gy = g[r, j] * gamma[j]
            m1 += gy
            m2 += gy * xhat
            dgamma[j] += g[r, j] * xhat
            dbeta[j] += g[r, j]
        m1 /= D
        m2 /= D
        for j in range(D):
            xhat = (x[r, j] - mn) * rs
            gy = g[r, j] * gamma[j]
            dx[r, j] = rs * (gy - m1 - xhat * m2)
    return dx_arr, dgamma_arr, dbeta_arr


def softmax_fwd(double[:, ::1] x):
    cdef Py_ssize_t r, j, R = x.shape[0], D = x.shape[1]
    p_arr = np.empty((R, D), dtype=np.float64)
    cdef double[:, ::1] p = p_arr
    cdef double m, s
    for r in range(R):
        m = x[r, 0]
        for j in range(1, D):
            if x[r, j] > m:
                m = x[r, j]
        s = 0.0
        for j in range(D):
            p[r, j] = exp(x[r, j] - m)
            s += p[r, j]
        for j in range(D):
            p[r, j] /= s
    return p_arr


def softmax_bwd(double[:, ::1] p, double[:, ::1] g):
    cdef Py_ssize_t r, j, R = p.shape[0], D = p.shape[1]
    dx_arr = np.empty((R, D), dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    cdef double s
    for r in range(R):
        s = 0.0
        for j in range(D):
            s += p[r, j] * g[r, j]
        for j in range(D):
            dx[r, j] = p[r, j] * (g[r, j] - s)
    return dx_arr


def masked_softmax_fwd(double[:, ::1] x, long long[::1] limits):
    cdef Py_ssize_t r, j, R = x.shape[0], D = x.shape[1]
    cdef Py_ssize_t lim
    p_arr = np.zeros((R, D), dtype=np.float64)
    cdef double[:, ::1] p = p_arr
    cdef double m, s
    for r in range(R):
        lim = <Py_ssize_t> limits[r]
        m = x[r, 0]
        for j in range(1, lim):
            if x[r, j] > m:
                m = x[r, j]
        s = 0.0
        for j in range(lim):
            p[r, j] = exp(x[r, j] - m)
            s += p[r, j]
        for j in range(lim):
            p[r, j] /= s
    return p_arr


def masked_softmax_bwd(double[:, ::1] p, long long[::1] limits, double[:, ::1] g):
    cdef Py_ssize_t r, j, R = p.shape[0], D = p.shape[1]
    cdef Py_ssize_t lim
    dx_arr = np.zeros((R, D), dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    cdef double s
    for r in range(R):
        lim = <Py_ssize_t> limits[r]
        s = 0.0
        for j in range(lim):
            s += p[r, j] * g[r, j]
        for j in range(lim):
            dx[r, j] = p[r, j] * (g[r, j] - s)
    return dx_arr


def rotary(double[:, ::1] x, double[:, ::1] cos, double[:, ::1] sin, double sign):
    cdef Py_ssize_t r, j, R = x.shape[0], H = cos.shape[1]
    y_arr = np.empty((R, 2 * H), dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double e, o, c, s
    for r in range(R):
        for j in range(H):
            e = x[r, 2 * j]
            o = x[r, 2 * j + 1]
            c = cos[r, j]
            s = sign * sin[r, j]
            y[r, 2 * j] = e * c - o * s
            y[r, 2 * j + 1] = e * s + o * c
    return y_arr
