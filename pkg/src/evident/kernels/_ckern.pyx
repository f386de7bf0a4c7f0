# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled per-pixel kernels; mirrors evident.kernels.numpy_backend."""

import numpy as np

from libc.math cimport exp, fabs, lgamma, log, log1p, sqrt
from libc.stdint cimport uint8_t, uint64_t

NAME = "cython"

cdef double _LOG_PI = 1.1447298858494001741
cdef double _LOG_2PI = 1.8378770664093454836


cdef inline double _softplus(double x) nogil:
    if x > 0.0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


cdef inline double _sigmoid(double x) nogil:
    cdef double e
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef double _digamma(double x) nogil:
    # Recurrence up to x >= 6, then the asymptotic series; adequate for the
    # x > 0.5 arguments produced by the parameter mappings (rel. err ~1e-14).
    cdef double res = 0.0
    cdef double inv, inv2
    while x < 6.0:
        res -= 1.0 / x
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    res += log(x) - 0.5 * inv
    res -= inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0
           - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))))
    return res


def niw_nll(double[:, ::1] raw, double[:, ::1] target, double eps):
    cdef Py_ssize_t n = raw.shape[0], i
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double kappa, nu, nut, l11, l21, l22, l31, l32, l33
    cdef double r0, r1, r2, w0, w1, w2, q, z, a
    for i in range(n):
        kappa = _softplus(raw[i, 3]) + eps
        nu = 4.0 + _softplus(raw[i, 4])
        nut = nu - 2.0
        l11 = _softplus(raw[i, 5]) + eps
        l21 = raw[i, 6]
        l22 = _softplus(raw[i, 7]) + eps
        l31 = raw[i, 8]
        l32 = raw[i, 9]
        l33 = _softplus(raw[i, 10]) + eps
        r0 = target[i, 0] - raw[i, 0]
        r1 = target[i, 1] - raw[i, 1]
        r2 = target[i, 2] - raw[i, 2]
        w0 = r0 / l11
        w1 = (r1 - l21 * w0) / l22
        w2 = (r2 - l31 * w0 - l32 * w1) / l33
        q = w0 * w0 + w1 * w1 + w2 * w2
        z = kappa * q / (kappa + 1.0)
        a = 0.5 * (nut + 3.0)
        out[i] = (-lgamma(a) + lgamma(0.5 * nut) + 1.5 * _LOG_PI
                  + 1.5 * log1p(1.0 / kappa)
                  + log(l11) + log(l22) + log(l33) + a * log1p(z))
    return out_arr


def niw_loss_grad(double[:, ::1] raw, double[:, ::1] target,
                  double lambda_evi, double eps):
    cdef Py_ssize_t n = raw.shape[0], i
    loss_arr = np.empty(n, dtype=np.float64)
    grad_arr = np.empty((n, 11), dtype=np.float64)
    cdef double[::1] loss = loss_arr
    cdef double[:, ::1] grad = grad_arr
    cdef double kappa, nu, nut, l11, l21, l22, l31, l32, l33
    cdef double r0, r1, r2, w0, w1, w2, u0, u1, u2
    cdef double q, z, a, nll, rsq, one_z, dcoef, ev, g_kappa, g_nu, c2
    for i in range(n):
        kappa = _softplus(raw[i, 3]) + eps
        nu = 4.0 + _softplus(raw[i, 4])
        nut = nu - 2.0
        l11 = _softplus(raw[i, 5]) + eps
        l21 = raw[i, 6]
        l22 = _softplus(raw[i, 7]) + eps
        l31 = raw[i, 8]
        l32 = raw[i, 9]
        l33 = _softplus(raw[i, 10]) + eps
        r0 = target[i, 0] - raw[i, 0]
        r1 = target[i, 1] - raw[i, 1]
        r2 = target[i, 2] - raw[i, 2]
        w0 = r0 / l11
        w1 = (r1 - l21 * w0) / l22
        w2 = (r2 - l31 * w0 - l32 * w1) / l33
        q = w0 * w0 + w1 * w1 + w2 * w2
        z = kappa * q / (kappa + 1.0)
        a = 0.5 * (nut + 3.0)
        nll = (-lgamma(a) + lgamma(0.5 * nut) + 1.5 * _LOG_PI
               + 1.5 * log1p(1.0 / kappa)
               + log(l11) + log(l22) + log(l33) + a * log1p(z))
        rsq = r0 * r0 + r1 * r1 + r2 * r2
        loss[i] = nll + lambda_evi * rsq * (kappa + nu)

        u2 = w2 / l33
        u1 = (w1 - l32 * u2) / l22
        u0 = (w0 - l21 * u1 - l31 * u2) / l11

        one_z = 1.0 + z
        dcoef = a * kappa / ((kappa + 1.0) * one_z)
        ev = lambda_evi * (kappa + nu)
        grad[i, 0] = -2.0 * dcoef * u0 - 2.0 * ev * r0
        grad[i, 1] = -2.0 * dcoef * u1 - 2.0 * ev * r1
        grad[i, 2] = -2.0 * dcoef * u2 - 2.0 * ev * r2

        g_kappa = (-1.5 / (kappa * (kappa + 1.0))
                   + a * q / ((kappa + 1.0) * (kappa + 1.0) * one_z)
                   + lambda_evi * rsq)
        g_nu = (0.5 * (_digamma(0.5 * nut) - _digamma(a))
                + 0.5 * log1p(z) + lambda_evi * rsq)
        grad[i, 3] = g_kappa * _sigmoid(raw[i, 3])
        grad[i, 4] = g_nu * _sigmoid(raw[i, 4])

        c2 = 2.0 * dcoef
        grad[i, 5] = (1.0 / l11 - c2 * u0 * w0) * _sigmoid(raw[i, 5])
        grad[i, 6] = -c2 * u1 * w0
        grad[i, 7] = (1.0 / l22 - c2 * u1 * w1) * _sigmoid(raw[i, 7])
        grad[i, 8] = -c2 * u2 * w0
        grad[i, 9] = -c2 * u2 * w1
        grad[i, 10] = (1.0 / l33 - c2 * u2 * w2) * _sigmoid(raw[i, 10])
    return loss_arr, grad_arr


def nig_nll(double[:, ::1] raw, double[:, ::1] target, double eps):
    cdef Py_ssize_t n = raw.shape[0], i, c
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double gamma, nu, alpha, beta, r, s, acc
    for i in range(n):
        acc = 0.0
        for c in range(3):
            gamma = raw[i, c]
            nu = _softplus(raw[i, 3 + c]) + eps
            alpha = 1.0 + _softplus(raw[i, 6 + c]) + eps
            beta = _softplus(raw[i, 9 + c]) + eps
            r = target[i, c] - gamma
            s = nu * r * r + 2.0 * beta * (1.0 + nu)
            acc += (0.5 * (_LOG_PI - log(nu))
                    - alpha * log(2.0 * beta * (1.0 + nu))
                    + (alpha + 0.5) * log(s)
                    + lgamma(alpha) - lgamma(alpha + 0.5))
        out[i] = acc
    return out_arr


def nig_loss_grad(double[:, ::1] raw, double[:, ::1] target,
                  double lambda_evi, double eps):
    cdef Py_ssize_t n = raw.shape[0], i, c
    loss_arr = np.empty(n, dtype=np.float64)
    grad_arr = np.empty((n, 12), dtype=np.float64)
    cdef double[::1] loss = loss_arr
    cdef double[:, ::1] grad = grad_arr
    cdef double gamma, nu, alpha, beta, r, absr, s, sgn
    cdef double nll, evi, acc, third = 1.0 / 3.0
    for i in range(n):
        acc = 0.0
        for c in range(3):
            gamma = raw[i, c]
            nu = _softplus(raw[i, 3 + c]) + eps
            alpha = 1.0 + _softplus(raw[i, 6 + c]) + eps
            beta = _softplus(raw[i, 9 + c]) + eps
            r = target[i, c] - gamma
            absr = fabs(r)
            s = nu * r * r + 2.0 * beta * (1.0 + nu)
            nll = (0.5 * (_LOG_PI - log(nu))
                   - alpha * log(2.0 * beta * (1.0 + nu))
                   + (alpha + 0.5) * log(s)
                   + lgamma(alpha) - lgamma(alpha + 0.5))
            evi = absr * (2.0 * nu + alpha)
            acc += nll + lambda_evi * evi

            sgn = 0.0
            if r > 0.0:
                sgn = 1.0
            elif r < 0.0:
                sgn = -1.0
            grad[i, c] = third * (-(alpha + 0.5) * 2.0 * nu * r / s
                                  - lambda_evi * sgn * (2.0 * nu + alpha))
            grad[i, 3 + c] = third * (-0.5 / nu - alpha / (1.0 + nu)
                                      + (alpha + 0.5) * (r * r + 2.0 * beta) / s
                                      + lambda_evi * 2.0 * absr) \
                * _sigmoid(raw[i, 3 + c])
            grad[i, 6 + c] = third * (-log(2.0 * beta * (1.0 + nu)) + log(s)
                                      + _digamma(alpha) - _digamma(alpha + 0.5)
                                      + lambda_evi * absr) \
                * _sigmoid(raw[i, 6 + c])
            grad[i, 9 + c] = third * (-alpha / beta
                                      + (alpha + 0.5) * 2.0 * (1.0 + nu) / s) \
                * _sigmoid(raw[i, 9 + c])
        loss[i] = acc * third
    return loss_arr, grad_arr


def hetero_loss_grad(double[:, ::1] mean, double[:, ::1] log_var,
                     double[:, ::1] target):
    cdef Py_ssize_t n = mean.shape[0], i, c
    loss_arr = np.empty(n, dtype=np.float64)
    gm_arr = np.empty((n, 3), dtype=np.float64)
    gv_arr = np.empty((n, 3), dtype=np.float64)
    cdef double[::1] loss = loss_arr
    cdef double[:, ::1] gm = gm_arr
    cdef double[:, ::1] gv = gv_arr
    cdef double r, iv, acc
    for i in range(n):
        acc = 0.0
        for c in range(3):
            r = target[i, c] - mean[i, c]
            iv = exp(-log_var[i, c])
            acc += 0.5 * (log_var[i, c] + r * r * iv + _LOG_2PI)
            gm[i, c] = -r * iv
            gv[i, c] = 0.5 * (1.0 - r * r * iv)
        loss[i] = acc
    return loss_arr, gm_arr, gv_arr


cdef uint64_t _CRC64_POLY = 0xC96C5795D7870F42ULL
cdef uint64_t[256] _CRC64_TABLE
cdef bint _crc_table_ready = False


cdef void _crc64_fill_table() nogil:
    cdef uint64_t crc
    cdef int i, j
    for i in range(256):
        crc = <uint64_t>i
        for j in range(8):
            if crc & 1ULL:
                crc = (crc >> 1) ^ _CRC64_POLY
            else:
                crc >>= 1
        _CRC64_TABLE[i] = crc


def crc64(const uint8_t[::1] data, value=0):
    """CRC-64/XZ of ``data``; pass a previous result as ``value`` to chain."""
    global _crc_table_ready
    if not _crc_table_ready:
        _crc64_fill_table()
        _crc_table_ready = True
    cdef uint64_t crc = (<uint64_t>value) ^ 0xFFFFFFFFFFFFFFFFULL
    cdef Py_ssize_t i, n = data.shape[0]
    with nogil:
        for i in range(n):
            crc = _CRC64_TABLE[(crc ^ data[i]) & 0xFFULL] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFFULL
