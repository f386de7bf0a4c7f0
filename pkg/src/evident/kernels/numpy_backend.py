"""Pure-numpy implementations of the hot per-pixel kernels.

This module is the fallback backend: it mirrors ``evident.kernels._ckern``
(the Cython extension) exactly, operating on float64 batches of per-pixel
raw head outputs.  Raw layouts are shared with the trainer:

* NIW raw, shape (N, 11): ``[m0, m1, m2, kappa_raw, nu_raw,
  l11, l21, l22, l31, l32, l33]`` (Cholesky entries row-major, lower).
* NIG raw, shape (N, 12): ``[gamma_xyz, nu_raw_xyz, alpha_raw_xyz,
  beta_raw_xyz]`` in coordinate-blocked order.

All losses are per-pixel (no reduction); gradients are with respect to the
raw parameters, softplus chains included.
"""

import numpy as np
from scipy.special import digamma, gammaln

NAME = "numpy"

_D = 3
_LOG_PI = float(np.log(np.pi))
_LOG_2PI = float(np.log(2.0 * np.pi))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _unpack_niw(raw, eps):
    m = raw[:, 0:3]
    kappa = _softplus(raw[:, 3]) + eps
    nu = (_D + 1.0) + _softplus(raw[:, 4])
    l11 = _softplus(raw[:, 5]) + eps
    l21 = raw[:, 6]
    l22 = _softplus(raw[:, 7]) + eps
    l31 = raw[:, 8]
    l32 = raw[:, 9]
    l33 = _softplus(raw[:, 10]) + eps
    return m, kappa, nu, l11, l21, l22, l31, l32, l33


def _niw_common(raw, target, eps):
    """Shared forward pass: returns everything the loss and grads need."""
    m, kappa, nu, l11, l21, l22, l31, l32, l33 = _unpack_niw(raw, eps)
    nut = nu - 2.0
    r = target - m
    # w = L^{-1} r by forward substitution
    w0 = r[:, 0] / l11
    w1 = (r[:, 1] - l21 * w0) / l22
    w2 = (r[:, 2] - l31 * w0 - l32 * w1) / l33
    q = w0 * w0 + w1 * w1 + w2 * w2
    z = kappa * q / (kappa + 1.0)
    a = 0.5 * (nut + _D)
    nll = (
        -gammaln(a)
        + gammaln(0.5 * nut)
        + 0.5 * _D * _LOG_PI
        + 0.5 * _D * np.log1p(1.0 / kappa)
        + np.log(l11)
        + np.log(l22)
        + np.log(l33)
        + a * np.log1p(z)
    )
    return (m, kappa, nu, nut, l11, l21, l22, l31, l32, l33,
            r, w0, w1, w2, q, z, a, nll)


def niw_nll(raw, target, eps):
    """Per-pixel Student-t NLL of the NIW predictive at ``target``."""
    return _niw_common(raw, target, eps)[-1]


def niw_loss_grad(raw, target, lambda_evi, eps):
    """Per-pixel NIW loss (NLL + lambda_evi * evidence regularizer) and its
    gradient with respect to the 11 raw parameters."""
    (m, kappa, nu, nut, l11, l21, l22, l31, l32, l33,
     r, w0, w1, w2, q, z, a, nll) = _niw_common(raw, target, eps)

    rsq = np.einsum("ij,ij->i", r, r)
    loss = nll + lambda_evi * rsq * (kappa + nu)

    # u = Psi^{-1} r = L^{-T} w by back substitution
    u2 = w2 / l33
    u1 = (w1 - l32 * u2) / l22
    u0 = (w0 - l21 * u1 - l31 * u2) / l11

    one_z = 1.0 + z
    dcoef = a * kappa / ((kappa + 1.0) * one_z)
    ev = lambda_evi * (kappa + nu)

    grad = np.empty_like(raw)
    grad[:, 0] = -2.0 * dcoef * u0 - 2.0 * ev * r[:, 0]
    grad[:, 1] = -2.0 * dcoef * u1 - 2.0 * ev * r[:, 1]
    grad[:, 2] = -2.0 * dcoef * u2 - 2.0 * ev * r[:, 2]

    g_kappa = (
        -0.5 * _D / (kappa * (kappa + 1.0))
        + a * q / ((kappa + 1.0) ** 2 * one_z)
        + lambda_evi * rsq
    )
    g_nu = (
        0.5 * (digamma(0.5 * nut) - digamma(a))
        + 0.5 * np.log1p(z)
        + lambda_evi * rsq
    )
    grad[:, 3] = g_kappa * _sigmoid(raw[:, 3])
    grad[:, 4] = g_nu * _sigmoid(raw[:, 4])

    c2 = 2.0 * dcoef
    grad[:, 5] = (1.0 / l11 - c2 * u0 * w0) * _sigmoid(raw[:, 5])
    grad[:, 6] = -c2 * u1 * w0
    grad[:, 7] = (1.0 / l22 - c2 * u1 * w1) * _sigmoid(raw[:, 7])
    grad[:, 8] = -c2 * u2 * w0
    grad[:, 9] = -c2 * u2 * w1
    grad[:, 10] = (1.0 / l33 - c2 * u2 * w2) * _sigmoid(raw[:, 10])
    return loss, grad


def _unpack_nig(raw, eps):
    gamma = raw[:, 0:3]
    nu = _softplus(raw[:, 3:6]) + eps
    alpha = 1.0 + _softplus(raw[:, 6:9]) + eps
    beta = _softplus(raw[:, 9:12]) + eps
    return gamma, nu, alpha, beta


def _nig_nll_terms(gamma, nu, alpha, beta, target):
    r = target - gamma
    s = nu * r * r + 2.0 * beta * (1.0 + nu)
    nll = (
        0.5 * (_LOG_PI - np.log(nu))
        - alpha * np.log(2.0 * beta * (1.0 + nu))
        + (alpha + 0.5) * np.log(s)
        + gammaln(alpha)
        - gammaln(alpha + 0.5)
    )
    return r, s, nll


def nig_nll(raw, target, eps):
    """Per-pixel NLL summed over the three coordinates (factorized NIG)."""
    gamma, nu, alpha, beta = _unpack_nig(raw, eps)
    _, _, nll = _nig_nll_terms(gamma, nu, alpha, beta, target)
    return nll.sum(axis=1)


def nig_loss_grad(raw, target, lambda_evi, eps):
    """Per-pixel coordinate-averaged NIG loss and raw-parameter gradient."""
    gamma, nu, alpha, beta = _unpack_nig(raw, eps)
    r, s, nll = _nig_nll_terms(gamma, nu, alpha, beta, target)
    absr = np.abs(r)
    evi = absr * (2.0 * nu + alpha)
    loss = (nll + lambda_evi * evi).mean(axis=1)

    third = 1.0 / 3.0
    g_gamma = third * (
        -(alpha + 0.5) * 2.0 * nu * r / s
        - lambda_evi * np.sign(r) * (2.0 * nu + alpha)
    )
    g_nu = third * (
        -0.5 / nu
        - alpha / (1.0 + nu)
        + (alpha + 0.5) * (r * r + 2.0 * beta) / s
        + lambda_evi * 2.0 * absr
    )
    g_alpha = third * (
        -np.log(2.0 * beta * (1.0 + nu))
        + np.log(s)
        + digamma(alpha)
        - digamma(alpha + 0.5)
        + lambda_evi * absr
    )
    g_beta = third * (-alpha / beta + (alpha + 0.5) * 2.0 * (1.0 + nu) / s)

    grad = np.empty_like(raw)
    grad[:, 0:3] = g_gamma
    grad[:, 3:6] = g_nu * _sigmoid(raw[:, 3:6])
    grad[:, 6:9] = g_alpha * _sigmoid(raw[:, 6:9])
    grad[:, 9:12] = g_beta * _sigmoid(raw[:, 9:12])
    return loss, grad


def hetero_loss_grad(mean, log_var, target):
    """Per-pixel diagonal-Gaussian NLL and gradients for the hetero head."""
    r = target - mean
    inv_var = np.exp(-log_var)
    loss = 0.5 * (log_var + r * r * inv_var + _LOG_2PI).sum(axis=1)
    g_mean = -r * inv_var
    g_logvar = 0.5 * (1.0 - r * r * inv_var)
    return loss, g_mean, g_logvar


_CRC64_POLY = 0xC96C5795D7870F42  # CRC-64/XZ, reflected
_CRC64_TABLE = None


def _crc64_table():
    global _CRC64_TABLE
    if _CRC64_TABLE is None:
        table = []
        for i in range(256):
            crc = i
            for _ in range(8):
                crc = (crc >> 1) ^ _CRC64_POLY if crc & 1 else crc >> 1
            table.append(crc)
        _CRC64_TABLE = table
    return _CRC64_TABLE


def crc64(data, value=0):
    """CRC-64/XZ of ``data``; pass a previous result as ``value`` to chain."""
    table = _crc64_table()
    crc = value ^ 0xFFFFFFFFFFFFFFFF
    for b in data:
        crc = table[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF
