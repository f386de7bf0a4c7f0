"""Normal-Inverse-Gamma evidential head for factorized per-coordinate
regression; the scalar analogue of the NIW head."""

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln

from .. import kernels
from ..exceptions import DomainError, InvalidInputError
from .niw import DEFAULT_EPS, LossConfig, _require_finite, softplus

RAW_NIG_DIM = 12


@dataclass(frozen=True)
class NigParams:
    """Scalar NIG evidence: predictive mean gamma, evidence nu, shape alpha,
    rate beta."""

    gamma: float
    nu: float
    alpha: float
    beta: float

    def __post_init__(self):
        for name in ("gamma", "nu", "alpha", "beta"):
            _require_finite(name, getattr(self, name))
        if not self.nu > 0:
            raise InvalidInputError(f"nu must be positive, got {self.nu}")
        if not self.alpha > 1:
            raise DomainError(f"alpha must exceed 1, got {self.alpha}")
        if not self.beta > 0:
            raise InvalidInputError(f"beta must be positive, got {self.beta}")


def raw_to_nig(gamma, nu_raw, alpha_raw, beta_raw, eps=DEFAULT_EPS):
    """Unconstrained-to-valid mapping; gamma passes through unchanged."""
    return NigParams(
        gamma=float(gamma),
        nu=float(softplus(nu_raw) + eps),
        alpha=float(1.0 + softplus(alpha_raw) + eps),
        beta=float(softplus(beta_raw) + eps),
    )


def nig_predictive(p):
    """Mean, variance, and dof of the induced univariate Student-t."""
    if not p.alpha > 1:
        raise DomainError(f"predictive variance undefined for alpha={p.alpha}")
    var = p.beta * (1.0 + p.nu) / (p.nu * (p.alpha - 1.0))
    return p.gamma, var, 2.0 * p.alpha


def nig_nll(p, y):
    """Scalar NIG negative log-likelihood of observation y."""
    y = float(_require_finite("y", y))
    r = y - p.gamma
    s = p.nu * r * r + 2.0 * p.beta * (1.0 + p.nu)
    return float(
        0.5 * np.log(np.pi / p.nu)
        - p.alpha * np.log(2.0 * p.beta * (1.0 + p.nu))
        + (p.alpha + 0.5) * np.log(s)
        + gammaln(p.alpha)
        - gammaln(p.alpha + 0.5)
    )


def nig_evidence_reg(p, y):
    """|y - gamma| * (2 nu + alpha) >= 0."""
    y = float(_require_finite("y", y))
    return abs(y - p.gamma) * (2.0 * p.nu + p.alpha)


def nig_loss(p, y, cfg=LossConfig()):
    return nig_nll(p, y) + cfg.lambda_evi * nig_evidence_reg(p, y)


def nig_loss_grad(p, y, cfg=LossConfig()):
    """Gradient of nig_loss with respect to (gamma, nu, alpha, beta).

    The |y - gamma| subgradient at y == gamma is taken as 0.
    """
    y = float(_require_finite("y", y))
    r = y - p.gamma
    absr = abs(r)
    sgn = float(np.sign(r))
    nu, alpha, beta = p.nu, p.alpha, p.beta
    s = nu * r * r + 2.0 * beta * (1.0 + nu)
    lam = cfg.lambda_evi
    g_gamma = -(alpha + 0.5) * 2.0 * nu * r / s - lam * sgn * (2.0 * nu + alpha)
    g_nu = (-0.5 / nu - alpha / (1.0 + nu)
            + (alpha + 0.5) * (r * r + 2.0 * beta) / s + lam * 2.0 * absr)
    g_alpha = (-np.log(2.0 * beta * (1.0 + nu)) + np.log(s)
               + digamma(alpha) - digamma(alpha + 0.5) + lam * absr)
    g_beta = -alpha / beta + (alpha + 0.5) * 2.0 * (1.0 + nu) / s
    return np.array([g_gamma, g_nu, g_alpha, g_beta])


def xyz_nig_loss(params, x_gt, cfg=LossConfig()):
    """Coordinate-averaged NIG loss over independent x/y/z heads."""
    x_gt = _require_finite("x_gt", x_gt).reshape(3)
    if len(params) != 3:
        raise InvalidInputError("xyz_nig_loss needs one NigParams per axis")
    return float(np.mean([nig_loss(p, y, cfg) for p, y in zip(params, x_gt)]))


def xyz_nig_loss_grad(params, x_gt, cfg=LossConfig()):
    """Per-axis gradients of xyz_nig_loss, shape (3, 4) in
    (gamma, nu, alpha, beta) order."""
    x_gt = _require_finite("x_gt", x_gt).reshape(3)
    return np.stack([nig_loss_grad(p, y, cfg) / 3.0
                     for p, y in zip(params, x_gt)])


def xyz_nig_loss_grad_raw(raw, x_gt, cfg=LossConfig()):
    """Raw-space loss and gradient for one pixel via the batch kernel.

    ``raw`` follows the (12,) blocked layout: gamma_xyz, nu_raw_xyz,
    alpha_raw_xyz, beta_raw_xyz.
    """
    raw = _require_finite("raw", raw).reshape(1, RAW_NIG_DIM)
    x_gt = _require_finite("x_gt", x_gt).reshape(1, 3)
    loss, grad = kernels.nig_loss_grad(raw, x_gt, cfg.lambda_evi, cfg.eps)
    return float(loss[0]), grad[0]


def nig_decompose(p):
    """Per-coordinate variance split (alea, epi, total)."""
    if not p.alpha > 1:
        raise DomainError(f"decomposition undefined for alpha={p.alpha}")
    alea = p.beta / (p.alpha - 1.0)
    epi = alea / p.nu
    return alea, epi, alea + epi
