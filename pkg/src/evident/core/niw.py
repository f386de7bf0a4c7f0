"""Normal-Inverse-Wishart evidential head: closed-form predictive
distribution, losses, gradients, and the aleatoric/epistemic split.

Per pixel the head carries prior mean ``m``, mean-belief concentration
``kappa``, degrees of freedom ``nu`` and a positive-definite scale matrix
``Psi = L @ L.T`` held by its Cholesky factor.  Marginalizing the Gaussian
likelihood parameters yields a 3-variate Student-t predictive with

    dof      nu_t    = nu - d + 1            (d = 3)
    scale    Sigma_t = (kappa + 1) / (kappa * nu_t) * Psi

All functions are pure; the batched hot paths live in ``evident.kernels``.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln

from .. import kernels
from ..exceptions import DomainError, InvalidInputError, NumericError, UsageError

D = 3
DEFAULT_EPS = 1e-6

RAW_NIW_DIM = 11


def softplus(x):
    """Numerically stable log(1 + exp(x))."""
    return np.logaddexp(0.0, x)


def _require_finite(name, value):
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class LossConfig:
    """Weights for the evidential losses and the shared numeric floor."""

    lambda_evi: float = 1e-3
    lambda_uq: float = 0.05
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if self.lambda_evi < 0 or self.lambda_uq < 0:
            raise InvalidInputError("loss weights must be nonnegative")
        if self.eps <= 0:
            raise InvalidInputError("eps must be positive")


@dataclass(frozen=True)
class NiwParams:
    """Valid (constrained) NIW parameters for one 3D point."""

    m: np.ndarray
    kappa: float
    nu: float
    chol_psi: np.ndarray

    def __post_init__(self):
        m = _require_finite("m", self.m).reshape(3)
        chol = _require_finite("chol_psi", self.chol_psi).reshape(3, 3)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "chol_psi", chol)
        if not self.kappa > 0:
            raise InvalidInputError(f"kappa must be positive, got {self.kappa}")
        if not self.nu > D + 1:
            raise InvalidInputError(f"nu must exceed {D + 1}, got {self.nu}")
        if np.any(np.triu(chol, k=1) != 0):
            raise InvalidInputError("chol_psi must be lower-triangular")
        if not np.all(np.diag(chol) > 0):
            raise InvalidInputError("chol_psi diagonal must be positive")

    @property
    def psi(self):
        return self.chol_psi @ self.chol_psi.T


@dataclass(frozen=True)
class RawNiw:
    """Unconstrained head outputs; ``raw_to_niw`` maps them to NiwParams.

    ``l_raw`` packs the lower triangle row-major: l11, l21, l22, l31, l32, l33.
    """

    m_raw: np.ndarray
    kappa_raw: float
    nu_raw: float
    l_raw: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "m_raw",
                           _require_finite("m_raw", self.m_raw).reshape(3))
        object.__setattr__(self, "l_raw",
                           _require_finite("l_raw", self.l_raw).reshape(6))
        _require_finite("kappa_raw", self.kappa_raw)
        _require_finite("nu_raw", self.nu_raw)

    def as_vector(self):
        """Flatten to the (11,) layout shared with the batch kernels."""
        return np.concatenate(
            [self.m_raw, [self.kappa_raw, self.nu_raw], self.l_raw])

    @classmethod
    def from_vector(cls, vec):
        vec = np.asarray(vec, dtype=np.float64).reshape(RAW_NIW_DIM)
        return cls(m_raw=vec[0:3], kappa_raw=float(vec[3]),
                   nu_raw=float(vec[4]), l_raw=vec[5:11])


@dataclass(frozen=True)
class StudentTMv:
    """Multivariate Student-t: location, SPD scale matrix, degrees of freedom."""

    location: np.ndarray
    scale: np.ndarray
    dof: float

    def __post_init__(self):
        object.__setattr__(self, "location",
                           _require_finite("location", self.location).reshape(3))
        object.__setattr__(self, "scale",
                           _require_finite("scale", self.scale).reshape(3, 3))
        if not self.dof > 0:
            raise InvalidInputError(f"dof must be positive, got {self.dof}")

    def covariance(self):
        """Predictive covariance; defined only for dof > 2."""
        if not self.dof > 2:
            raise DomainError(f"covariance undefined for dof={self.dof} <= 2")
        return (self.dof / (self.dof - 2.0)) * self.scale


@dataclass(frozen=True)
class UncertaintyDecomposition:
    """Aleatoric/epistemic/total covariance split; total = alea + epi."""

    alea: np.ndarray
    epi: np.ndarray
    total: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.total is None:
            object.__setattr__(self, "total", self.alea + self.epi)


def raw_to_niw(raw, eps=DEFAULT_EPS):
    """Map unconstrained head outputs to valid NIW parameters.

    Diagonal Cholesky entries and kappa go through softplus(.)+eps;
    nu = (d+1) + softplus(.) so that nu > d+1; everything else passes through.
    """
    if not isinstance(raw, RawNiw):
        raw = RawNiw.from_vector(raw)
    l = raw.l_raw
    chol = np.array([
        [softplus(l[0]) + eps, 0.0, 0.0],
        [l[1], softplus(l[2]) + eps, 0.0],
        [l[3], l[4], softplus(l[5]) + eps],
    ])
    return NiwParams(
        m=raw.m_raw.copy(),
        kappa=float(softplus(raw.kappa_raw) + eps),
        nu=float((D + 1) + softplus(raw.nu_raw)),
        chol_psi=chol,
    )


def niw_predictive(p):
    """Student-t predictive marginal of the NIW prior."""
    nu_t = p.nu - D + 1
    coef = (p.kappa + 1.0) / (p.kappa * nu_t)
    return StudentTMv(location=p.m, scale=coef * p.psi, dof=nu_t)


def studentt_logpdf(dist, x):
    """Multivariate Student-t log-density, evaluated via the Cholesky of the
    scale matrix (log-det from the diagonal, Mahalanobis via a triangular
    solve)."""
    x = _require_finite("x", x).reshape(3)
    try:
        chol = np.linalg.cholesky(dist.scale)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"scale matrix is not SPD: {exc}") from exc
    w = solve_triangular(chol, x - dist.location, lower=True)
    delta = float(w @ w)
    nu_t = dist.dof
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return float(
        gammaln(0.5 * (nu_t + D))
        - gammaln(0.5 * nu_t)
        - 0.5 * (D * np.log(nu_t * np.pi) + logdet)
        - 0.5 * (nu_t + D) * np.log1p(delta / nu_t)
    )


def niw_nll(p, x_gt):
    """Negative log-likelihood of the ground truth under the predictive."""
    return -studentt_logpdf(niw_predictive(p), x_gt)


def niw_evidence_reg(p, x_gt):
    """Evidence regularizer: squared residual times total evidence kappa+nu."""
    x_gt = _require_finite("x_gt", x_gt).reshape(3)
    r = x_gt - p.m
    return float(r @ r) * (p.kappa + p.nu)


def niw_loss(p, x_gt, cfg=LossConfig()):
    """Per-point evidential loss: NLL + lambda_evi * evidence regularizer."""
    return niw_nll(p, x_gt) + cfg.lambda_evi * niw_evidence_reg(p, x_gt)


def niw_loss_raw(raw, x_gt, cfg=LossConfig()):
    """niw_loss evaluated directly on unconstrained parameters."""
    return niw_loss(raw_to_niw(raw, cfg.eps), x_gt, cfg)


def niw_loss_grad(raw, x_gt, cfg=LossConfig()):
    """Analytic gradient of ``niw_loss(raw_to_niw(raw), x_gt)`` with respect
    to all 11 raw parameters (softplus and Cholesky chain rules included).

    Returns a RawNiw whose fields hold the gradient components.
    """
    if not isinstance(raw, RawNiw):
        raw = RawNiw.from_vector(raw)
    x_gt = _require_finite("x_gt", x_gt).reshape(1, 3)
    vec = raw.as_vector().reshape(1, RAW_NIW_DIM)
    _, grad = kernels.niw_loss_grad(vec, x_gt, cfg.lambda_evi, cfg.eps)
    grad = grad[0]
    if not np.all(np.isfinite(grad)):
        names = ["m0", "m1", "m2", "kappa_raw", "nu_raw",
                 "l11", "l21", "l22", "l31", "l32", "l33"]
        bad = [names[i] for i in np.flatnonzero(~np.isfinite(grad))]
        raise NumericError(f"non-finite gradient in parameters: {', '.join(bad)}")
    return RawNiw.from_vector(grad)


def niw_decompose(p):
    """Closed-form covariance split: alea = Psi/(nu-d-1), epi = alea/kappa."""
    if not p.nu > D + 1:
        raise DomainError(
            f"decomposition undefined for nu={p.nu} <= {D + 1} (d={D})")
    alea = p.psi / (p.nu - D - 1)
    epi = alea / p.kappa
    return UncertaintyDecomposition(alea=alea, epi=epi, total=alea + epi)


READOUT_MODES = ("alea", "epi", "total", "conf")


def uncertainty_readout(source, mode, eps=DEFAULT_EPS):
    """Scalar unreliability score: trace of the selected covariance block, or
    -log(conf + eps) for confidence-only sources.  Larger means less
    reliable."""
    if mode in ("alea", "epi", "total"):
        if not isinstance(source, UncertaintyDecomposition):
            raise UsageError(f"mode {mode!r} needs an UncertaintyDecomposition")
        return float(np.trace(getattr(source, mode)))
    if mode == "conf":
        conf = float(source)
        if not 0.0 <= conf <= 1.0:
            raise InvalidInputError(f"confidence must be in [0, 1], got {conf}")
        return float(-np.log(conf + eps))
    raise UsageError(f"unknown readout mode {mode!r}; expected {READOUT_MODES}")
