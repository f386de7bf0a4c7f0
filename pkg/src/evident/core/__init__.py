"""Closed-form evidential distributions, losses, and readouts."""

from .nig import (
    RAW_NIG_DIM,
    NigParams,
    nig_decompose,
    nig_evidence_reg,
    nig_loss,
    nig_loss_grad,
    nig_nll,
    nig_predictive,
    raw_to_nig,
    xyz_nig_loss,
    xyz_nig_loss_grad,
    xyz_nig_loss_grad_raw,
)
from .niw import (
    D,
    DEFAULT_EPS,
    RAW_NIW_DIM,
    READOUT_MODES,
    LossConfig,
    NiwParams,
    RawNiw,
    StudentTMv,
    UncertaintyDecomposition,
    niw_decompose,
    niw_evidence_reg,
    niw_loss,
    niw_loss_grad,
    niw_loss_raw,
    niw_nll,
    niw_predictive,
    raw_to_niw,
    softplus,
    studentt_logpdf,
    uncertainty_readout,
)

__all__ = [n for n in dir() if not n.startswith("_")]
