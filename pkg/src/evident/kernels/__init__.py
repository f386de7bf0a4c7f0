"""Backend selection for the per-pixel hot kernels.

The compiled Cython extension is preferred when it was built; the numpy
implementation is a drop-in fallback with identical semantics.  Both accept
C-contiguous float64 arrays.  ``backend_name()`` reports which one is live.
"""

import numpy as np

from . import numpy_backend

try:
    from . import _ckern as _impl
except ImportError:  # extension not built; stay on numpy
    _impl = numpy_backend

_HAS_CYTHON = _impl is not numpy_backend


def backend_name():
    return _impl.NAME


def _as_batch(arr, ncol, name):
    out = np.ascontiguousarray(arr, dtype=np.float64)
    if out.ndim != 2 or out.shape[1] != ncol:
        raise ValueError(f"{name} must have shape (N, {ncol}), got {out.shape}")
    return out


def niw_loss_grad(raw, target, lambda_evi, eps):
    raw = _as_batch(raw, 11, "raw")
    target = _as_batch(target, 3, "target")
    return _impl.niw_loss_grad(raw, target, float(lambda_evi), float(eps))


def niw_nll(raw, target, eps):
    raw = _as_batch(raw, 11, "raw")
    target = _as_batch(target, 3, "target")
    return _impl.niw_nll(raw, target, float(eps))


def nig_loss_grad(raw, target, lambda_evi, eps):
    raw = _as_batch(raw, 12, "raw")
    target = _as_batch(target, 3, "target")
    return _impl.nig_loss_grad(raw, target, float(lambda_evi), float(eps))


def nig_nll(raw, target, eps):
    raw = _as_batch(raw, 12, "raw")
    target = _as_batch(target, 3, "target")
    return _impl.nig_nll(raw, target, float(eps))


def hetero_loss_grad(mean, log_var, target):
    mean = _as_batch(mean, 3, "mean")
    log_var = _as_batch(log_var, 3, "log_var")
    target = _as_batch(target, 3, "target")
    return _impl.hetero_loss_grad(mean, log_var, target)


def crc64(data, value=0):
    if isinstance(data, (bytes, bytearray)):
        data = memoryview(data)
    return _impl.crc64(data, value)
