"""Per-image Sim(3) alignment between predicted and ground-truth pointmaps
(closed-form least-squares similarity fit with reflection correction) and
per-pixel 3D error computation."""

from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateGeometryError, InvalidInputError, UsageError

_DEGENERACY_RATIO = 1e-10


@dataclass(frozen=True)
class Sim3Transform:
    """x -> scale * rotation @ x + translation, with rotation in SO(3)."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if not self.scale > 0:
            raise InvalidInputError(f"scale must be positive, got {self.scale}")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise InvalidInputError("rotation is not orthogonal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise InvalidInputError("rotation determinant is not +1 within 1e-9")

    @classmethod
    def identity(cls):
        return cls(scale=1.0, rotation=np.eye(3), translation=np.zeros(3))

    def inverse(self):
        rinv = self.rotation.T
        return Sim3Transform(
            scale=1.0 / self.scale,
            rotation=rinv,
            translation=-rinv @ self.translation / self.scale)

    def compose(self, other):
        """Transform applying ``other`` first, then ``self``."""
        return Sim3Transform(
            scale=self.scale * other.scale,
            rotation=self.rotation @ other.rotation,
            translation=self.scale * self.rotation @ other.translation
            + self.translation)


@dataclass(frozen=True)
class ErrorMap:
    """Per-pixel Euclidean 3D error over the valid mask."""

    e: np.ndarray
    mask: np.ndarray

    def valid_errors(self):
        return self.e[self.mask]


def _masked_points(pm, mask):
    pm = np.asarray(pm, dtype=np.float64)
    if pm.shape[-1] != 3:
        raise UsageError(f"pointmap must end in 3 coordinates, got {pm.shape}")
    pts = pm.reshape(-1, 3)
    if mask is None:
        return pts
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.shape[0] != pts.shape[0]:
        raise UsageError("mask does not match pointmap spatial dims")
    return pts[flat]


def umeyama_sim3(src, dst, mask=None):
    """Least-squares similarity fit: argmin over (s, R, t) of
    sum ||s R src_i + t - dst_i||^2 over valid pixels.

    The reflection case is corrected so det(R) = +1.  Fewer than 3 valid
    pairs or a rank-deficient cross-covariance raise a degeneracy error.
    """
    x = _masked_points(src, mask)
    y = _masked_points(dst, mask)
    if x.shape != y.shape:
        raise UsageError("src and dst must have matching valid points")
    n = x.shape[0]
    if n < 3:
        raise DegenerateGeometryError(
            f"similarity fit needs >= 3 valid pairs, got {n}")
    mu_x = x.mean(axis=0)
    mu_y = y.mean(axis=0)
    xc = x - mu_x
    yc = y - mu_y
    cov = yc.T @ xc / n
    u, d, vt = np.linalg.svd(cov)
    if d[0] <= 0 or d[-1] < _DEGENERACY_RATIO * d[0]:
        raise DegenerateGeometryError(
            "centered covariance is rank-deficient (collinear or coincident "
            f"points): singular values {d}")
    s_fix = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_fix[2, 2] = -1.0
    rotation = u @ s_fix @ vt
    var_x = float((xc * xc).sum() / n)
    scale = float(np.trace(np.diag(d) @ s_fix) / var_x)
    translation = mu_y - scale * rotation @ mu_x
    return Sim3Transform(scale=scale, rotation=rotation,
                         translation=translation)


def apply_sim3(transform, pm, mask=None):
    """Map each valid point to s R x + t; invalid pixels pass through."""
    pm = np.asarray(pm, dtype=np.float64)
    mapped = (transform.scale * pm @ transform.rotation.T
              + transform.translation)
    if mask is None:
        return mapped
    out = pm.copy()
    valid = np.asarray(mask, dtype=bool)
    out[valid] = mapped[valid]
    return out


def point_errors(pred, gt, mask, align=True):
    """Per-pixel Euclidean errors, optionally after a Sim(3) fit of the
    prediction onto the ground truth over the valid pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or mask.shape != pred.shape[:-1]:
        raise UsageError(
            f"shape mismatch: pred {pred.shape}, gt {gt.shape}, "
            f"mask {mask.shape}")
    if align:
        transform = umeyama_sim3(pred, gt, mask)
        pred = apply_sim3(transform, pred)
    e = np.zeros(mask.shape)
    e[mask] = np.linalg.norm(pred[mask] - gt[mask], axis=-1)
    return ErrorMap(e=e, mask=mask)
