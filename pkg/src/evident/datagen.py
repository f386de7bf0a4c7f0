"""Synthetic desk-scale scene generation with controllable heteroscedastic
noise and hard regions.

Ground truth is a piecewise-planar depth map (Voronoi cells over seeded
sites, one slanted plane each) back-projected through a pinhole camera.
The emulated frozen-backbone prediction is the ground truth plus zero-mean
Gaussian noise whose per-pixel scale follows the hard-region layout, and the
feature map carries noisy proxies of that scale, so the noise level is
learnable from features while the realized error is not.
"""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidInputError, UsageError
from .metrics import ring_band

HARD_SHAPES = ("blob", "band", "object-with-boundary")

INVALID_FRACTION = 0.03


@dataclass(frozen=True)
class NoiseProfile:
    base_sigma: float = 0.02
    hard_region_sigma: float = 0.10
    hard_region_fraction: float = 0.2

    def __post_init__(self):
        if self.base_sigma <= 0 or self.hard_region_sigma <= 0:
            raise InvalidInputError("noise sigmas must be positive")
        if not 0.0 <= self.hard_region_fraction < 1.0:
            raise InvalidInputError(
                "hard_region_fraction must be in [0, 1), got "
                f"{self.hard_region_fraction}")


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    n_planes: int = 5
    noise: NoiseProfile = field(default_factory=NoiseProfile)
    feature_dim: int = 8
    seed: int = 0
    hard_region_shape: str = "blob"

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise InvalidInputError("scene dims must be >= 8")
        if self.n_planes < 1:
            raise InvalidInputError("n_planes must be >= 1")
        if self.feature_dim < 1:
            raise InvalidInputError("feature_dim must be >= 1")
        if self.hard_region_shape not in HARD_SHAPES:
            raise UsageError(
                f"hard_region_shape must be one of {HARD_SHAPES}, got "
                f"{self.hard_region_shape!r}")


@dataclass(frozen=True)
class SceneSample:
    features: np.ndarray      # H x W x F
    gt: np.ndarray            # H x W x 3
    base_pred: np.ndarray     # H x W x 3
    mask: np.ndarray          # H x W bool
    noise_sigma_map: np.ndarray  # H x W
    hard_mask: np.ndarray     # H x W bool


def _piecewise_planar_depth(cfg, rng):
    h, w = cfg.height, cfg.width
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    u = (jj - w / 2.0) / max(h, w)
    v = (ii - h / 2.0) / max(h, w)
    sites = rng.random((cfg.n_planes, 2)) * [[h, w]]
    d2 = ((ii[..., None] - sites[:, 0]) ** 2
          + (jj[..., None] - sites[:, 1]) ** 2)
    region = d2.argmin(axis=2)
    offsets = rng.uniform(1.0, 2.5, size=cfg.n_planes)
    slopes = rng.uniform(-0.4, 0.4, size=(cfg.n_planes, 2))
    depth = (offsets[region] + slopes[region, 0] * u
             + slopes[region, 1] * v)
    return np.clip(depth, 0.3, 4.0), u, v


def _hard_mask(cfg, rng):
    h, w = cfg.height, cfg.width
    frac = cfg.noise.hard_region_fraction
    mask = np.zeros((h, w), dtype=bool)
    if frac == 0.0:
        return mask
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    if cfg.hard_region_shape == "blob":
        # add random disks until the target area fraction is reached
        target = frac * h * w
        r_lo, r_hi = 0.06 * min(h, w), 0.16 * min(h, w)
        for _ in range(256):
            if mask.sum() >= target:
                break
            ci = rng.uniform(0, h)
            cj = rng.uniform(0, w)
            rad = rng.uniform(r_lo, r_hi)
            mask |= (ii - ci) ** 2 + (jj - cj) ** 2 <= rad * rad
        return mask
    if cfg.hard_region_shape == "band":
        theta = rng.uniform(0, np.pi)
        proj = ii * np.cos(theta) + jj * np.sin(theta)
        period = 0.5 * min(h, w)
        phase = rng.uniform(0, period)
        return ((proj + phase) % period) < frac * period
    # object-with-boundary: the hard region is the boundary band of a
    # random ellipse, so errors concentrate where the ring probe looks
    ci = rng.uniform(0.35 * h, 0.65 * h)
    cj = rng.uniform(0.35 * w, 0.65 * w)
    ra = rng.uniform(0.18, 0.30) * h
    rb = rng.uniform(0.18, 0.30) * w
    obj = ((ii - ci) / ra) ** 2 + ((jj - cj) / rb) ** 2 <= 1.0
    band_r = max(1, int(round(frac * min(h, w) / 4)))
    return ring_band(obj, band_r)


def generate_scene(cfg):
    """Deterministic synthetic sample for a given config (seed included)."""
    rng = np.random.default_rng(np.random.SeedSequence((int(cfg.seed), 0xEC)))
    h, w = cfg.height, cfg.width
    depth, u, v = _piecewise_planar_depth(cfg, rng)
    focal = 0.7 * max(h, w)
    scale = max(h, w) / focal
    gt = np.stack([u * scale * depth, v * scale * depth, depth], axis=2)

    hard = _hard_mask(cfg, rng)
    sigma = np.where(hard, cfg.noise.hard_region_sigma, cfg.noise.base_sigma)
    noise = rng.normal(size=(h, w, 3)) * sigma[:, :, None]
    base_pred = gt + noise

    mask = rng.random((h, w)) >= INVALID_FRACTION

    z = depth
    zn = (z - z.mean()) / (z.std() + 1e-12)
    gi, gj = np.gradient(z)
    grad_mag = np.tanh(np.hypot(gi, gj) * 4.0)
    log_sigma = np.log(sigma)
    proxy1 = log_sigma + 0.15 * rng.normal(size=(h, w))
    proxy2 = log_sigma + 0.30 * rng.normal(size=(h, w))
    texture = np.sin(3.0 * u * np.pi) * np.cos(3.0 * v * np.pi)
    channels = [u, v, zn, grad_mag, proxy1, proxy2, texture,
                np.ones((h, w))]
    while len(channels) < cfg.feature_dim:
        channels.append(rng.normal(size=(h, w)))
    features = np.stack(channels[:cfg.feature_dim], axis=2)

    return SceneSample(features=features, gt=gt, base_pred=base_pred,
                       mask=mask, noise_sigma_map=sigma, hard_mask=hard)


def expected_error_scale(sigma):
    """Expected Euclidean error for isotropic 3D Gaussian noise of scale
    sigma: sigma * E||N(0, I_3)|| = sigma * 2 * sqrt(2/pi)."""
    return np.asarray(sigma) * 2.0 * np.sqrt(2.0 / np.pi)
