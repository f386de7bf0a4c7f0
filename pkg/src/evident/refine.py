"""Gated residual refinement of a frozen base pointmap, token upsampling,
identity-initialized post-upsampling smoothing, and the optional
total-variation prior on the gate map."""

from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidInputError, UsageError


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gated_refine(base, delta, gate):
    """refined = base + sigmoid(gate) * delta, broadcast over coordinates.

    ``base`` is never mutated; a fully closed gate (large negative logits)
    reproduces it bitwise.
    """
    base = np.asarray(base, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    gate = np.asarray(gate, dtype=np.float64)
    if base.shape != delta.shape:
        raise UsageError(f"base {base.shape} and delta {delta.shape} differ")
    if gate.shape != base.shape[:-1]:
        raise UsageError(
            f"gate {gate.shape} does not match spatial dims {base.shape[:-1]}")
    return base + sigmoid(gate)[..., None] * delta


@dataclass(frozen=True)
class SmoothingKernel:
    """Depthwise 3x3 taps, pointwise CxC mixing, and a bias per channel."""

    depthwise: np.ndarray
    pointwise: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        dw = np.asarray(self.depthwise, dtype=np.float64)
        pw = np.asarray(self.pointwise, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        c = pw.shape[0]
        if dw.shape != (c, 3, 3) or pw.shape != (c, c) or b.shape != (c,):
            raise InvalidInputError(
                f"inconsistent kernel shapes: {dw.shape}, {pw.shape}, {b.shape}")
        object.__setattr__(self, "depthwise", dw)
        object.__setattr__(self, "pointwise", pw)
        object.__setattr__(self, "bias", b)

    @property
    def channels(self):
        return self.pointwise.shape[0]

    @classmethod
    def identity(cls, channels):
        """Center tap 1 per channel, identity mixing, zero bias: smooth() is
        an exact no-op."""
        dw = np.zeros((channels, 3, 3))
        dw[:, 1, 1] = 1.0
        return cls(depthwise=dw, pointwise=np.eye(channels),
                   bias=np.zeros(channels))


def smooth(field, kernel):
    """Depthwise 3x3 convolution with replicate padding, then pointwise 1x1
    mixing plus bias."""
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 3 or field.shape[2] != kernel.channels:
        raise UsageError(
            f"field shape {field.shape} incompatible with "
            f"{kernel.channels}-channel kernel")
    padded = np.pad(field, ((1, 1), (1, 1), (0, 0)), mode="edge")
    h, w, c = field.shape
    out = np.zeros_like(field)
    for di in range(3):
        for dj in range(3):
            out += padded[di:di + h, dj:dj + w, :] * kernel.depthwise[:, di, dj]
    return out @ kernel.pointwise.T + kernel.bias


def tv_penalty(gate):
    """Anisotropic L1 total variation of the sigmoid-activated gate map,
    averaged over the number of neighbor differences; 0 iff the gate is
    constant."""
    gate = np.asarray(gate, dtype=np.float64)
    if gate.ndim != 2:
        raise UsageError(f"gate must be 2-D, got shape {gate.shape}")
    s = sigmoid(gate)
    n_terms = s.shape[0] * (s.shape[1] - 1) + (s.shape[0] - 1) * s.shape[1]
    if n_terms == 0:
        return 0.0
    horiz = np.abs(s[:, :-1] - s[:, 1:]).sum()
    vert = np.abs(s[:-1, :] - s[1:, :]).sum()
    return float((horiz + vert) / n_terms)


def upsample_tokens(tokens, factor):
    """Nearest-neighbor token-to-pixel upsampling (deliberately blocky, so
    the smoothing operator has patch-grid artifacts to remove)."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if not (isinstance(factor, (int, np.integer)) and factor >= 1):
        raise UsageError(f"factor must be a positive integer, got {factor!r}")
    if tokens.ndim != 3:
        raise UsageError(f"tokens must be h x w x C, got shape {tokens.shape}")
    return np.repeat(np.repeat(tokens, factor, axis=0), factor, axis=1)
