"""Minimal reverse-mode differentiation over a fixed operator set.

Not a general autodiff framework: exactly the operators the dense predictor
needs (affine, tanh, dropout masks, gated residual composition, the
evidential losses, masked means, and the gate TV prior).  Every adjoint here
is finite-difference tested.

``Var`` wraps a float64 array; operators return new Vars wired with
vector-Jacobian closures.  ``backward(scalar_var)`` accumulates gradients
into ``.grad`` of every reachable Var.
"""

import numpy as np

from . import kernels
from .exceptions import UsageError


class Var:
    """A node in the computation graph."""

    __slots__ = ("value", "grad", "_edges")

    def __init__(self, value, edges=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._edges = tuple(edges)


def _toposort(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._edges:
            stack.append((parent, False))
    return order


def backward(output):
    """Accumulate d(output)/d(node) into .grad for all reachable nodes."""
    if output.value.ndim != 0:
        raise UsageError("backward expects a scalar output")
    order = _toposort(output)
    for node in order:
        node.grad = None
    output.grad = np.ones_like(output.value)
    for node in reversed(order):
        if node.grad is None:
            continue
        for parent, vjp in node._edges:
            contrib = vjp(node.grad)
            parent.grad = contrib if parent.grad is None \
                else parent.grad + contrib


def affine(x, weight, bias):
    """x @ W + b for x (N, Fin), W (Fin, Fout), b (Fout,)."""
    value = x.value @ weight.value + bias.value
    return Var(value, edges=[
        (x, lambda up: up @ weight.value.T),
        (weight, lambda up: x.value.T @ up),
        (bias, lambda up: up.sum(axis=0)),
    ])


def tanh(x):
    value = np.tanh(x.value)
    return Var(value, edges=[(x, lambda up: up * (1.0 - value * value))])


def dropout_mask(x, mask):
    """Multiply by a precomputed (already 1/(1-p)-scaled) mask array."""
    return Var(x.value * mask, edges=[(x, lambda up: up * mask)])


def gated_residual(base, delta, gate):
    """base + sigmoid(gate) * delta for constant base (N, 3), delta Var
    (N, 3), gate Var (N, 1)."""
    g = gate.value
    s = np.where(g >= 0, 1.0 / (1.0 + np.exp(-np.abs(g))),
                 np.exp(-np.abs(g)) / (1.0 + np.exp(-np.abs(g))))
    value = base + s * delta.value
    return Var(value, edges=[
        (delta, lambda up: up * s),
        (gate, lambda up: (up * delta.value).sum(axis=1, keepdims=True)
            * s * (1.0 - s)),
    ])


def concat_cols(parts):
    """Column-wise concatenation of (N, k_i) Vars."""
    value = np.concatenate([p.value for p in parts], axis=1)
    edges = []
    start = 0
    for p in parts:
        stop = start + p.value.shape[1]
        edges.append((p, lambda up, a=start, b=stop: up[:, a:b]))
        start = stop
    return Var(value, edges=edges)


def niw_loss_op(raw, target, lambda_evi, eps):
    """Per-pixel NIW evidential losses, (N,)."""
    loss, grad = kernels.niw_loss_grad(raw.value, target, lambda_evi, eps)
    return Var(loss, edges=[(raw, lambda up: up[:, None] * grad)])


def nig_loss_op(raw, target, lambda_evi, eps):
    loss, grad = kernels.nig_loss_grad(raw.value, target, lambda_evi, eps)
    return Var(loss, edges=[(raw, lambda up: up[:, None] * grad)])


def hetero_loss_op(mean, log_var, target):
    loss, g_mean, g_logvar = kernels.hetero_loss_grad(
        mean.value, log_var.value, target)
    return Var(loss, edges=[
        (mean, lambda up: up[:, None] * g_mean),
        (log_var, lambda up: up[:, None] * g_logvar),
    ])


def masked_mean(x, weights):
    """Weighted mean of a (N,) Var under a {0,1} weight vector."""
    total = weights.sum()
    if total <= 0:
        raise UsageError("masked_mean needs at least one active weight")
    coef = weights / total
    return Var(np.asarray((x.value * coef).sum()),
               edges=[(x, lambda up: up * coef)])


def tv_op(gate, shape):
    """Anisotropic L1 TV of sigmoid(gate) for gate (N, 1) laid out as
    ``shape``; subgradient 0 at exact ties."""
    h, w = shape
    g = gate.value.reshape(h, w)
    s = 1.0 / (1.0 + np.exp(-g))
    n_terms = h * (w - 1) + (h - 1) * w
    if n_terms == 0:
        return Var(np.asarray(0.0), edges=[
            (gate, lambda up: np.zeros_like(gate.value))])
    value = (np.abs(s[:, :-1] - s[:, 1:]).sum()
             + np.abs(s[:-1, :] - s[1:, :]).sum()) / n_terms

    def vjp(up):
        ds = np.zeros_like(s)
        dh = np.sign(s[:, :-1] - s[:, 1:]) / n_terms
        ds[:, :-1] += dh
        ds[:, 1:] -= dh
        dv = np.sign(s[:-1, :] - s[1:, :]) / n_terms
        ds[:-1, :] += dv
        ds[1:, :] -= dv
        return (up * ds * s * (1.0 - s)).reshape(-1, 1)

    return Var(np.asarray(value), edges=[(gate, vjp)])


def scale(x, c):
    return Var(x.value * c, edges=[(x, lambda up: up * c)])


def add(x, y):
    return Var(x.value + y.value, edges=[
        (x, lambda up: up), (y, lambda up: up)])
