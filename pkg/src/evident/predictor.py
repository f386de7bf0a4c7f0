"""A small trainable dense predictor standing in for the frozen backbone's
head stack, plus the training loop (decoupled-weight-decay adaptive steps on
a cosine schedule) and the sampling-based baseline machinery.

The network is a per-pixel MLP: two tanh hidden layers over the feature
channels, with three linear heads on the shared trunk:

* an evidential head (8 raw NIW channels, 9 raw NIG channels, or 3
  heteroscedastic log-variance channels),
* a residual-delta head (3 channels, zero-initialized),
* a gate-logit head (1 channel, zero-initialized).

The predictive mean is always the gated-residual refinement of the frozen
base pointmap, so a freshly initialized model reproduces the base exactly.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .core import DEFAULT_EPS, LossConfig, softplus
from .refine import gated_refine
from .exceptions import (
    DegenerateVarianceError,
    FormatError,
    InvalidInputError,
    TrainingError,
    UsageError,
)

HEAD_KINDS = ("niw", "nig", "hetero")
_UQ_CHANNELS = {"niw": 8, "nig": 9, "hetero": 3}

CHECKPOINT_MAGIC = b"EVPT1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PredictorSpec:
    """Architecture descriptor; two hidden layers is fixed."""

    head_kind: str
    feature_dim: int = 8
    width: int = 64
    dropout: float = 0.0

    def __post_init__(self):
        if self.head_kind not in HEAD_KINDS:
            raise UsageError(f"unknown head kind {self.head_kind!r}")
        if self.feature_dim < 1 or self.width < 1:
            raise UsageError("feature_dim and width must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise UsageError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def uq_channels(self):
        return _UQ_CHANNELS[self.head_kind]

    def param_shapes(self):
        f, w = self.feature_dim, self.width
        return [
            ("w1", (f, w)), ("b1", (w,)),
            ("w2", (w, w)), ("b2", (w,)),
            ("w_uq", (w, self.uq_channels)), ("b_uq", (self.uq_channels,)),
            ("w_delta", (w, 3)), ("b_delta", (3,)),
            ("w_gate", (w, 1)), ("b_gate", (1,)),
        ]

    @property
    def n_params(self):
        return sum(int(np.prod(s)) for _, s in self.param_shapes())


@dataclass
class DensePredictor:
    """Weights live in one flat float64 vector; views are taken per layer."""

    spec: PredictorSpec
    params: np.ndarray
    init_seed: int = 0

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.spec.n_params,):
            raise UsageError(
                f"parameter vector has {self.params.shape}, descriptor needs "
                f"({self.spec.n_params},)")

    def views(self):
        out = {}
        offset = 0
        for name, shape in self.spec.param_shapes():
            size = int(np.prod(shape))
            out[name] = self.params[offset:offset + size].reshape(shape)
            offset += size
        return out


def init_predictor(spec, seed=0):
    """Seeded initialization: scaled-normal trunk and evidential head,
    zero residual/gate heads (exact no-op start)."""
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x1717)))
    params = np.zeros(spec.n_params)
    model = DensePredictor(spec=spec, params=params, init_seed=int(seed))
    views = model.views()
    for name in ("w1", "w2", "w_uq"):
        w = views[name]
        w[:] = rng.normal(0.0, 1.0 / np.sqrt(w.shape[0]), size=w.shape)
    # b*, w_delta, b_delta, w_gate, b_gate stay zero
    return model


@dataclass(frozen=True)
class HeadOutputs:
    """Raw per-pixel head outputs on the H x W grid."""

    uq_raw: np.ndarray
    delta: np.ndarray
    gate: np.ndarray


@dataclass(frozen=True)
class Prediction:
    """Assembled per-pixel predictive maps for one image."""

    kind: str
    refined: np.ndarray          # H x W x 3 predictive mean
    raw: np.ndarray              # H x W x 11 (niw) / 12 (nig) / 3 (log_var)
    delta: np.ndarray
    gate: np.ndarray


def _forward_graph(model, x, stochastic, rng):
    """Shared tape-based forward over flattened pixels x (N, F)."""
    spec = model.spec
    if x.ndim != 2 or x.shape[1] != spec.feature_dim:
        raise UsageError(
            f"features have {x.shape}, model expects (N, {spec.feature_dim})")
    if stochastic and spec.dropout > 0.0 and rng is None:
        raise UsageError("stochastic forward needs a seeded generator")
    views = model.views()
    pvars = {name: ad.Var(arr) for name, arr in views.items()}

    h = ad.tanh(ad.affine(ad.Var(x), pvars["w1"], pvars["b1"]))
    if stochastic and spec.dropout > 0.0:
        keep = 1.0 - spec.dropout
        h = ad.dropout_mask(
            h, (rng.random(h.value.shape) < keep) / keep)
    h = ad.tanh(ad.affine(h, pvars["w2"], pvars["b2"]))
    if stochastic and spec.dropout > 0.0:
        keep = 1.0 - spec.dropout
        h = ad.dropout_mask(
            h, (rng.random(h.value.shape) < keep) / keep)

    uq = ad.affine(h, pvars["w_uq"], pvars["b_uq"])
    delta = ad.affine(h, pvars["w_delta"], pvars["b_delta"])
    gate = ad.affine(h, pvars["w_gate"], pvars["b_gate"])
    return pvars, uq, delta, gate


def forward(model, features, stochastic=False, rng=None):
    """Head outputs for an H x W x F feature map.

    Deterministic when ``stochastic`` is false; dropout masks otherwise come
    from the supplied generator.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3:
        raise UsageError(f"features must be H x W x F, got {features.shape}")
    h, w, f = features.shape
    _, uq, delta, gate = _forward_graph(
        model, features.reshape(h * w, f), stochastic, rng)
    return HeadOutputs(
        uq_raw=uq.value.reshape(h, w, -1),
        delta=delta.value.reshape(h, w, 3),
        gate=gate.value.reshape(h, w),
    )


def _assemble_raw(kind, refined_flat, uq_flat):
    if kind in ("niw", "nig"):
        return np.concatenate([refined_flat, uq_flat], axis=1)
    return uq_flat  # hetero: log-variance channels only


def predict(model, features, base_pred, stochastic=False, rng=None):
    """Full predictive maps: gated-residual refined mean plus the assembled
    raw evidential map (mean channels taken from the refinement)."""
    features = np.asarray(features, dtype=np.float64)
    base_pred = np.asarray(base_pred, dtype=np.float64)
    head = forward(model, features, stochastic=stochastic, rng=rng)
    if base_pred.shape != head.delta.shape:
        raise UsageError(
            f"base_pred {base_pred.shape} does not match {head.delta.shape}")
    refined = gated_refine(base_pred, head.delta, head.gate)
    h, w, _ = refined.shape
    raw = _assemble_raw(model.spec.head_kind,
                        refined.reshape(h * w, 3),
                        head.uq_raw.reshape(h * w, -1)).reshape(h, w, -1)
    return Prediction(kind=model.spec.head_kind, refined=refined, raw=raw,
                      delta=head.delta, gate=head.gate)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization protocol: decoupled weight decay, cosine decay to zero,
    no warmup; base learning rate is scaled linearly by batch/10."""

    base_lr: float = 3e-4
    weight_decay: float = 0.05
    epochs: int = 10
    batch_size: int = 10
    loss: LossConfig = field(default_factory=LossConfig)
    tv_weight: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.base_lr < 0:
            raise InvalidInputError("base_lr must be nonnegative")
        if self.weight_decay < 0:
            raise InvalidInputError("weight_decay must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidInputError("epochs and batch_size must be >= 1")

    @property
    def scaled_lr(self):
        return self.base_lr * (self.batch_size / 10.0)


@dataclass(frozen=True)
class BaselineConfig:
    """Sampling-baseline settings: stochastic passes for MC dropout,
    member count for deep ensembles, and the moment-matching noise floor."""

    mode: str
    t_passes: int = 16
    k_members: int = 5
    sigma0_sq: float = 0.0

    def __post_init__(self):
        if self.mode not in ("mcdropout", "ensemble", "hetero"):
            raise UsageError(f"unknown baseline mode {self.mode!r}")
        if self.t_passes < 1 or self.k_members < 1:
            raise InvalidInputError("t_passes and k_members must be >= 1")
        if self.sigma0_sq < 0:
            raise InvalidInputError("sigma0_sq must be nonnegative")


def cosine_factor(step, total_steps):
    """Cosine decay multiplier: 1 at step 0, exactly 0 at the final step."""
    if total_steps <= 1:
        return 1.0
    return 0.5 * (1.0 + np.cos(np.pi * step / (total_steps - 1)))


def epoch_order(seed, epoch, n):
    """Deterministic per-epoch sample order; independent of the head kind."""
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), int(epoch))))
    return rng.permutation(n)


def _image_loss_var(model, sample, cfg, drop_rng):
    """Scalar loss Var for one image plus its parameter Vars:
    lambda_uq * masked-mean pixel loss (+ optional gate TV)."""
    features = np.asarray(sample.features, dtype=np.float64)
    h, w, f = features.shape
    gt = np.ascontiguousarray(
        np.asarray(sample.gt, dtype=np.float64).reshape(h * w, 3))
    base = np.asarray(sample.base_pred, dtype=np.float64).reshape(h * w, 3)
    weights = np.asarray(sample.mask, dtype=np.float64).reshape(h * w)

    stochastic = model.spec.dropout > 0.0
    pvars, uq, delta, gate = _forward_graph(
        model, features.reshape(h * w, f), stochastic, drop_rng)
    refined = ad.gated_residual(base, delta, gate)
    kind = model.spec.head_kind
    if kind == "niw":
        raw = ad.concat_cols([refined, uq])
        pixel = ad.niw_loss_op(raw, gt, cfg.loss.lambda_evi, cfg.loss.eps)
    elif kind == "nig":
        raw = ad.concat_cols([refined, uq])
        pixel = ad.nig_loss_op(raw, gt, cfg.loss.lambda_evi, cfg.loss.eps)
    else:
        pixel = ad.hetero_loss_op(refined, uq, gt)
    loss = ad.scale(ad.masked_mean(pixel, weights), cfg.loss.lambda_uq)
    if cfg.tv_weight > 0.0:
        loss = ad.add(loss, ad.scale(ad.tv_op(gate, (h, w)), cfg.tv_weight))
    return loss, pvars


def train(model, data, cfg):
    """Train in place; returns (model, history) where history holds one
    record per epoch with the mean training loss and the last lr used.

    Identical (seed, config, data) reproduce bitwise-identical weights.
    """
    data = list(data)
    if not data:
        raise UsageError("training needs a non-empty dataset")
    drop_rng = np.random.default_rng(
        np.random.SeedSequence((int(cfg.seed), 0xD0)))
    n = len(data)
    n_batches = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * n_batches

    m1 = np.zeros_like(model.params)
    m2 = np.zeros_like(model.params)
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8
    shapes = model.spec.param_shapes()
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = epoch_order(cfg.seed, epoch, n)
        epoch_losses = []
        lr_now = cfg.scaled_lr
        for b in range(n_batches):
            batch = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            # each image gets its own graph over fresh Vars of the shared
            # weight views; per-parameter grads are summed across images
            batch_loss = None
            batch_pvars = []
            for idx in batch:
                img_loss, img_pvars = _image_loss_var(
                    model, data[idx], cfg, drop_rng)
                batch_pvars.append(img_pvars)
                batch_loss = img_loss if batch_loss is None \
                    else ad.add(batch_loss, img_loss)
            batch_loss = ad.scale(batch_loss, 1.0 / len(batch))
            value = float(batch_loss.value)
            if not np.isfinite(value):
                raise TrainingError("training loss became non-finite",
                                    epoch=epoch)
            epoch_losses.append(value)
            ad.backward(batch_loss)

            grad = np.zeros_like(model.params)
            offset = 0
            for name, shape in shapes:
                size = int(np.prod(shape))
                for img_pvars in batch_pvars:
                    g = img_pvars[name].grad
                    if g is not None:
                        grad[offset:offset + size] += g.reshape(-1)
                offset += size

            factor = cosine_factor(step, total_steps)
            lr_now = factor * cfg.scaled_lr
            m1 = beta1 * m1 + (1.0 - beta1) * grad
            m2 = beta2 * m2 + (1.0 - beta2) * grad * grad
            t = step + 1
            mhat = m1 / (1.0 - beta1 ** t)
            vhat = m2 / (1.0 - beta2 ** t)
            model.params -= factor * (
                cfg.scaled_lr * mhat / (np.sqrt(vhat) + adam_eps)
                + cfg.weight_decay * model.params)
            step += 1
        history.append({
            "epoch": epoch,
            "loss": float(np.mean(epoch_losses)),
            "lr": float(lr_now),
        })
    return model, history


def dropout_sample(model, features, base_pred, t_passes, seed=0):
    """T stochastic refined-mean pointmaps with independent dropout masks."""
    if model.spec.dropout <= 0.0:
        raise UsageError(
            "dropout_sample needs a model with a nonzero dropout rate")
    if t_passes < 1:
        raise UsageError("t_passes must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x5A)))
    return np.stack([
        predict(model, features, base_pred, stochastic=True, rng=rng).refined
        for _ in range(t_passes)
    ])


def moment_match(samples, sigma0_sq):
    """Per-pixel diagonal Gaussian from sampled pointmaps: sample mean and
    unbiased sample variance plus the noise floor."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim < 2:
        raise UsageError("samples must stack at least one pointmap")
    if sigma0_sq < 0:
        raise InvalidInputError("sigma0_sq must be nonnegative")
    t = samples.shape[0]
    mean = samples.mean(axis=0)
    if t < 2:
        if sigma0_sq == 0:
            raise DegenerateVarianceError(
                "one sample and no noise floor give a degenerate variance")
        var = np.full_like(mean, float(sigma0_sq))
    else:
        var = samples.var(axis=0, ddof=1) + sigma0_sq
    return mean, var


def hetero_loss(mean, log_var, x_gt):
    """Diagonal-Gaussian NLL for one pixel, summed over coordinates."""
    mean = np.asarray(mean, dtype=np.float64).reshape(1, 3)
    log_var = np.asarray(log_var, dtype=np.float64).reshape(1, 3)
    x_gt = np.asarray(x_gt, dtype=np.float64).reshape(1, 3)
    loss, _, _ = kernels.hetero_loss_grad(mean, log_var, x_gt)
    return float(loss[0])


def hetero_loss_grad(mean, log_var, x_gt):
    """Analytic gradients of hetero_loss with respect to mean and log_var."""
    mean = np.asarray(mean, dtype=np.float64).reshape(1, 3)
    log_var = np.asarray(log_var, dtype=np.float64).reshape(1, 3)
    x_gt = np.asarray(x_gt, dtype=np.float64).reshape(1, 3)
    _, g_mean, g_logvar = kernels.hetero_loss_grad(mean, log_var, x_gt)
    return g_mean[0], g_logvar[0]


def readout_maps(pred, eps=DEFAULT_EPS):
    """Per-pixel alea/epi/total uncertainty traces for a Prediction.

    Hetero heads have no epistemic term; its entry is None there.
    """
    h, w = pred.refined.shape[:2]
    if pred.kind == "niw":
        raw = pred.raw.reshape(h * w, 11)
        kappa = softplus(raw[:, 3]) + eps
        nu = 4.0 + softplus(raw[:, 4])
        diag = softplus(raw[:, [5, 7, 10]]) + eps
        tr_psi = (diag ** 2).sum(axis=1) + (raw[:, [6, 8, 9]] ** 2).sum(axis=1)
        alea = tr_psi / (nu - 4.0)
        epi = alea / kappa
    elif pred.kind == "nig":
        raw = pred.raw.reshape(h * w, 12)
        nu = softplus(raw[:, 3:6]) + eps
        alpha = 1.0 + softplus(raw[:, 6:9]) + eps
        beta = softplus(raw[:, 9:12]) + eps
        alea_c = beta / (alpha - 1.0)
        alea = alea_c.sum(axis=1)
        epi = (alea_c / nu).sum(axis=1)
    elif pred.kind == "hetero":
        alea = np.exp(pred.raw.reshape(h * w, 3)).sum(axis=1)
        return {"alea": alea.reshape(h, w), "epi": None,
                "total": alea.reshape(h, w)}
    else:
        raise UsageError(f"unknown prediction kind {pred.kind!r}")
    return {"alea": alea.reshape(h, w), "epi": epi.reshape(h, w),
            "total": (alea + epi).reshape(h, w)}


def heuristic_confidence(base_pred, mask, smooth_radius=2):
    """Residual-free confidence proxy emulating a backbone's heuristic
    reliability score: depth discontinuities of the (box-smoothed) base
    prediction mark difficult geometry.  The smoothing keeps the proxy from
    degenerating into a per-pixel error estimate."""
    z = np.asarray(base_pred, dtype=np.float64)[:, :, 2]
    h, w = z.shape
    r = int(smooth_radius)
    padded = np.pad(z, r, mode="edge")
    zs = np.zeros_like(z)
    for di in range(2 * r + 1):
        for dj in range(2 * r + 1):
            zs += padded[di:di + h, dj:dj + w]
    zs /= (2 * r + 1) ** 2
    gi, gj = np.gradient(zs)
    grad = np.hypot(gi, gj)
    valid = np.asarray(mask, dtype=bool)
    med = float(np.median(grad[valid])) if valid.any() else 0.0
    return np.exp(-grad / (med + 1e-12))


def save_checkpoint(path, model):
    """Versioned binary checkpoint: magic, descriptor, float32 weights,
    CRC-64 trailer."""
    desc = {
        "head_kind": model.spec.head_kind,
        "feature_dim": model.spec.feature_dim,
        "width": model.spec.width,
        "dropout": model.spec.dropout,
        "init_seed": model.init_seed,
        "n_params": int(model.spec.n_params),
    }
    desc_bytes = json.dumps(desc, sort_keys=True).encode("utf-8")
    weights = model.params.astype("<f4").tobytes()
    body = (CHECKPOINT_MAGIC
            + struct.pack("<B", CHECKPOINT_VERSION)
            + struct.pack("<I", len(desc_bytes)) + desc_bytes
            + struct.pack("<Q", model.spec.n_params)
            + weights)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<Q", kernels.crc64(body)))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 1 + 4:
        raise FormatError("checkpoint truncated", offset=len(blob))
    if blob[:5] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:5]!r}", offset=0)
    version = blob[5]
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=5)
    if len(blob) < 8:
        raise FormatError("checkpoint truncated", offset=len(blob))
    stored_crc = struct.unpack("<Q", blob[-8:])[0]
    if kernels.crc64(blob[:-8]) != stored_crc:
        raise FormatError("checkpoint checksum mismatch", offset=len(blob) - 8)
    (desc_len,) = struct.unpack_from("<I", blob, 6)
    desc_stop = 10 + desc_len
    if desc_stop + 8 > len(blob) - 8:
        raise FormatError("checkpoint descriptor overruns the file",
                          offset=6)
    try:
        desc = json.loads(blob[10:desc_stop].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"bad checkpoint descriptor: {exc}",
                          offset=10) from exc
    (n_params,) = struct.unpack_from("<Q", blob, desc_stop)
    w_start = desc_stop + 8
    w_stop = w_start + 4 * n_params
    if w_stop != len(blob) - 8:
        raise FormatError("checkpoint weight block has wrong length",
                          offset=w_start)
    weights = np.frombuffer(blob[w_start:w_stop], dtype="<f4").astype(np.float64)
    spec = PredictorSpec(
        head_kind=desc["head_kind"], feature_dim=desc["feature_dim"],
        width=desc["width"], dropout=desc["dropout"])
    if spec.n_params != n_params:
        raise FormatError("descriptor/weight-count mismatch", offset=desc_stop)
    return DensePredictor(spec=spec, params=weights,
                          init_seed=desc.get("init_seed", 0))
