"""End-to-end run drivers behind the CLI: dataset simulation, training,
evaluation (single-pass heads, MC-dropout, deep ensembles, confidence
proxy), gradient checking, and ring-band reliability scoring.

Everything here is deterministic for fixed seeds, and report payloads stay
free of filesystem paths so identical runs serialize byte-identically.
"""

import json
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import metrics
from ._threads import parallel_map
from .align import apply_sim3, umeyama_sim3
from .core import DEFAULT_EPS, LossConfig
from .datagen import generate_scene
from .dataio import load_dataset, write_array, write_manifest
from .exceptions import UndefinedMetricError, UsageError
from .predictor import (
    PredictorSpec,
    TrainConfig,
    dropout_sample,
    heuristic_confidence,
    init_predictor,
    moment_match,
    predict,
    readout_maps,
    save_checkpoint,
    train,
)

REPORT_SCHEMA = "evident-report-v1"
SPLITS = ("train", "val", "test")
SIGMA0_GRID = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2)


def write_json(path, payload):
    with open(path, "w") as fh:
        fh.write(json.dumps(payload, indent=2, sort_keys=True))
        fh.write("\n")


# ---------------------------------------------------------------------------
# simulate

def simulate_run(out_dir, n_train, n_val, n_test, scene, seed):
    """Write train/val/test splits as DARR files plus manifests."""
    out_dir = Path(out_dir)
    counts = {"train": n_train, "val": n_val, "test": n_test}
    for split_idx, split in enumerate(SPLITS):
        split_dir = out_dir / split
        split_dir.mkdir(parents=True, exist_ok=True)
        names = []
        for i in range(counts[split]):
            sample_seed = seed * 1_000_003 + split_idx * 99_991 + i
            cfg = replace(scene, seed=sample_seed)
            sample = generate_scene(cfg)
            name = f"{split}_{i:03d}"
            names.append(name)
            write_array(split_dir / f"{name}_features.darr", sample.features)
            write_array(split_dir / f"{name}_gt.darr", sample.gt)
            write_array(split_dir / f"{name}_base_pred.darr", sample.base_pred)
            write_array(split_dir / f"{name}_mask.darr",
                        sample.mask.astype(np.float32))
            write_array(split_dir / f"{name}_sigma.darr",
                        sample.noise_sigma_map)
            write_array(split_dir / f"{name}_hard_mask.darr",
                        sample.hard_mask.astype(np.float32))
        write_manifest(split_dir, names)
    return counts


# ---------------------------------------------------------------------------
# train

def train_run(data_dir, head, epochs, lr, weight_decay, lambda_evi,
              lambda_uq, tv_weight, dropout, batch_size, width, seed,
              out_path):
    """Train a head on the train split and write checkpoint plus log."""
    samples = load_dataset(Path(data_dir) / "train")
    if not samples:
        raise UsageError(f"no training samples under {data_dir}")
    feature_dim = samples[0].features.shape[2]
    spec = PredictorSpec(head_kind=head, feature_dim=feature_dim,
                         width=width, dropout=dropout)
    model = init_predictor(spec, seed=seed)
    cfg = TrainConfig(
        base_lr=lr, weight_decay=weight_decay, epochs=epochs,
        batch_size=batch_size,
        loss=LossConfig(lambda_evi=lambda_evi, lambda_uq=lambda_uq),
        tv_weight=tv_weight, seed=seed)
    model, history = train(model, samples, cfg)
    save_checkpoint(out_path, model)
    log_path = Path(out_path).with_suffix(".log.json")
    write_json(log_path, {"epochs": history})
    return model, history


# ---------------------------------------------------------------------------
# evaluation sources: sample -> per-image predictive bundle

@dataclass(frozen=True)
class SourceOutput:
    """Per-image outputs every evaluation path produces."""

    refined: np.ndarray       # H x W x 3 predictive mean
    u: np.ndarray             # H x W scalar uncertainty (larger = worse)
    nll_kind: str             # metrics.eval_nll dispatch kind, or "conf"
    nll_maps: dict


def make_model_source(model, readout, eps=DEFAULT_EPS):
    """Single-pass evidential/heteroscedastic head evaluation."""
    kind = model.spec.head_kind
    if readout == "conf":
        def run(sample):
            pred = predict(model, sample.features, sample.base_pred)
            conf = heuristic_confidence(sample.base_pred, sample.mask)
            return SourceOutput(refined=pred.refined,
                                u=-np.log(conf + eps),
                                nll_kind="conf", nll_maps={})
        return run

    def run(sample):
        pred = predict(model, sample.features, sample.base_pred)
        traces = readout_maps(pred, eps=eps)
        if readout not in traces or traces[readout] is None:
            raise UsageError(
                f"readout {readout!r} is incompatible with a {kind} head")
        if kind == "hetero":
            nll_maps = {"mean": pred.refined, "log_var": pred.raw}
        else:
            nll_maps = {"raw": pred.raw}
        return SourceOutput(refined=pred.refined, u=traces[readout],
                            nll_kind=kind, nll_maps=nll_maps)
    return run


def make_conf_source(eps=DEFAULT_EPS):
    """Backbone-confidence baseline: no model, base prediction as mean."""
    def run(sample):
        conf = heuristic_confidence(sample.base_pred, sample.mask)
        return SourceOutput(refined=np.array(sample.base_pred, dtype=np.float64),
                            u=-np.log(conf + eps),
                            nll_kind="conf", nll_maps={})
    return run


def make_mcdropout_source(model, t_passes, sigma0_sq, seed=0):
    """T stochastic passes moment-matched to a diagonal Gaussian."""
    if model.spec.dropout <= 0.0:
        raise UsageError("mcdropout needs a checkpoint trained with dropout")
    if t_passes < 1:
        raise UsageError("t_passes must be >= 1")

    def run(sample):
        pass_seed = _stable_sample_seed(seed, sample.id)
        samples = dropout_sample(model, sample.features, sample.base_pred,
                                 t_passes, seed=pass_seed)
        mean, var = moment_match(samples, sigma0_sq)
        return SourceOutput(refined=mean, u=var.sum(axis=2),
                            nll_kind="gaussian_diag",
                            nll_maps={"mean": mean, "var": var})
    return run


def make_ensemble_source(members, sigma0_sq):
    """K deterministic member predictions moment-matched per pixel."""
    if not members:
        raise UsageError("ensemble needs at least one member")

    def run(sample):
        preds = np.stack([
            predict(m, sample.features, sample.base_pred).refined
            for m in members])
        mean, var = moment_match(preds, sigma0_sq)
        return SourceOutput(refined=mean, u=var.sum(axis=2),
                            nll_kind="gaussian_diag",
                            nll_maps={"mean": mean, "var": var})
    return run


def _stable_sample_seed(seed, sample_id):
    digest = sum((i + 1) * b for i, b in enumerate(sample_id.encode())) % 65521
    return int(seed) * 70_001 + digest


# ---------------------------------------------------------------------------
# evaluation driver

def evaluate_source(source, samples, align=True,
                    grid_size=metrics.DEFAULT_GRID_SIZE,
                    pc_threshold=metrics.DEFAULT_PC_THRESHOLD):
    """Run a per-image source over a dataset and aggregate the full metric
    report; NLL is always computed in the raw frame (no alignment)."""
    if not samples:
        raise UsageError("evaluation needs at least one sample")

    def eval_one(sample):
        out = source(sample)
        mask = np.asarray(sample.mask, dtype=bool)
        gt = np.asarray(sample.gt, dtype=np.float64)
        refined = out.refined
        if align:
            transform = umeyama_sim3(refined, gt, mask)
            aligned = apply_sim3(transform, refined)
        else:
            aligned = refined
        e_map = np.zeros(mask.shape)
        e_map[mask] = np.linalg.norm(aligned[mask] - gt[mask], axis=-1)
        e = e_map[mask]
        u = np.asarray(out.u, dtype=np.float64)[mask]

        mae, rmse = metrics.mae_rmse(e)
        try:
            rho = metrics.spearman_rho(u, e)
        except UndefinedMetricError:
            rho = None
        rc = metrics.risk_coverage(u, e, grid_size)
        sp = metrics.sparsification(u, e, grid_size)
        if out.nll_kind == "conf":
            nll = None
        else:
            nll = metrics.eval_nll(out.nll_kind, out.nll_maps, gt, mask)
        pc = metrics.pointcloud_metrics(aligned[mask], gt[mask], pc_threshold)
        record = {
            "id": sample.id,
            "mae": mae,
            "rmse": rmse,
            "spearman_rho": rho,
            "aurc": metrics.aurc(rc),
            "oracle_aurc": metrics.oracle_aurc(rc),
            "ause": metrics.ause(sp),
            "nll": nll,
            "n_valid": int(mask.sum()),
            "pointcloud": {
                "accuracy": pc[0], "completeness": pc[1],
                "chamfer": pc[2], "f1": pc[3],
            },
        }
        return record, rc, sp, u, e

    results = parallel_map(eval_one, samples)
    per_image = []
    rc_curves, sp_curves = [], []
    pooled_u, pooled_e = [], []
    for record, rc, sp, u, e in results:
        per_image.append(record)
        rc_curves.append(rc)
        sp_curves.append(sp)
        pooled_u.append(u)
        pooled_e.append(e)

    def _mean(key):
        return float(np.mean([r[key] for r in per_image]))

    defined_rho = [r["spearman_rho"] for r in per_image
                   if r["spearman_rho"] is not None]
    defined_nll = [r["nll"] for r in per_image if r["nll"] is not None]
    dataset = {
        "mae": _mean("mae"),
        "rmse": _mean("rmse"),
        "aurc": _mean("aurc"),
        "oracle_aurc": _mean("oracle_aurc"),
        "ause": _mean("ause"),
        "spearman_rho": float(np.mean(defined_rho)) if defined_rho else None,
        "nll": float(np.mean(defined_nll)) if defined_nll else None,
        "n_images": len(per_image),
        "n_valid_total": int(sum(r["n_valid"] for r in per_image)),
    }
    pc_mean = {
        key: float(np.mean([r["pointcloud"][key] for r in per_image]))
        for key in ("accuracy", "completeness", "chamfer", "f1")
    }
    pc_mean["threshold"] = pc_threshold

    pooled_u = np.concatenate(pooled_u)
    pooled_e = np.concatenate(pooled_e)
    curves = {
        "risk_coverage_perimg": _mean_curve(rc_curves),
        "risk_coverage_pooled": metrics.risk_coverage(
            pooled_u, pooled_e, grid_size),
        "sparsification_perimg": _mean_curve(sp_curves),
        "sparsification_pooled": metrics.sparsification(
            pooled_u, pooled_e, grid_size),
    }
    report = {
        "schema": REPORT_SCHEMA,
        "per_image": per_image,
        "dataset": dataset,
        "pointcloud": pc_mean,
    }
    return report, curves


def _mean_curve(curves):
    n = min(c.x.size for c in curves)
    x = curves[0].x[:n]
    return metrics.CurveSeries(
        x=x,
        y_unc=np.mean([c.y_unc[:n] for c in curves], axis=0),
        y_oracle=np.mean([c.y_oracle[:n] for c in curves], axis=0),
    )


def write_curve_files(prefix, curves):
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, curve in curves.items():
        kind, mode = name.rsplit("_", 1)
        path = prefix.parent / f"{prefix.name}_{kind}_{mode}.csv"
        metrics.write_curve_csv(path, curve)
        paths[name] = str(path)
    return paths


def select_sigma0(source_factory, val_samples):
    """Grid-search the moment-matching noise floor by validation NLL."""
    best = None
    for sigma0 in SIGMA0_GRID:
        source = source_factory(sigma0)
        nlls = []
        for sample in val_samples:
            out = source(sample)
            nlls.append(metrics.eval_nll(
                out.nll_kind, out.nll_maps, sample.gt, sample.mask))
        mean_nll = float(np.mean(nlls))
        if best is None or mean_nll < best[1]:
            best = (sigma0, mean_nll)
    return best[0]


# ---------------------------------------------------------------------------
# gradient checking

_GRADCHECK_GROUPS = {
    "niw": {"m": [0, 1, 2], "kappa_raw": [3], "nu_raw": [4],
            "l_raw": [5, 6, 7, 8, 9, 10]},
    "nig": {"gamma": [0, 1, 2], "nu_raw": [3, 4, 5],
            "alpha_raw": [6, 7, 8], "beta_raw": [9, 10, 11]},
    "hetero": {"mean": [0, 1, 2], "log_var": [3, 4, 5]},
}


def _gradcheck_single(head, params, target, lambda_evi, eps, fd_step):
    """Analytic vs central-difference gradients for one random draw.

    The finite differences are taken on the scalar reference implementations
    (evident.core / predictor.hetero_loss), so this cross-checks the batch
    kernels against an independent code path.
    """
    from .core import nig as nig_mod
    from .core import niw as niw_mod
    from .predictor import hetero_loss, hetero_loss_grad

    cfg = LossConfig(lambda_evi=lambda_evi, eps=eps)
    params = np.asarray(params, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)

    if head == "niw":
        def scalar_loss(vec):
            return niw_mod.niw_loss_raw(vec, target, cfg)
        analytic = niw_mod.niw_loss_grad(params, target, cfg).as_vector()
    elif head == "nig":
        def scalar_loss(vec):
            ps = [nig_mod.raw_to_nig(vec[c], vec[3 + c], vec[6 + c],
                                     vec[9 + c], eps) for c in range(3)]
            return nig_mod.xyz_nig_loss(ps, target, cfg)
        analytic = nig_mod.xyz_nig_loss_grad_raw(params, target, cfg)[1]
    elif head == "hetero":
        def scalar_loss(vec):
            return hetero_loss(vec[0:3], vec[3:6], target)
        g_mean, g_logvar = hetero_loss_grad(params[0:3], params[3:6], target)
        analytic = np.concatenate([g_mean, g_logvar])
    else:
        raise UsageError(f"unknown gradcheck head {head!r}")

    fd = np.empty_like(params)
    for i in range(params.size):
        hi = params.copy()
        lo = params.copy()
        hi[i] += fd_step
        lo[i] -= fd_step
        fd[i] = (scalar_loss(hi) - scalar_loss(lo)) / (2.0 * fd_step)
    rel = np.abs(analytic - fd) / np.maximum(np.abs(fd), 1e-6)
    return analytic, fd, rel


def gradcheck_run(head, trials=100, fd_step=1e-5, tol=1e-4, seed=0,
                  lambda_evi=1e-3, eps=DEFAULT_EPS):
    """N random draws; reports max relative error per parameter group and
    the worst offending draw for deterministic replay."""
    if head not in _GRADCHECK_GROUPS:
        raise UsageError(f"gradcheck head must be one of "
                         f"{tuple(_GRADCHECK_GROUPS)}, got {head!r}")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x6C)))
    dim = {"niw": 11, "nig": 12, "hetero": 6}[head]
    groups = _GRADCHECK_GROUPS[head]
    group_max = {g: 0.0 for g in groups}
    worst = None
    for _ in range(int(trials)):
        params = rng.normal(0.0, 1.2, size=dim)
        target = rng.normal(0.0, 1.0, size=3)
        _, _, rel = _gradcheck_single(head, params, target, lambda_evi, eps,
                                      fd_step)
        draw_max = float(rel.max())
        if worst is None or draw_max > worst["max_rel_err"]:
            worst = {
                "head": head,
                "params": params.tolist(),
                "target": target.tolist(),
                "lambda_evi": lambda_evi,
                "eps": eps,
                "fd_step": fd_step,
                "max_rel_err": draw_max,
            }
        for g, idx in groups.items():
            group_max[g] = max(group_max[g], float(rel[idx].max()))
    overall = max(group_max.values())
    return {
        "head": head,
        "trials": int(trials),
        "fd_step": fd_step,
        "tol": tol,
        "group_max_rel_err": group_max,
        "max_rel_err": overall,
        "passed": bool(overall <= tol),
        "worst_draw": worst,
    }


def gradcheck_replay(draw):
    """Recompute the relative errors for a serialized failure draw."""
    _, _, rel = _gradcheck_single(
        draw["head"], np.asarray(draw["params"]), np.asarray(draw["target"]),
        draw["lambda_evi"], draw["eps"], draw["fd_step"])
    return float(rel.max())


# ---------------------------------------------------------------------------
# ring-band reliability

def ringcheck_run(samples, source, radius=3):
    """Ring-band AUROC / FPR@95%TPR per sample and dataset means.

    The ring (positives) is built from each sample's hard mask; all other
    valid pixels are negatives.  Single-class samples are skipped and
    counted.
    """
    if not (isinstance(radius, (int, np.integer)) and radius >= 1):
        raise UsageError(f"ring radius must be >= 1, got {radius!r}")
    per_sample = []
    aurocs, fprs = [], []
    n_skipped = 0
    for sample in samples:
        out = source(sample)
        ring = metrics.ring_band(np.asarray(sample.hard_mask, dtype=bool),
                                 radius)
        valid = np.asarray(sample.mask, dtype=bool)
        try:
            auroc, fpr = metrics.auroc_fpr(out.u, ring, region=valid)
        except UndefinedMetricError:
            n_skipped += 1
            per_sample.append({"id": sample.id, "skipped": True})
            continue
        per_sample.append(
            {"id": sample.id, "auroc": auroc, "fpr_at_95tpr": fpr})
        aurocs.append(auroc)
        fprs.append(fpr)
    ring_block = {
        "ring_radius": int(radius),
        "auroc": float(np.mean(aurocs)) if aurocs else None,
        "fpr_at_95tpr": float(np.mean(fprs)) if fprs else None,
        "n_evaluated": len(aurocs),
        "n_skipped": n_skipped,
        "per_sample": per_sample,
    }
    return {"schema": REPORT_SCHEMA, "ring": ring_block}


# ---------------------------------------------------------------------------
# timing helper (cost-structure sanity checks)

def time_source(source, samples, repeats=3):
    """Median wall-clock seconds for one full prediction pass."""
    timings = []
    for _ in range(repeats):
        start = time.perf_counter()
        for sample in samples:
            source(sample)
        timings.append(time.perf_counter() - start)
    return float(np.median(timings))
