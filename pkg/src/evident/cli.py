"""Command-line entry point: simulate / train / eval / gradcheck / ringcheck.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 training
divergence, 5 model/data incompatibility, 6 gradient-check failure.
Machine-readable outputs are JSON/CSV only; stdout carries a plain summary.
"""

import argparse
import json
import sys
from pathlib import Path

from . import workflows
from .datagen import HARD_SHAPES, NoiseProfile, SceneConfig
from .dataio import load_dataset
from .exceptions import (
    DegenerateGeometryError,
    DegenerateVarianceError,
    EvidentError,
    FormatError,
    InvalidInputError,
    TrainingError,
    UnsupportedLikelihoodError,
    UsageError,
)
from .predictor import BaselineConfig, load_checkpoint

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4
EXIT_INCOMPATIBLE = 5
EXIT_GRADCHECK = 6

_INCOMPAT = (UsageError, DegenerateVarianceError, UnsupportedLikelihoodError,
             DegenerateGeometryError)


def _echo_config(path, args):
    payload = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    payload["command"] = args.command
    workflows.write_json(path, payload)


def _add_config_flag(parser):
    parser.add_argument(
        "--config", default=None,
        help="JSON file of flag defaults (an echoed config); explicit flags "
             "override it")


def _apply_config_file(parser, argv):
    """Load an echoed config as subcommand defaults; explicit flags win."""
    if not argv or argv[0] not in parser.subcommands:
        return
    sub = parser.subcommands[argv[0]]
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", default=None)
    known, _ = probe.parse_known_args(argv[1:])
    if known.config:
        try:
            with open(known.config) as fh:
                loaded = json.load(fh)
        except OSError as exc:
            parser.error(f"cannot read config {known.config}: {exc}")
        except json.JSONDecodeError as exc:
            parser.error(f"config {known.config} is not valid JSON: {exc}")
        loaded.pop("command", None)
        loaded.pop("config", None)
        valid = {a.dest for a in sub._actions}
        sub.set_defaults(**{k: v for k, v in loaded.items() if k in valid})
        for action in sub._actions:
            if action.required and action.dest in loaded:
                action.required = False


# ---------------------------------------------------------------------------
# simulate

def cmd_simulate(args):
    try:
        scene = SceneConfig(
            height=args.height, width=args.width, n_planes=args.n_planes,
            noise=NoiseProfile(
                base_sigma=args.base_sigma,
                hard_region_sigma=args.hard_sigma,
                hard_region_fraction=args.hard_fraction),
            feature_dim=args.feature_dim, seed=args.seed,
            hard_region_shape=args.hard_shape)
        if min(args.n_train, args.n_val, args.n_test) < 0:
            raise InvalidInputError("split sizes must be nonnegative")
    except (InvalidInputError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        counts = workflows.simulate_run(
            out_dir, args.n_train, args.n_val, args.n_test, scene, args.seed)
        _echo_config(out_dir / "config.json", args)
    except OSError as exc:
        print(f"error: cannot write dataset to {args.out}: {exc}",
              file=sys.stderr)
        return EXIT_IO
    for split, n in counts.items():
        print(f"{split}: {n} samples")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

def cmd_train(args):
    try:
        out_path = Path(args.out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        _, history = workflows.train_run(
            args.data, args.head, args.epochs, args.lr, args.weight_decay,
            args.lambda_evi, args.lambda_uq, args.tv_weight, args.dropout,
            args.batch_size, args.width, args.seed, out_path)
        _echo_config(out_path.with_suffix(".config.json"), args)
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (InvalidInputError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"trained {args.head} head for {len(history)} epochs; "
          f"final loss {history[-1]['loss']:.6f}")
    print(f"checkpoint: {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval

def _build_source(args, val_samples):
    if args.baseline is None:
        if args.model is None:
            raise UsageError("--model or --baseline is required")
        model = load_checkpoint(args.model)
        return workflows.make_model_source(model, args.readout), {
            "method": "model", "head_kind": model.spec.head_kind}

    if args.readout not in ("total",):
        raise UsageError(
            f"baseline {args.baseline} supports only the 'total' readout")
    if args.baseline == "mcdropout":
        if args.model is None:
            raise UsageError("--baseline mcdropout needs --model")
        BaselineConfig(mode="mcdropout", t_passes=args.t_passes)
        model = load_checkpoint(args.model)
        sigma0 = _resolve_sigma0(
            args, val_samples,
            lambda s0: workflows.make_mcdropout_source(
                model, args.t_passes, s0, seed=args.seed))
        return workflows.make_mcdropout_source(
            model, args.t_passes, sigma0, seed=args.seed), {
            "method": "mcdropout", "t_passes": args.t_passes,
            "sigma0_sq": sigma0}
    if args.baseline == "ensemble":
        if not args.members:
            raise UsageError("--baseline ensemble needs --members")
        if args.k_members is not None and args.k_members != len(args.members):
            raise UsageError(
                f"--K {args.k_members} disagrees with {len(args.members)} "
                "member checkpoints")
        BaselineConfig(mode="ensemble", k_members=len(args.members))
        members = [load_checkpoint(p) for p in args.members]
        sigma0 = _resolve_sigma0(
            args, val_samples,
            lambda s0: workflows.make_ensemble_source(members, s0))
        return workflows.make_ensemble_source(members, sigma0), {
            "method": "ensemble", "k_members": len(members),
            "sigma0_sq": sigma0}
    raise UsageError(f"unknown baseline {args.baseline!r}")


def _resolve_sigma0(args, val_samples, factory):
    if args.sigma0 == "auto":
        if not val_samples:
            raise UsageError("sigma0 grid search needs a validation split")
        return workflows.select_sigma0(factory, val_samples)
    try:
        return float(args.sigma0)
    except ValueError:
        raise UsageError(f"--sigma0 must be 'auto' or a number, got "
                         f"{args.sigma0!r}") from None


def cmd_eval(args):
    try:
        test_samples = load_dataset(Path(args.data) / "test")
        val_dir = Path(args.data) / "val"
        val_samples = load_dataset(val_dir) if val_dir.is_dir() else []
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        source, method_info = _build_source(args, val_samples)
        if args.readout == "conf":
            print("warning: confidence readout defines no likelihood; "
                  "NLL omitted", file=sys.stderr)
        report, curves = workflows.evaluate_source(
            source, test_samples, align=(args.align == "sim3"),
            grid_size=args.grid_size, pc_threshold=args.pc_threshold)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except _INCOMPAT as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    report["config"] = dict(method_info, readout=args.readout,
                            align=args.align, grid_size=args.grid_size,
                            pc_threshold=args.pc_threshold)
    try:
        report_path = Path(args.report)
        report_path.parent.mkdir(parents=True, exist_ok=True)
        workflows.write_json(report_path, report)
        _echo_config(report_path.with_suffix(".config.json"), args)
        if args.curves:
            workflows.write_curve_files(args.curves, curves)
    except OSError as exc:
        print(f"error: cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_IO
    ds = report["dataset"]
    print(f"{'metric':<14}{'value':>12}")
    for key in ("mae", "rmse", "aurc", "ause", "spearman_rho", "nll"):
        val = ds[key]
        shown = "n/a" if val is None else f"{val:.6f}"
        print(f"{key:<14}{shown:>12}")
    print(f"{'images':<14}{ds['n_images']:>12}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck

def cmd_gradcheck(args):
    try:
        if args.replay:
            with open(args.replay) as fh:
                draw = json.load(fh)
            max_rel = workflows.gradcheck_replay(draw)
            print(f"replayed draw: max rel err {max_rel:.3e} "
                  f"(tol {args.tol:g})")
            return EXIT_OK if max_rel <= args.tol else EXIT_GRADCHECK
        result = workflows.gradcheck_run(
            args.head, trials=args.trials, fd_step=args.eps, tol=args.tol,
            seed=args.seed)
    except (InvalidInputError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"gradcheck head={result['head']} trials={result['trials']} "
          f"fd_step={result['fd_step']:g} tol={result['tol']:g}")
    for group, err in sorted(result["group_max_rel_err"].items()):
        print(f"  {group:<12} max rel err {err:.3e}")
    if result["passed"]:
        print("PASS")
        return EXIT_OK
    out = Path(args.replay_out)
    try:
        workflows.write_json(out, result["worst_draw"])
    except OSError as exc:
        print(f"error: cannot write replay file: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"FAIL: max rel err {result['max_rel_err']:.3e} > tol "
          f"{result['tol']:g}; worst draw serialized to {out}")
    return EXIT_GRADCHECK


# ---------------------------------------------------------------------------
# ringcheck

def cmd_ringcheck(args):
    if args.radius < 1:
        print(f"error: --radius must be >= 1, got {args.radius}",
              file=sys.stderr)
        return EXIT_CONFIG
    try:
        samples = load_dataset(Path(args.data) / "test")
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        model = load_checkpoint(args.model)
        source = workflows.make_model_source(model, args.readout)
        report = workflows.ringcheck_run(samples, source, radius=args.radius)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except _INCOMPAT as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    report["config"] = {"readout": args.readout, "radius": args.radius}
    try:
        report_path = Path(args.report)
        report_path.parent.mkdir(parents=True, exist_ok=True)
        workflows.write_json(report_path, report)
        _echo_config(report_path.with_suffix(".config.json"), args)
    except OSError as exc:
        print(f"error: cannot write report: {exc}", file=sys.stderr)
        return EXIT_IO
    ring = report["ring"]
    auroc = "n/a" if ring["auroc"] is None else f"{ring['auroc']:.4f}"
    fpr = ("n/a" if ring["fpr_at_95tpr"] is None
           else f"{ring['fpr_at_95tpr']:.4f}")
    print(f"ring radius {ring['ring_radius']}: mean AUROC {auroc}, "
          f"mean FPR@95%TPR {fpr} over {ring['n_evaluated']} samples "
          f"({ring['n_skipped']} skipped)")
    return EXIT_OK


# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    subcommands = {}


def build_parser():
    parser = _Parser(
        prog="evident",
        description="Evidential uncertainty toolkit for dense pointmaps")
    parser.subcommands = {}
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate synthetic datasets")
    _add_config_flag(p)
    p.add_argument("--n-train", type=int, default=8)
    p.add_argument("--n-val", type=int, default=2)
    p.add_argument("--n-test", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--n-planes", type=int, default=5)
    p.add_argument("--base-sigma", type=float, default=0.02)
    p.add_argument("--hard-sigma", type=float, default=0.10)
    p.add_argument("--hard-fraction", type=float, default=0.2)
    p.add_argument("--hard-shape", choices=HARD_SHAPES, default="blob")
    p.add_argument("--feature-dim", type=int, default=8)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train an uncertainty head")
    _add_config_flag(p)
    p.add_argument("--data", required=True)
    p.add_argument("--head", choices=("niw", "nig", "hetero"), default="niw")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--lambda-evi", type=float, default=1e-3)
    p.add_argument("--lambda-uq", type=float, default=0.05)
    p.add_argument("--tv-weight", type=float, default=0.0)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model or baseline")
    _add_config_flag(p)
    p.add_argument("--model", default=None)
    p.add_argument("--baseline", choices=("mcdropout", "ensemble"),
                   default=None)
    p.add_argument("--T", dest="t_passes", type=int, default=16)
    p.add_argument("--K", dest="k_members", type=int, default=None)
    p.add_argument("--members", nargs="+", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--align", choices=("sim3", "none"), default="sim3")
    p.add_argument("--readout", choices=("alea", "epi", "total", "conf"),
                   default="epi")
    p.add_argument("--sigma0", default="auto")
    p.add_argument("--grid-size", type=int, default=100)
    p.add_argument("--pc-threshold", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True)
    p.add_argument("--curves", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="verify analytic gradients")
    _add_config_flag(p)
    p.add_argument("--head", choices=("niw", "nig", "hetero"), default="niw")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--eps", type=float, default=1e-5,
                   help="central-difference step")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--replay-out", default="gradcheck_failure.json")
    p.add_argument("--replay", default=None,
                   help="re-run a serialized failure draw")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ringcheck", help="ring-band reliability scoring")
    _add_config_flag(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--radius", type=int, default=3)
    p.add_argument("--readout", choices=("alea", "epi", "total"),
                   default="epi")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_ringcheck)

    parser.subcommands = dict(sub.choices)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    _apply_config_file(parser, argv)
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except EvidentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
