"""Experiment runner: training, identity verification, sweeps, exports.

Exit codes: 0 success, 1 identity-suite failure, 2 usage/config error,
3 training divergence.  Every training run writes a ``manifest.json``
snapshot from which the run can be re-executed bit-identically
(``train --from-manifest``).  Figures are rendered next to each CSV; the
CSV is the canonical output.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__, figures
from .data import Dataset, SyntheticSpec, gen_synthetic, load_idx
from .gaussian import LikelihoodKind, LikelihoodSpec
from .model import (
    TrainConfig,
    TrainingDiverged,
    evaluate_bound,
    load_checkpoint,
    reconstruction_rmse,
    save_checkpoint,
    train,
)
from .objectives import ObjectiveMode, ObjectiveSpec
from .suite import run_suite
from .tensor import Rng, derive_seed, value_of

MANIFEST_SCHEMA = "manifest-v1"
SWEEP_COLUMNS = ("axis", "value", "final_bound", "recon_rmse",
                 "recon_rmse_over_lambda")
SCATTER_COLUMNS = ("mu_1", "mu_2", "sigma2_1", "sigma2_2", "label")

_DEFAULT_GRIDS = {
    "tau": (0.1, 0.2, 0.5, 1.0, 5.0),
    "lambda": (0.5, 1.0, 10.0, 100.0),
    "sigma": (0.1, 1.0, 10.0),
}

_SYNTH_DEFAULTS = {
    # kind: (dim, variances, noise, count)
    "ring": (8, (0.1,), 0.01, 4000),
    "gaussian": (None, (4.0, 0.25), 0.0, 4000),
    "linear": (5, (4.0, 2.0), 1.0, 4000),
}


class UsageError(ValueError):
    pass


def _version_string() -> str:
    return f"bilbo-kit-{__version__}"


def _utc_now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


# ---------------------------------------------------------------------------
# config resolution (argparse -> plain dict; the dict is the manifest config)


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mnist-images", type=str, default=None,
                   help="path to an IDX image file")
    p.add_argument("--mnist-labels", type=str, default=None,
                   help="path to the matching IDX label file")
    p.add_argument("--limit", type=int, default=None,
                   help="truncate the dataset to this many examples")
    p.add_argument("--synthetic", choices=("ring", "gaussian", "linear"),
                   default=None, help="use a synthetic generator instead")
    p.add_argument("--synthetic-count", type=int, default=None)
    p.add_argument("--synthetic-dim", type=int, default=None)
    p.add_argument("--synthetic-variances", type=str, default=None,
                   help="comma-separated intrinsic variances")
    p.add_argument("--synthetic-noise", type=float, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0,
                   help="scale factor applied to the data vectors")


def _add_train_args(p: argparse.ArgumentParser, require_objective: bool) -> None:
    p.add_argument("--objective",
                   choices=[m.value for m in ObjectiveMode],
                   required=require_objective)
    p.add_argument("--sigma", type=float, default=1.0,
                   help="constant posterior variance (diagonal value)")
    p.add_argument("--tau", type=float, default=None,
                   help="information factor for the adaptive likelihood")
    p.add_argument("--latent", type=int, default=2)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--likelihood",
                   choices=("bernoulli", "gaussian", "gaussian-learned"),
                   default=None,
                   help="decoder likelihood (default: bernoulli for "
                        "unscaled image data, gaussian otherwise)")
    p.add_argument("--fixed-var", type=float, default=1.0,
                   help="data-noise variance for the gaussian likelihood")
    p.add_argument("--hidden", type=str, default="200,200,200",
                   help="comma-separated hidden layer widths ('' = linear)")
    p.add_argument("--mc-samples", type=int, default=1)
    p.add_argument("--eval-every", type=int, default=0)
    _add_data_args(p)
    p.add_argument("--out", type=str, default="bilbo-run",
                   help="output directory")


def _parse_floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _resolve_dataset_config(args) -> dict:
    if args.mnist_images and args.synthetic:
        raise UsageError("choose either --mnist-images or --synthetic")
    if args.mnist_images:
        return {"kind": "mnist", "images": args.mnist_images,
                "labels": args.mnist_labels, "limit": args.limit}
    if args.synthetic:
        dim, variances, noise, count = _SYNTH_DEFAULTS[args.synthetic]
        if args.synthetic_variances is not None:
            variances = _parse_floats(args.synthetic_variances)
        n_true = 2 if args.synthetic == "ring" else len(variances)
        if args.synthetic_dim is not None:
            dim = args.synthetic_dim
        if dim is None:
            dim = n_true
        if args.synthetic_noise is not None:
            noise = args.synthetic_noise
        if args.synthetic_count is not None:
            count = args.synthetic_count
        if args.limit is not None:
            count = min(count, args.limit)
        return {"kind": "synthetic", "generator": args.synthetic,
                "n_true": n_true, "dim": dim,
                "variances": list(variances), "noise": noise,
                "count": count, "data_seed": derive_seed(args.seed, 97)}
    raise UsageError("a dataset is required: --mnist-images or --synthetic")


def _resolve_likelihood(args, dataset_cfg: dict) -> str:
    if args.objective == ObjectiveMode.BILBO_BAGGINS.value:
        if args.tau is None:
            raise UsageError("--objective bilbo-baggins requires --tau")
        if args.likelihood is not None:
            raise UsageError("bilbo-baggins fixes the likelihood; "
                             "drop --likelihood")
        return LikelihoodKind.GAUSSIAN_BAGGINS.value
    if args.likelihood is not None:
        return args.likelihood
    if dataset_cfg["kind"] == "mnist" and args.lam == 1.0:
        return LikelihoodKind.BERNOULLI_LOGITS.value
    return LikelihoodKind.GAUSSIAN_FIXED.value


def resolve_train_config(args) -> dict:
    """Collapse parsed args into the manifest's config snapshot."""
    dataset_cfg = _resolve_dataset_config(args)
    likelihood = _resolve_likelihood(args, dataset_cfg)
    if likelihood == LikelihoodKind.BERNOULLI_LOGITS.value and args.lam != 1.0:
        raise UsageError("bernoulli likelihood needs unscaled data "
                         "(drop --lambda or use a gaussian likelihood)")
    hidden = tuple(int(v) for v in args.hidden.split(",") if v.strip())
    return {
        "objective": args.objective,
        "sigma": args.sigma,
        "tau": args.tau,
        "lambda": args.lam,
        "latent": args.latent,
        "epochs": args.epochs,
        "batch": args.batch,
        "lr": args.lr,
        "seed": args.seed,
        "likelihood": likelihood,
        "fixed_var": args.fixed_var,
        "hidden": list(hidden),
        "mc_samples": args.mc_samples,
        "eval_every": args.eval_every,
        "dataset": dataset_cfg,
    }


def build_dataset(config: dict) -> Dataset:
    dcfg = config["dataset"]
    lam = config["lambda"]
    if dcfg["kind"] == "mnist":
        return load_idx(dcfg["images"], dcfg.get("labels"),
                        limit=dcfg.get("limit"), lam=lam)
    spec = SyntheticSpec(kind=dcfg["generator"], n_true=dcfg["n_true"],
                         data_dim=dcfg["dim"],
                         variances=tuple(dcfg["variances"]),
                         noise_std=dcfg["noise"], count=dcfg["count"],
                         seed=dcfg["data_seed"])
    ds = gen_synthetic(spec)
    return ds.scaled(lam) if lam != 1.0 else ds


def build_objective(config: dict) -> ObjectiveSpec:
    kind = LikelihoodKind(config["likelihood"])
    if kind == LikelihoodKind.GAUSSIAN_FIXED:
        lik = LikelihoodSpec(kind, fixed_var=config["fixed_var"])
    elif kind == LikelihoodKind.GAUSSIAN_BAGGINS:
        lik = LikelihoodSpec(kind, tau=config["tau"])
    else:
        lik = LikelihoodSpec(kind)
    mode = ObjectiveMode(config["objective"])
    sigma = None if mode == ObjectiveMode.ELBO_LEARNED \
        else np.full(config["latent"], config["sigma"])
    return ObjectiveSpec(mode=mode, likelihood=lik, sigma_const=sigma,
                         mc_samples=config["mc_samples"])


def build_train_config(config: dict) -> TrainConfig:
    return TrainConfig(objective=build_objective(config),
                       epochs=config["epochs"],
                       latent_dim=config["latent"],
                       hidden=tuple(config["hidden"]),
                       learning_rate=config["lr"],
                       batch_size=config["batch"],
                       seed=config["seed"],
                       eval_every=config["eval_every"])


# ---------------------------------------------------------------------------
# train


def run_training(config: dict, outdir: str) -> dict:
    os.makedirs(outdir, exist_ok=True)
    started = _utc_now()
    dataset = build_dataset(config)
    tc = build_train_config(config)
    model, log = train(dataset, tc)
    final_bound = evaluate_bound(model, dataset, tc.objective,
                                 mc_samples=max(tc.objective.mc_samples, 8),
                                 rng=Rng(derive_seed(config["seed"], 3)))
    log.write_csv(os.path.join(outdir, "metrics.csv"))
    save_checkpoint(model, os.path.join(outdir, "checkpoint.bvae"))
    figures.render_metrics(log, os.path.join(outdir, "metrics.png"))
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "command": "train",
        "version": _version_string(),
        "started_utc": started,
        "finished_utc": _utc_now(),
        "output_dir": os.path.abspath(outdir),
        "config": config,
        "outputs": ["metrics.csv", "checkpoint.bvae", "metrics.png",
                    "manifest.json"],
        "final_bound": final_bound,
        "events": dict(log.events),
    }
    with open(os.path.join(outdir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest


def cmd_train(args) -> int:
    if args.from_manifest:
        with open(args.from_manifest) as f:
            config = json.load(f)["config"]
    else:
        config = resolve_train_config(args)
    try:
        manifest = run_training(config, args.out)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        print(json.dumps(exc.diagnostics, default=str, indent=2),
              file=sys.stderr)
        return 3
    print(f"final bound per example: {manifest['final_bound']:.4f}")
    print(f"wrote {args.out}/metrics.csv, checkpoint.bvae, metrics.png")
    return 0


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    results = run_suite(only=args.only, dim=args.dim,
                        perturb_jacobian=args.perturb_jacobian,
                        seed=args.seed)
    width = max(len(r.name) for r in results)
    failures = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failures += 0 if r.passed else 1
        print(f"{r.name:<{width}}  {status}  measured={r.measured:.3e}  "
              f"tol={r.tolerance:.1e}  {r.detail}")
    if args.out:
        with open(args.out, "w") as f:
            json.dump({"results": [r.to_dict() for r in results],
                       "version": _version_string()}, f, indent=2)
    if failures:
        print(f"{failures} identity check(s) failed", file=sys.stderr)
        return 1
    print(f"all {len(results)} identity checks passed")
    return 0


# ---------------------------------------------------------------------------
# sweep


def _sweep_point(payload: dict) -> dict:
    config = payload["config"]
    axis, value = payload["axis"], payload["value"]
    dataset = build_dataset(config)
    tc = build_train_config(config)
    model, _log = train(dataset, tc)
    # same evaluation stream as run_training: a one-point sweep reproduces
    # the train command exactly
    bound = evaluate_bound(model, dataset, tc.objective,
                           mc_samples=max(tc.objective.mc_samples, 8),
                           rng=Rng(derive_seed(config["seed"], 3)))
    rmse = reconstruction_rmse(model, dataset)
    return {"axis": axis, "value": value, "final_bound": bound,
            "recon_rmse": rmse,
            "recon_rmse_over_lambda": rmse / config["lambda"]}


def cmd_sweep(args) -> int:
    grid = _parse_floats(args.grid) if args.grid else _DEFAULT_GRIDS[args.axis]
    base = resolve_train_config(args)
    if args.axis == "tau" and base["likelihood"] != \
            LikelihoodKind.GAUSSIAN_BAGGINS.value:
        raise UsageError("a tau sweep needs --objective bilbo-baggins")
    payloads = []
    for i, value in enumerate(grid):
        config = json.loads(json.dumps(base))  # deep copy
        if args.axis == "tau":
            config["tau"] = value
        elif args.axis == "sigma":
            config["sigma"] = value
        else:
            config["lambda"] = value
            if config["likelihood"] == LikelihoodKind.BERNOULLI_LOGITS.value \
                    and value != 1.0:
                raise UsageError("lambda sweeps need a gaussian likelihood")
        payloads.append({"config": config, "axis": args.axis,
                         "value": value, "index": i})

    workers = max(1, args.workers)
    cap = os.environ.get("BILBO_KIT_THREADS")
    if cap:
        workers = min(workers, max(1, int(cap)))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_point, payloads))
    else:
        rows = [_sweep_point(p) for p in payloads]

    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "sweep.csv")
    with open(csv_path, "w") as f:
        f.write("# bilbo-kit sweep-v1\n")
        f.write(",".join(SWEEP_COLUMNS) + "\n")
        for row in rows:
            f.write(f"{row['axis']},{row['value']:.17g},"
                    f"{row['final_bound']:.17g},{row['recon_rmse']:.17g},"
                    f"{row['recon_rmse_over_lambda']:.17g}\n")
    figures.render_sweep(
        args.axis, [r["value"] for r in rows],
        [r["final_bound"] for r in rows],
        os.path.join(args.out, "sweep.png"),
        extra=[r["recon_rmse_over_lambda"] for r in rows],
        extra_label="recon rmse / lambda")
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "command": "sweep",
        "version": _version_string(),
        "finished_utc": _utc_now(),
        "output_dir": os.path.abspath(args.out),
        "config": {"base": base, "axis": args.axis, "grid": list(grid),
                   "workers": workers},
        "outputs": ["sweep.csv", "sweep.png", "manifest.json"],
    }
    with open(os.path.join(args.out, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    print(f"wrote {csv_path} ({len(rows)} grid points)")
    return 0


# ---------------------------------------------------------------------------
# export-scatter


def cmd_export_scatter(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if model.latent_dim != 2:
        raise UsageError("the 2-D scatter export needs a latent dim of 2, "
                         f"checkpoint has {model.latent_dim}")
    config = {"dataset": _resolve_dataset_config(args), "lambda": args.lam}
    dataset = build_dataset(config)
    mu, std = model.encode(dataset.xs)
    mu = value_of(mu)
    if std is not None:
        sigma2 = np.maximum(value_of(std) ** 2, 1e-10)
    else:
        sigma2 = np.full_like(mu, args.sigma)
    labels = dataset.labels if dataset.labels is not None \
        else np.full(mu.shape[0], -1)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "scatter.csv")
    with open(csv_path, "w") as f:
        f.write("# bilbo-kit scatter-v1\n")
        f.write(",".join(SCATTER_COLUMNS) + "\n")
        for i in range(mu.shape[0]):
            f.write(f"{mu[i, 0]:.17g},{mu[i, 1]:.17g},"
                    f"{sigma2[i, 0]:.17g},{sigma2[i, 1]:.17g},"
                    f"{labels[i]}\n")
    figures.render_scatter(mu, sigma2, labels,
                           os.path.join(args.out, "scatter.png"))
    print(f"wrote {csv_path} ({mu.shape[0]} rows)")
    return 0


# ---------------------------------------------------------------------------
# entry


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bilbo-kit",
        description="constant-variance VAE objectives, theory oracle, and "
                    "experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one model")
    _add_train_args(p_train, require_objective=False)
    p_train.add_argument("--from-manifest", type=str, default=None,
                         help="re-execute a previous run's manifest")
    p_train.set_defaults(fn=cmd_train)

    p_verify = sub.add_parser("verify", help="run the identity suite")
    p_verify.add_argument("--only", type=str, default=None,
                          help="run a single named check")
    p_verify.add_argument("--dim", type=int, default=None,
                          help="matrix size cap for the trace-log check")
    p_verify.add_argument("--perturb-jacobian", type=float, default=0.0,
                          help="inject a relative Jacobian error "
                               "(negative control)")
    p_verify.add_argument("--seed", type=int, default=2026)
    p_verify.add_argument("--out", type=str, default=None,
                          help="write the results as JSON")
    p_verify.set_defaults(fn=cmd_verify)

    p_sweep = sub.add_parser("sweep", help="train across a parameter grid")
    p_sweep.add_argument("--axis", choices=("tau", "lambda", "sigma"),
                         required=True)
    p_sweep.add_argument("--grid", type=str, default=None,
                         help="comma-separated grid values")
    p_sweep.add_argument("--workers", type=int, default=1)
    _add_train_args(p_sweep, require_objective=True)
    p_sweep.set_defaults(fn=cmd_sweep)

    p_scatter = sub.add_parser("export-scatter",
                               help="latent scatter data for a checkpoint")
    p_scatter.add_argument("--checkpoint", type=str, required=True)
    p_scatter.add_argument("--sigma", type=float, default=1.0)
    p_scatter.add_argument("--seed", type=int, default=0,
                           help="synthetic dataset seed (match the run)")
    _add_data_args(p_scatter)
    p_scatter.add_argument("--out", type=str, default="bilbo-scatter")
    p_scatter.set_defaults(fn=cmd_export_scatter)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "train" and not args.from_manifest \
            and args.objective is None:
        parser.error("train requires --objective (or --from-manifest)")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
