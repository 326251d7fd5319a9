"""Command-line interface.

Subcommands cover the whole pipeline at desk scale: ``synth`` writes an
oracle dataset, ``tensorize`` builds one from CSVs, ``train`` fits a single
model, ``ensemble`` runs the prior-sampled sweep, ``eval`` reports metrics,
and ``gradcheck`` verifies analytic gradients against finite differences.

Every flag has a default and may also be supplied through an optional
``key = value`` config file (``--config``); explicit flags win. Exit codes:
0 success, 2 configuration or format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import data as data_mod
from . import ensemble as ens_mod
from . import evaluate as eval_mod
from . import model as model_mod
from . import ndiff, synthgen
from .containers import ENSEMBLE_TAG, MODEL_TAG, sniff_tag
from .errors import ConfigError, NumericalError


def _parse_fractions(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("fractions must be three comma-separated numbers")
    return tuple(parts)  # type: ignore[return-value]


def _parse_name_list(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


def _parse_int_list(text: str) -> list[int]:
    return [int(p) for p in text.split(",") if p.strip()]

def _parse_float_list(text: str) -> list[float]:
    return [float(p) for p in text.split(",") if p.strip()]


def _parse_clip(text: str):
    if text.lower() in ("none", "off"):
        return None
    return float(text)


class _Command:
    """One subcommand: its parser plus a registry for config-file merging."""

    def __init__(self, sub, name: str, help_text: str):
        self.parser = sub.add_parser(name, help=help_text)
        self.parser.add_argument("--config", default=None,
                                 help="key = value file; explicit flags win")
        self.registry: dict[str, tuple] = {}

    def add(self, flag: str, *, type, default, help: str, choices=None,
            required: bool = False):
        dest = flag.lstrip("-").replace("-", "_")
        self.parser.add_argument(flag, dest=dest, type=type, choices=choices,
                                 default=argparse.SUPPRESS, help=help)
        self.registry[dest] = (type, default, required)

    def resolve(self, args: argparse.Namespace) -> dict:
        provided = vars(args)
        config: dict[str, str] = {}
        if provided.get("config"):
            config = _read_config_file(provided["config"])
            unknown = set(config) - set(self.registry)
            if unknown:
                raise ConfigError(
                    f"unknown config keys: {', '.join(sorted(unknown))}")
        merged = {}
        for dest, (conv, default, required) in self.registry.items():
            if dest in provided:
                merged[dest] = provided[dest]
            elif dest in config:
                try:
                    merged[dest] = conv(config[dest])
                except (ValueError, argparse.ArgumentTypeError) as exc:
                    raise ConfigError(f"config key {dest}: {exc}") from exc
            else:
                merged[dest] = default
            if required and merged[dest] is None:
                raise ConfigError(f"missing required flag --{dest.replace('_', '-')}")
        return merged


def _read_config_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key = value")
                key, value = line.split("=", 1)
                out[key.strip().replace("-", "_")] = value.strip()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return out


def build_parser():
    parser = argparse.ArgumentParser(
        prog="trajcast",
        description="Generative recurrent classification of sparse trajectories")
    sub = parser.add_subparsers(dest="command", required=True)
    commands: dict[str, _Command] = {}

    c = _Command(sub, "synth", "simulate an oracle dataset")
    c.add("--out", type=str, default=None, help="dataset output path", required=True)
    c.add("--gt-out", type=str, default=None, help="ground-truth sidecar path")
    c.add("--n", type=int, default=2000, help="patients")
    c.add("--m", type=int, default=10, help="features")
    c.add("--t", type=int, default=20, help="time bins")
    c.add("--k", type=int, default=5, help="covariates")
    c.add("--d", type=int, default=4, help="true latent dimension")
    c.add("--sigma", type=float, default=0.3, help="observation noise sd")
    c.add("--init-var", type=float, default=0.25, help="initial latent noise variance")
    c.add("--trans-var", type=float, default=0.01, help="transition noise variance")
    c.add("--p-obs", type=float, default=0.10, help="per-cell observation probability")
    c.add("--missingness", type=str, default="mcar", choices=("mcar", "informative"),
          help="mask mechanism")
    c.add("--slope", type=float, default=1.0, help="informative missingness slope")
    c.add("--gain", type=float, default=3.0, help="label read-out gain")
    c.add("--seed", type=int, default=0, help="master seed")
    c.add("--fractions", type=_parse_fractions, default=(0.7, 0.15, 0.15),
          help="train,val,test fractions baked into the dataset")
    c.add("--split-seed", type=int, default=None, help="split seed (default: --seed)")
    commands["synth"] = c

    c = _Command(sub, "tensorize", "build a dataset from long-format CSVs")
    c.add("--records", type=str, default=None, help="records CSV", required=True)
    c.add("--covariates", type=str, default=None, help="covariates CSV", required=True)
    c.add("--labels", type=str, default=None, help="labels CSV", required=True)
    c.add("--out", type=str, default=None, help="dataset output path", required=True)
    c.add("--bin-width", type=float, default=1.0, help="bin width in hours")
    c.add("--horizon", type=int, default=48, help="number of bins")
    c.add("--sum-features", type=_parse_name_list, default=[],
          help="comma-separated features aggregated by sum instead of mean")
    c.add("--fractions", type=_parse_fractions, default=(0.7, 0.15, 0.15),
          help="train,val,test fractions")
    c.add("--split-seed", type=int, default=0, help="split seed")
    commands["tensorize"] = c

    c = _Command(sub, "train", "train a single model")
    c.add("--data", type=str, default=None, help="dataset container", required=True)
    c.add("--out", type=str, default=None, help="model output path", required=True)
    c.add("--arch", type=str, default="generative",
          choices=model_mod.ARCHITECTURES, help="architecture")
    c.add("--gamma", type=float, default=0.05, help="reconstruction weight")
    c.add("--lambda", type=float, default=1e-3, help="L2 penalty")
    c.add("--latent-dim", type=int, default=32, help="latent dimension")
    c.add("--lr", type=float, default=1e-3, help="learning rate")
    c.add("--epochs", type=int, default=40, help="training epochs")
    c.add("--batch-size", type=int, default=64, help="mini-batch size")
    c.add("--clip", type=_parse_clip, default=5.0,
          help="global gradient-norm clip, or 'none'")
    c.add("--seed", type=int, default=0, help="training seed")
    commands["train"] = c

    c = _Command(sub, "ensemble", "train many models and keep the best")
    c.add("--data", type=str, default=None, help="dataset container", required=True)
    c.add("--out", type=str, default=None, help="ensemble output path", required=True)
    c.add("--report-out", type=str, default=None, help="selection report CSV")
    c.add("--curve-out", type=str, default=None, help="ensemble-size curve CSV")
    c.add("--ks", type=_parse_int_list, default=None,
          help="comma-separated k values for the curve (default: all)")
    c.add("--n-models", type=int, default=200, help="models to train")
    c.add("--top-k", type=int, default=20, help="models to keep")
    c.add("--workers", type=int, default=1, help="parallel training processes")
    c.add("--master-seed", type=int, default=0, help="master seed")
    c.add("--gamma-low", type=float, default=0.0, help="gamma prior lower bound")
    c.add("--gamma-high", type=float, default=0.1, help="gamma prior upper bound")
    c.add("--log-lambda-low", type=float, default=-8.0, help="log-lambda lower bound")
    c.add("--log-lambda-high", type=float, default=-2.0, help="log-lambda upper bound")
    c.add("--log-base", type=str, default="e", choices=("e", "10"),
          help="base of the lambda prior's log")
    c.add("--latent-dim", type=int, default=32, help="member latent dimension")
    c.add("--lr", type=float, default=1e-3, help="member learning rate")
    c.add("--epochs", type=int, default=40, help="member epochs")
    c.add("--batch-size", type=int, default=64, help="member batch size")
    c.add("--clip", type=_parse_clip, default=5.0, help="member gradient clip")
    commands["ensemble"] = c

    c = _Command(sub, "eval", "evaluate a model or ensemble on a dataset")
    c.add("--model", type=str, default=None,
          help="model or ensemble container", required=True)
    c.add("--data", type=str, default=None, help="dataset container", required=True)
    c.add("--roc-out", type=str, default=None, help="ROC points CSV")
    c.add("--metrics-out", type=str, default=None, help="metrics CSV")
    commands["eval"] = c

    c = _Command(sub, "gradcheck", "analytic vs finite-difference gradients")
    c.add("--d", type=int, default=4, help="model latent dimension")
    c.add("--m", type=int, default=3, help="features")
    c.add("--t", type=int, default=5, help="time bins")
    c.add("--n", type=int, default=8, help="patients")
    c.add("--k", type=int, default=2, help="covariates")
    c.add("--gammas", type=_parse_float_list, default=[0.0, 0.05, 1.0],
          help="gamma values to check")
    c.add("--lambda", type=float, default=1e-3, help="L2 penalty")
    c.add("--eps", type=float, default=1e-5, help="finite-difference step")
    c.add("--p-obs", type=float, default=0.5, help="fixture observation rate")
    c.add("--arch", type=str, default="both",
          choices=("both",) + model_mod.ARCHITECTURES, help="architectures to check")
    c.add("--seed", type=int, default=0, help="fixture seed")
    commands["gradcheck"] = c

    return parser, commands


def cmd_synth(opts: dict) -> int:
    cfg = synthgen.SynthConfig(
        n_patients=opts["n"], n_features=opts["m"], n_bins=opts["t"],
        n_covariates=opts["k"], latent_dim=opts["d"],
        obs_noise_sd=opts["sigma"], init_noise_var=opts["init_var"],
        trans_noise_var=opts["trans_var"], p_obs=opts["p_obs"],
        missingness=opts["missingness"], informative_slope=opts["slope"],
        classifier_gain=opts["gain"], seed=opts["seed"])
    ds, gt = synthgen.sample_dataset(cfg)
    split_seed = opts["split_seed"] if opts["split_seed"] is not None else opts["seed"]
    ds = data_mod.split(ds, opts["fractions"], split_seed)
    ds.save(opts["out"])
    if opts["gt_out"]:
        gt.save(opts["gt_out"])
    print(f"wrote {opts['out']}: N={ds.n_patients} M={ds.n_features} "
          f"T={ds.n_bins} fill_rate={data_mod.fill_rate(ds):.4f} "
          f"positive_rate={ds.labels.mean():.4f}")
    return 0


def cmd_tensorize(opts: dict) -> int:
    records, covariates, labels = data_mod.ingest_long_csv(
        opts["records"], opts["covariates"], opts["labels"])
    spec = data_mod.BinningSpec(
        bin_width=opts["bin_width"], horizon_bins=opts["horizon"],
        aggregators={f: "sum" for f in opts["sum_features"]})
    ds = data_mod.tensorize(records, covariates, labels, spec)
    ds = data_mod.split(ds, opts["fractions"], opts["split_seed"])
    ds.save(opts["out"])
    print(f"wrote {opts['out']}: N={ds.n_patients} M={ds.n_features} "
          f"T={ds.n_bins} fill_rate={data_mod.fill_rate(ds):.4f} "
          f"dropped={ds.dropped_records}")
    return 0


def cmd_train(opts: dict) -> int:
    ds = data_mod.TensorDataset.load(opts["data"])
    if ds.split is None:
        raise ConfigError(f"{opts['data']} has no split assignment")
    hp = model_mod.HyperParams(
        gamma=opts["gamma"], lam=opts["lambda"], latent_dim=opts["latent_dim"],
        learning_rate=opts["lr"], epochs=opts["epochs"],
        batch_size=opts["batch_size"], grad_clip_norm=opts["clip"],
        seed=opts["seed"])
    trained = model_mod.train(ds, hp, opts["arch"])
    trained.save(opts["out"])
    print(f"trained {opts['arch']} model: val_auc={trained.val_auc:.4f} "
          f"final_loss={trained.loss_trace[-1]:.6f}")
    return 0


def cmd_ensemble(opts: dict) -> int:
    ds = data_mod.TensorDataset.load(opts["data"])
    if ds.split is None:
        raise ConfigError(f"{opts['data']} has no split assignment")
    template = model_mod.HyperParams(
        latent_dim=opts["latent_dim"], learning_rate=opts["lr"],
        epochs=opts["epochs"], batch_size=opts["batch_size"],
        grad_clip_norm=opts["clip"])
    spec = ens_mod.EnsembleSpec(
        n_models=opts["n_models"], top_k=opts["top_k"],
        gamma_low=opts["gamma_low"], gamma_high=opts["gamma_high"],
        log_lambda_low=opts["log_lambda_low"],
        log_lambda_high=opts["log_lambda_high"], log_base=opts["log_base"],
        template=template, master_seed=opts["master_seed"])
    em = ens_mod.run_ensemble(ds, spec, workers=opts["workers"])
    em.save(opts["out"])
    if opts["report_out"]:
        with open(opts["report_out"], "w", encoding="utf-8", newline="\n") as fh:
            fh.write(ens_mod.report_csv(em))
    if opts["curve_out"]:
        ks = opts["ks"] or list(range(1, len(em.pool) + 1))
        points = ens_mod.ensemble_curve(em.pool, ds, ks)
        with open(opts["curve_out"], "w", encoding="utf-8", newline="\n") as fh:
            fh.write(ens_mod.curve_csv(points))
    aucs = [r.val_auc for r in em.report if r.status == "ok"]
    print(f"selected {len(em.members)}/{spec.n_models} models: "
          f"best_val_auc={max(aucs):.4f} mean_val_auc={np.mean(aucs):.4f}")
    return 0


def cmd_eval(opts: dict) -> int:
    tag = sniff_tag(opts["model"])
    if tag == MODEL_TAG:
        scorer = model_mod.TrainedModel.load(opts["model"])
    elif tag == ENSEMBLE_TAG:
        scorer = ens_mod.EnsembleModel.load(opts["model"])
    else:
        raise ConfigError(
            f"{opts['model']}: expected a model or ensemble container, found {tag!r}")
    ds = data_mod.TensorDataset.load(opts["data"])
    metrics, curve = eval_mod.report(scorer, ds)
    if opts["roc_out"]:
        with open(opts["roc_out"], "w", encoding="utf-8", newline="\n") as fh:
            fh.write(curve.to_csv())
    if opts["metrics_out"]:
        with open(opts["metrics_out"], "w", encoding="utf-8", newline="\n") as fh:
            fh.write(metrics.to_csv())
    print(f"test_auc={metrics.get('test_auc'):.4f} "
          f"val_auc={metrics.get('val_auc'):.4f}")
    return 0


def cmd_gradcheck(opts: dict) -> int:
    cfg = synthgen.SynthConfig(
        n_patients=opts["n"], n_features=opts["m"], n_bins=opts["t"],
        n_covariates=opts["k"], latent_dim=max(2, opts["d"] // 2),
        p_obs=opts["p_obs"], seed=opts["seed"])
    ds, _ = synthgen.sample_dataset(cfg)
    values, mask = ds.dense_values_mask()
    archs = (model_mod.ARCHITECTURES if opts["arch"] == "both"
             else (opts["arch"],))
    rng = np.random.default_rng(opts["seed"])
    worst = 0.0
    for arch in archs:
        store = model_mod.init_params(ds.n_covariates, ds.n_features,
                                      opts["d"], arch, rng)
        batch = model_mod.make_batch(ds.covariates, values, mask, ds.labels, arch)
        for gamma in opts["gammas"]:
            err = ndiff.grad_check(
                model_mod.loss_builder(batch, gamma, opts["lambda"], arch),
                store, eps=opts["eps"])
            print(f"arch={arch} gamma={gamma} max_rel_err={err:.3e}")
            worst = max(worst, err)
    print(f"max_rel_err={worst:.3e}")
    return 0 if worst < 1e-4 else 3


def main(argv=None) -> int:
    parser, commands = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "synth": cmd_synth,
        "tensorize": cmd_tensorize,
        "train": cmd_train,
        "ensemble": cmd_ensemble,
        "eval": cmd_eval,
        "gradcheck": cmd_gradcheck,
    }
    try:
        opts = commands[args.command].resolve(args)
        return handlers[args.command](opts)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
