"""``vci`` command-line entry point.

Every subcommand writes ``<output>.manifest`` next to its primary output. The
manifest records the subcommand and every flag with defaults filled in, so
``vci replay <manifest>`` reruns the command and reproduces its outputs byte
for byte.

Exit codes: 0 success, 2 usage, 3 data or domain error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__, dataio
from .evaluation import compare_estimators, evaluate_ood, select_ood
from .exceptions import ConfigError, DomainError, NumericError, VCIError
from .marginal import covariate_marginal, mean_marginal, robust_marginal
from .numerics import make_stream
from .objective import DETACH_MODES, OBJECTIVE_KINDS, ObjectiveConfig
from .sim import NONLINEARITIES, SimConfig, simulate
from .trainer import TrainConfig, predict_counterfactual, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(VCIError):
    """Flag values that parse but do not make sense together."""


def _int_list(text, what):
    try:
        values = tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise UsageError(f"{what} must be a comma-separated list of integers, got {text!r}") from None
    if not values:
        raise UsageError(f"{what} must not be empty")
    return values


def _ratio(text):
    parts = str(text).split(":")
    try:
        a, b = (int(p) for p in parts)
    except ValueError:
        raise UsageError(f"--ratio must look like 4:1, got {text!r}") from None
    if a < 1 or b < 0:
        raise UsageError("--ratio needs a positive train part and a non-negative test part")
    return a, b


def _write_manifest(args, outputs):
    items = [("tool", "vci"), ("version", __version__), ("subcommand", args.command)]
    items += [(f"flag.{dest}", value) for dest, value in _flag_items(args)]
    items += [(f"output.{i}", str(p)) for i, p in enumerate(outputs)]
    dataio.write_kv(dataio.manifest_path(outputs[0]), items)


def _flag_items(args):
    for action in SUBPARSERS[args.command]._actions:
        if action.dest in ("help",):
            continue
        yield action.dest, getattr(args, action.dest)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args):
    try:
        cfg = SimConfig(
            n_units=args.units, n_genes=args.genes, latent_dim=args.latent_dim,
            n_treatments=args.treatments, covariate_levels=_int_list(args.covariates, "--covariates"),
            confounding=args.confounding, noise_z=args.noise_z, noise_y=args.noise_y,
            effect_scale=args.effect_scale, de_fraction=args.de_fraction,
            nonlinearity=args.nonlinearity, mixing_seed=args.mixing_seed,
        )
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    sim = simulate(cfg, args.seed)
    dataio.save_dataset(sim, args.out)
    truths = dataio.save_truth(sim, args.out)
    _write_manifest(args, [args.out, *truths])


def cmd_split(args):
    data = dataio.load_dataset(args.data)
    ratio = _ratio(args.ratio)
    try:
        splits = select_ood(data, args.ood_perturbations, make_stream(args.seed, "split"), ratio)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    dataio.save_splits(splits, args.out)
    _write_manifest(args, [args.out])


def _train_config(args):
    try:
        obj = ObjectiveConfig(omega1=args.omega1, omega2=args.omega2, omega_sae=args.omega,
                              detach_mode=args.detach, objective_kind=args.objective)
        return TrainConfig(
            epochs=args.epochs, batch_size=args.batch, learning_rate=args.lr,
            latent_dim=args.latent_dim,
            encoder_hidden=_int_list(args.encoder_hidden, "--encoder-hidden"),
            decoder_hidden=_int_list(args.decoder_hidden, "--decoder-hidden"),
            objective=obj, seed=args.seed, checkpoint_every=args.checkpoint_every,
            variance_floor=args.variance_floor, propensity_clip=args.propensity_clip,
        )
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args):
    cfg = _train_config(args)
    data = dataio.load_dataset(args.data)
    splits = dataio.load_splits(args.splits) if args.splits else None
    if splits is not None and len(splits) != data.n_units:
        raise UsageError(f"split file has {len(splits)} units, dataset has {data.n_units}")
    written = []

    def checkpoint(bundle):
        path = dataio.epoch_checkpoint_path(args.out, bundle.epoch)
        dataio.save_checkpoint(bundle, path)
        written.append(path)

    bundle, log = train(data, splits, cfg, callback=checkpoint, verbose=not args.quiet)
    dataio.save_checkpoint(bundle, args.out)
    log_path = Path(str(args.out) + ".log")
    dataio.save_train_log(log, log_path)
    _write_manifest(args, [args.out, log_path, *written])


def _target_level(bundle, a):
    if not 0 <= a < bundle.network.n_treatments:
        raise UsageError(f"--treatment {a} is not a level of this model "
                         f"(0..{bundle.network.n_treatments - 1})")
    return a


def cmd_predict(args):
    bundle = dataio.load_checkpoint(args.model)
    a = _target_level(bundle, args.treatment)
    if args.samples < 0:
        raise UsageError("--samples must be >= 0")
    data = dataio.load_dataset(args.data)
    pred = predict_counterfactual(bundle.network, data.Y, data.X, data.T, a, args.samples,
                                  make_stream(args.seed, "predict"))
    dataio.save_predictions(pred, args.out)
    _write_manifest(args, [args.out])


def cmd_estimate(args):
    bundle = dataio.load_checkpoint(args.model)
    a = _target_level(bundle, args.treatment)
    data = dataio.load_dataset(args.data)
    if args.splits:
        splits = dataio.load_splits(args.splits)
        if len(splits) != data.n_units:
            raise UsageError(f"split file has {len(splits)} units, dataset has {data.n_units}")
        data = data.subset(splits.mask(args.partition))
    c = None
    if args.covariate is not None:
        c = _int_list(args.covariate, "--covariate")
        if len(c) != data.n_covariates:
            raise UsageError(f"--covariate needs {data.n_covariates} comma-separated codes")
    rng = make_stream(args.seed, "estimate")
    if args.method == "robust":
        if c is None:
            est = robust_marginal(data, bundle.network, bundle.propensity, a, args.samples, rng,
                                  weight=args.weight)
        else:
            est = covariate_marginal(data, bundle.network, bundle.propensity, c, a, args.samples,
                                     rng, weight=args.weight)
    else:
        rows = data if c is None else data.subset(data.covariate_mask(c))
        if rows.n_units == 0:
            raise DomainError(f"no units with covariates {c}")
        pred = predict_counterfactual(bundle.network, rows.Y, rows.X, rows.T, a, args.samples, rng)
        est = mean_marginal(pred, a, c)
    dataio.save_estimate(est, args.out)
    _write_manifest(args, [args.out, dataio.meta_path(args.out)])


def cmd_evaluate(args):
    bundle = dataio.load_checkpoint(args.model)
    data = dataio.load_dataset(args.data)
    splits = dataio.load_splits(args.splits)
    if len(splits) != data.n_units:
        raise UsageError(f"split file has {len(splits)} units, dataset has {data.n_units}")
    report = evaluate_ood(bundle, data, splits, n_de=args.de_genes, control=args.control,
                          samples=args.samples, seed=args.seed, predictor=args.predictor)
    if args.compare_estimators:
        epochs = _int_list(args.checkpoints, "--checkpoints") if args.checkpoints else (bundle.epoch,)
        bundles = {}
        for e in epochs:
            path = dataio.epoch_checkpoint_path(args.model, e)
            bundles[e] = bundle if e == bundle.epoch and not path.exists() else dataio.load_checkpoint(path)
        report.estimators = compare_estimators(
            bundles, data, splits, n_de=args.de_genes, control=args.control,
            samples=args.estimator_samples, seed=args.seed,
        )
    report.config.update({"model": str(args.model), "data": str(args.data),
                          "splits": str(args.splits)})
    dataio.write_report(report, args.out)
    _write_manifest(args, [args.out])


def cmd_replay(args):
    manifest = dataio.read_kv(args.manifest)
    command = manifest.get("subcommand")
    if command not in SUBPARSERS or command == "replay":
        raise UsageError(f"{args.manifest}: manifest names no replayable subcommand")
    argv = [command]
    for action in SUBPARSERS[command]._actions:
        if action.dest == "help":
            continue
        key = f"flag.{action.dest}"
        if key not in manifest:
            raise UsageError(f"{args.manifest}: manifest lacks {key}")
        value = manifest[key]
        if action.dest == "out" and args.out is not None:
            value = args.out
        option = action.option_strings[0]
        if isinstance(action, argparse._StoreTrueAction):
            if value == "true":
                argv.append(option)
        elif value != "":
            argv += [option, value]
    return run(argv)


COMMANDS = {
    "simulate": cmd_simulate, "split": cmd_split, "train": cmd_train,
    "predict": cmd_predict, "estimate": cmd_estimate, "evaluate": cmd_evaluate,
    "replay": cmd_replay,
}
SUBPARSERS: dict = {}


def build_parser():
    parser = argparse.ArgumentParser(prog="vci", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"vci {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a dataset with counterfactual truth files")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--units", type=int, default=20000)
    p.add_argument("--genes", type=int, default=2000)
    p.add_argument("--latent-dim", type=int, default=10)
    p.add_argument("--treatments", type=int, default=10)
    p.add_argument("--covariates", default="3", help="levels per covariate, e.g. 3 or 3,2")
    p.add_argument("--confounding", type=float, default=1.0)
    p.add_argument("--noise-y", type=float, default=0.2)
    p.add_argument("--noise-z", type=float, default=0.5)
    p.add_argument("--effect-scale", type=float, default=1.0)
    p.add_argument("--de-fraction", type=float, default=0.05)
    p.add_argument("--nonlinearity", choices=sorted(NONLINEARITIES), default="tanh")
    p.add_argument("--mixing-seed", type=int, default=0)
    SUBPARSERS["simulate"] = p

    p = sub.add_parser("split", help="train/test/ood split with held-out perturbations")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ood-perturbations", type=int, default=1, metavar="K")
    p.add_argument("--ratio", default="4:1")
    p.add_argument("--seed", type=int, default=0)
    SUBPARSERS["split"] = p

    p = sub.add_parser("train", help="fit the networks and empirical models")
    p.add_argument("--data", required=True)
    p.add_argument("--splits")
    p.add_argument("--out", required=True)
    p.add_argument("--objective", choices=OBJECTIVE_KINDS, default="vci")
    p.add_argument("--detach", choices=DETACH_MODES, default="none")
    p.add_argument("--omega1", type=float, default=1.0)
    p.add_argument("--omega2", type=float, default=0.1)
    p.add_argument("--omega", type=float, default=1.0, help="covariate weight of the sae objective")
    p.add_argument("--latent-dim", type=int, default=32)
    p.add_argument("--encoder-hidden", default="128,128")
    p.add_argument("--decoder-hidden", default="128,128")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--variance-floor", type=float, default=1e-4)
    p.add_argument("--propensity-clip", type=float, default=0.01)
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch progress lines")
    SUBPARSERS["train"] = p

    p = sub.add_parser("predict", help="per-unit counterfactual predictions")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--treatment", type=int, required=True)
    p.add_argument("--samples", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    SUBPARSERS["predict"] = p

    p = sub.add_parser("estimate", help="marginal outcome estimate under one treatment")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--treatment", type=int, required=True)
    p.add_argument("--method", choices=("mean", "robust"), default="robust")
    p.add_argument("--covariate", help="restrict to one covariate tuple, e.g. 1 or 0,2")
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--weight", choices=("observed", "target"), default="observed")
    p.add_argument("--splits")
    p.add_argument("--partition", choices=("train", "test", "ood"), default="train")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    SUBPARSERS["estimate"] = p

    p = sub.add_parser("evaluate", help="score held-out cells and compare estimators")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--splits", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--de-genes", type=int, default=50)
    p.add_argument("--control", type=int, default=0)
    p.add_argument("--samples", type=int, default=0)
    p.add_argument("--predictor", choices=("model", "stratified"), default="model")
    p.add_argument("--compare-estimators", action="store_true")
    p.add_argument("--checkpoints", help="comma-separated epochs, read from <model>.epoch<e>.<ext>")
    p.add_argument("--estimator-samples", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    SUBPARSERS["evaluate"] = p

    p = sub.add_parser("replay", help="rerun a command from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="write to this path instead of the recorded one")
    SUBPARSERS["replay"] = p
    return parser


PARSER = build_parser()


def _threads():
    raw = os.environ.get("VCI_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"VCI_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("VCI_THREADS must be >= 1")
    return n


def run(argv):
    """Parse ``argv`` and dispatch; exceptions propagate (see :func:`main`)."""
    args = PARSER.parse_args(argv)
    with threadpool_limits(limits=_threads()):
        return COMMANDS[args.command](args) or EXIT_OK


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        return run(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except (UsageError, ConfigError) as exc:
        print(f"vci: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"vci: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (VCIError, OSError, ValueError, KeyError) as exc:
        print(f"vci: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
