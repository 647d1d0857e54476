import argparse
import json
import logging
import os
import sys

import numpy as np
import requests

from lib.cli.cli_constants import CliDefaults, ExitCodes
from lib.cli.run_config import create_run_directory, load_run_config
from lib.data.data_constants import MnistDefaults, PictureDefaults
from lib.data.physical_layer import (
    MnistDownloader,
    MnistSet,
    PictureSpec,
    binarize,
    gen_picture,
    load_mnist,
    read_dataset,
    translate_dataset,
    write_dataset,
)
from lib.diffusion.action_layer import DiffusionActionLayer, kernel_check_config
from lib.diffusion.physical_layer import RandomWalkConfig
from lib.dvae.action_layer import GRAD_CHECK_MANIFOLDS, DvaeActionLayer, build_tiny_model
from lib.dvae.physical_layer import (
    TrainConfig,
    build_model,
    evaluate,
    model_from_record,
    model_to_record,
    train,
    write_eval_csv,
    write_history_csv,
)
from lib.exceptions import ConfigError, DatasetFormatError, DvaeError, ShapeMismatch, TrainingAborted, UnsupportedManifold
from lib.manifolds.physical_layer import ManifoldDescriptor, ManifoldKind
from lib.nets.checkpoint import read_checkpoint, write_checkpoint
from lib.topology.physical_layer import (
    encode_latents,
    export_latents,
    latent_grid,
    reconstruction_grid,
    sphere_coverage,
    torus_degree,
    write_ppm,
)
from lib.validation import all_passed, write_check_report

logger = logging.getLogger(__name__)


def load_images(dataset, labels=""):
    """
    Reads a picture container, or an IDX image file when labels is given.

    Returns:
        tuple: (images (count, D) float64, source TranslationDataset or MnistSet).
    """
    if not dataset:
        raise ConfigError("no dataset given")
    with open(dataset, "rb") as handle:
        head = handle.read(len(PictureDefaults.CONTAINER_MAGIC))
    if head == PictureDefaults.CONTAINER_MAGIC:
        source = read_dataset(dataset)
    elif labels:
        source = load_mnist(dataset, labels)
    else:
        raise ConfigError(f"{dataset} is not a picture container; IDX images also need --labels")
    return source.flat(), source


def image_shape(source):
    return tuple(source.images.shape[1:])


def load_model(path):
    model, state, counter = model_from_record(read_checkpoint(path))
    logger.info("loaded %s model from %s after %d epochs", model.manifold.name, path, counter)
    return model, state, counter


def cmd_gen_data(args):
    mode = args.mode.replace("-", "_")
    cutoff, gamma = args.cutoff, args.gamma
    if args.preset == "too-complicated":
        mode = "random_fourier"
        cutoff = PictureDefaults.TOO_COMPLICATED["cutoff"] if cutoff is None else cutoff
        gamma = PictureDefaults.TOO_COMPLICATED["gamma"] if gamma is None else gamma
    spec = PictureSpec(
        mode=mode,
        cutoff=PictureDefaults.CUTOFF if cutoff is None else cutoff,
        gamma=PictureDefaults.GAMMA if gamma is None else gamma,
        seed=args.seed,
    ).validate()
    picture = gen_picture(spec, args.size)
    dataset = translate_dataset(picture, args.grid, {"spec": spec.to_metadata()})
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, CliDefaults.DATASET_FILE)
    write_dataset(path, dataset)
    print(f"wrote {len(dataset.images)} records to {path}; native range {dataset.scale.low:.6g}..{dataset.scale.high:.6g}; seed {spec.seed}")
    return ExitCodes.OK


def cmd_fetch_mnist(args):
    splits = ("train", "test") if args.split == "all" else (args.split,)
    paths = MnistDownloader(args.base_url).fetch(args.out, splits, force=args.force)
    for split, (images, labels) in paths.items():
        print(f"{split}: {images} {labels}")
    return ExitCodes.OK


def _train_overrides(args):
    overrides = {
        "manifold": args.manifold,
        "epochs": args.epochs,
        "seed": args.seed,
        "dataset": args.dataset,
        "labels": args.labels,
        "likelihood": args.likelihood,
        "kl_mode": args.kl_mode,
        "walk_steps": args.steps,
        "t_min": args.t_min,
        "t_max": args.t_max,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "width": args.width,
        "out": args.out,
    }
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got '{item}'")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def checkpoint_settings(model):
    """
    The run configuration values a loaded model fixes.
    """
    trunk = model.encoder.trunk.layers
    return {
        "manifold": model.manifold.name,
        "major_radius": model.manifold.major_radius,
        "minor_radius": model.manifold.minor_radius,
        "t_min": model.t_min,
        "t_max": model.t_max,
        "walk_steps": model.walk.steps,
        "width": trunk[0].out_dim,
        "encoder_layers": len(trunk),
        "decoder_layers": len(model.decoder.layers) - 1,
        "activation": trunk[0].activation,
        "likelihood": model.likelihood,
        "kl_mode": model.kl_mode,
    }


def train_config_from(config):
    return TrainConfig(
        epochs=config.epochs,
        batch_size=config.batch_size,
        seed=config.seed,
        lr=config.lr,
        beta1=config.beta1,
        beta2=config.beta2,
        adam_eps=config.adam_eps,
        eval_every=config.eval_every,
        binarize=config.likelihood == "bernoulli",
        record_wall_time=config.record_wall_time,
    )


def cmd_train(args):
    config = load_run_config(args.config, _train_overrides(args))
    images, _ = load_images(config.dataset, config.labels)
    if args.resume:
        model, state, counter = load_model(args.resume)
        config = config.adopt(checkpoint_settings(model))
        if model.data_dim != images.shape[1]:
            raise ShapeMismatch(f"checkpoint expects {model.data_dim} pixels, dataset has {images.shape[1]}")
    else:
        descriptor = ManifoldDescriptor.from_name(config.manifold, config.major_radius, config.minor_radius)
        model = build_model(
            descriptor,
            images.shape[1],
            np.random.default_rng(config.seed),
            width=config.width,
            encoder_layers=config.encoder_layers,
            decoder_layers=config.decoder_layers,
            activation=config.activation,
            t_min=config.t_min,
            t_max=config.t_max,
            walk=RandomWalkConfig(steps=config.walk_steps, seed=config.seed),
            likelihood=config.likelihood,
            kl_mode=config.kl_mode or None,
        )
        state, counter = None, 0
    run_dir = create_run_directory(config.out, f"{config.manifold}-seed{config.seed}")
    config.write(os.path.join(run_dir, CliDefaults.CONFIG_FILE))
    checkpoint_path = os.path.join(run_dir, CliDefaults.CHECKPOINT_FILE)
    metrics_path = os.path.join(run_dir, CliDefaults.METRICS_FILE)
    train_config = train_config_from(config)

    def save(trained, history, optimizer_state):
        write_checkpoint(checkpoint_path, model_to_record(trained, optimizer_state, counter + len(history)))
        write_history_csv(metrics_path, history)

    save(model, [], state)
    try:
        result = train(model, images, train_config, optimizer_state=state, start_epoch=counter, on_epoch=save)
    except TrainingAborted as error:
        save(error.model, error.history, error.optimizer_state)
        logger.error("%s; last good checkpoint kept in %s", error, run_dir)
        return ExitCodes.TRAINING_ABORTED
    final = result.history[-1] if result.history else None
    if final is not None:
        print(f"{run_dir}: epoch {final.epoch} elbo={final.elbo:.6g} kl={final.kl:.6g} mse={final.mse:.6g}")
    else:
        print(f"{run_dir}: no epochs run")
    return ExitCodes.OK


def cmd_eval(args):
    model, _, _ = load_model(args.checkpoint)
    images, source = load_images(args.dataset, args.labels)
    if model.data_dim != images.shape[1]:
        raise ShapeMismatch(f"checkpoint expects {model.data_dim} pixels, dataset has {images.shape[1]}")
    if model.likelihood == "bernoulli" and isinstance(source, MnistSet):
        images = binarize(source, args.seed, args.binarize).flat()
    row = evaluate(model, images, samples=args.L, seed=args.seed)
    path = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), CliDefaults.EVAL_FILE)
    write_eval_csv(path, [row])
    print(
        f"{row.manifold}: ll={row.ll:.6g} (+-{row.ll_stderr:.2g}) elbo={row.elbo:.6g} (+-{row.elbo_stderr:.2g}) "
        f"kl={row.kl:.6g} mse_or_re={row.mse_or_re:.6g} L={row.L} -> {path}"
    )
    return ExitCodes.OK


def _report(outcomes, path):
    write_check_report(path, outcomes)
    for outcome in outcomes:
        status = "pass" if outcome.passed else "FAIL"
        print(f"{status:4} {outcome.manifold:14} {outcome.check}: {outcome.value:.3e} (limit {outcome.limit:.1e}) {outcome.detail}")
    passed = all_passed(outcomes)
    print(f"report written to {path}: {sum(o.passed for o in outcomes)}/{len(outcomes)} passed")
    return ExitCodes.OK if passed else ExitCodes.VALIDATION_FAILED


def cmd_kernel_check(args):
    time = args.t if args.t is not None else CliDefaults.KERNEL_CHECK_TIMES[args.manifold]
    layer = DiffusionActionLayer()
    layer.rng = np.random.default_rng(args.seed)
    layer.kernel_config = kernel_check_config(time)
    outcomes = layer.run_kernel_check_suite(args.manifold, time, args.steps, args.samples)
    return _report(outcomes, args.out or f"kernel-check-{args.manifold}.csv")


def cmd_grad_check(args):
    layer = DvaeActionLayer()
    layer.rng = np.random.default_rng(args.seed)
    layer.build_model = build_tiny_model
    outcomes = layer.run_grad_check_suite(tuple(args.manifolds))
    return _report(outcomes, args.out or "grad-check.csv")


def cmd_latents(args):
    model, _, _ = load_model(args.checkpoint)
    images, source = load_images(args.dataset, args.labels)
    if model.data_dim != images.shape[1]:
        raise ShapeMismatch(f"checkpoint expects {model.data_dim} pixels, dataset has {images.shape[1]}")
    out = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out, exist_ok=True)
    if isinstance(source, MnistSet):
        shifts = np.stack([source.labels, np.zeros_like(source.labels)], axis=1)
        grid = 10
    else:
        shifts, grid = source.shifts, source.grid
    export_latents(model, images, shifts, grid, os.path.join(out, CliDefaults.LATENTS_FILE))
    try:
        write_ppm(os.path.join(out, CliDefaults.RECONSTRUCTION_FILE), reconstruction_grid(model, args.resolution, image_shape(source)))
    except UnsupportedManifold as error:
        logger.warning("skipping reconstruction grid: %s", error)

    report = {"manifold": model.manifold.name}
    kind = model.geometry.kind
    if kind in (ManifoldKind.FLAT_TORUS, ManifoldKind.EMBEDDED_TORUS) and not isinstance(source, MnistSet):
        report["winding"] = torus_degree(latent_grid(model, source).angles).as_dict()
        print(f"degree {report['winding']['degree']} (resolved={report['winding']['resolved']})")
    if kind is ManifoldKind.SPHERE and model.geometry.dim == 2:
        centers, _ = encode_latents(model, images)
        report["sphere_coverage"] = sphere_coverage(centers)
        print(f"sphere coverage {report['sphere_coverage']:.4f}")
    with open(os.path.join(out, CliDefaults.TOPOLOGY_FILE), "w", encoding="utf-8") as handle:
        json.dump(report, handle, indent=2, sort_keys=True)
        handle.write("\n")
    print(f"latent exports written to {out}")
    return ExitCodes.OK


def build_parser():
    parser = argparse.ArgumentParser(prog=CliDefaults.PROG, description="Diffusion variational autoencoders on manifold latent spaces.")
    parser.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data", help="generate a translated-picture dataset")
    gen.add_argument("--mode", default="simple", choices=("simple", "random-fourier"))
    gen.add_argument("--preset", choices=("too-complicated",))
    gen.add_argument("--cutoff", type=int)
    gen.add_argument("--gamma", type=float)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--size", type=int, default=PictureDefaults.SIZE)
    gen.add_argument("--grid", type=int, default=PictureDefaults.GRID)
    gen.add_argument("--out", required=True)
    gen.set_defaults(handler=cmd_gen_data)

    fetch = commands.add_parser("fetch-mnist", help="download the MNIST IDX archives")
    fetch.add_argument("--out", required=True)
    fetch.add_argument("--split", default="all", choices=("train", "test", "all"))
    fetch.add_argument("--base-url", default=MnistDefaults.BASE_URL)
    fetch.add_argument("--force", action="store_true")
    fetch.set_defaults(handler=cmd_fetch_mnist)

    tr = commands.add_parser("train", help="train a model into a new run directory")
    tr.add_argument("--config")
    tr.add_argument("--manifold")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--dataset")
    tr.add_argument("--labels")
    tr.add_argument("--likelihood", choices=("gaussian", "bernoulli"))
    tr.add_argument("--kl-mode", choices=("asymptotic", "numeric", "gaussian"))
    tr.add_argument("--steps", type=int)
    tr.add_argument("--t-min", type=float)
    tr.add_argument("--t-max", type=float)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--width", type=int)
    tr.add_argument("--out")
    tr.add_argument("--resume", help="checkpoint to continue from")
    tr.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    tr.set_defaults(handler=cmd_train)

    ev = commands.add_parser("eval", help="importance-sampled evaluation of a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--labels", default="")
    ev.add_argument("--L", type=int, default=100)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--binarize", default="stochastic", choices=MnistDefaults.BINARIZE_MODES)
    ev.add_argument("--out")
    ev.set_defaults(handler=cmd_eval)

    kc = commands.add_parser("kernel-check", help="validate the sampler, heat kernels and KL terms")
    kc.add_argument("--manifold", default="circle", choices=CliDefaults.KERNEL_CHECK_MANIFOLDS)
    kc.add_argument("--t", type=float)
    kc.add_argument("--steps", type=int, default=16)
    kc.add_argument("--samples", type=int, default=CliDefaults.KERNEL_CHECK_SAMPLES)
    kc.add_argument("--seed", type=int, default=0)
    kc.add_argument("--out")
    kc.set_defaults(handler=cmd_kernel_check)

    gc = commands.add_parser("grad-check", help="compare ELBO gradients with finite differences")
    gc.add_argument("--manifolds", nargs="+", default=list(GRAD_CHECK_MANIFOLDS))
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--out")
    gc.set_defaults(handler=cmd_grad_check)

    lat = commands.add_parser("latents", help="export latents, a reconstruction grid and topology diagnostics")
    lat.add_argument("--checkpoint", required=True)
    lat.add_argument("--dataset", required=True)
    lat.add_argument("--labels", default="")
    lat.add_argument("--resolution", type=int, default=8)
    lat.add_argument("--out")
    lat.set_defaults(handler=cmd_latents)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as error:
        return ExitCodes.USAGE if error.code else ExitCodes.OK
    logging.basicConfig(level=getattr(logging, args.log_level), format=CliDefaults.LOG_FORMAT)
    try:
        return args.handler(args)
    except ConfigError as error:
        logger.error("configuration error: %s", error)
        return ExitCodes.USAGE
    except (OSError, DatasetFormatError, ShapeMismatch, requests.RequestException) as error:
        logger.error("I/O error: %s", error)
        return ExitCodes.IO
    except DvaeError as error:
        logger.error("%s: %s", type(error).__name__, error)
        return ExitCodes.USAGE


if __name__ == "__main__":
    sys.exit(main())
