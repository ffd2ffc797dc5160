"""Command line interface: ``poredet {synth,train,gridsearch,detect,evaluate}``.

Option values resolve as command-line flag, then ``--config`` file, then
built-in default. The effective values are echoed as ``# key=value`` lines.

Exit codes: 0 success, 1 unexpected error, 2 usage error, 3 missing file,
4 malformed data, 5 incompatible checkpoint, 6 training diverged.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .config import ConfigError, format_config, read_config
from .data import AnnotationValidationError, DataFormatError, PairingError, Sample, load_sample, find_pairs, split_sizes
from .detect import (
    POSTPROCESSING, Detections, infer_probability_map, load_detections, run_postprocessing, save_detections,
)
from .evaluate import evaluate_detections, format_grid, format_report, grid_search
from .model import CheckpointError, PoreModel, load_checkpoint
from .pgm import PGMError
from .synth import InfeasiblePoresError, SynthConfig, generate_dataset
from .train import TrainConfig, TrainingDivergedError, train

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_DATA = 4
EXIT_CHECKPOINT = 5
EXIT_DIVERGED = 6

SUBSETS = ("train", "validation", "test", "all")

# name: (type, default, help)
OPTIONS = {
    # training (published values unless noted)
    "base_lr": (float, 0.1, "initial SGD learning rate (published: 0.1)"),
    "decay_rate": (float, 0.96, "learning-rate decay factor (published: 0.96)"),
    "decay_steps": (int, 2000, "steps per learning-rate decay (published: 2000)"),
    "batch_size": (int, 256, "patches per SGD step (published: 256)"),
    "dropout_rate": (float, 0.2, "dropout before the output layer (published: 0.2)"),
    "weight_decay": (float, 0.0, "L2 weight decay (published: 0)"),
    "pos_fraction": (float, 0.5, "fraction of positive patches per batch (our choice)"),
    "eval_every": (int, 100, "steps between validation evaluations (our choice)"),
    "patience": (int, 10, "evaluations without improvement before stopping (our choice)"),
    "max_steps": (int, 50_000, "hard cap on SGD steps (our choice)"),
    "bn_epsilon": (float, 1e-3, "batch-norm epsilon (our choice)"),
    "bn_momentum": (float, 0.99, "batch-norm running-statistics momentum (our choice)"),
    # synthetic data
    "n_images": (int, 30, "number of synthetic images (benchmark size: 30)"),
    "height": (int, 128, "synthetic image rows"),
    "width": (int, 128, "synthetic image columns"),
    "ridge_period": (float, 12.0, "synthetic ridge period in pixels"),
    "pore_count": (int, 80, "pores per synthetic image"),
    "pore_radius_min": (float, 1.5, "smallest synthetic pore radius in pixels"),
    "pore_radius_max": (float, 2.5, "largest synthetic pore radius in pixels"),
    "noise_sigma": (float, 0.06, "std of additive Gaussian pixel noise"),
    # post-processing
    "p_t": (float, 0.6, "probability threshold for proposed post-processing (published: 0.6)"),
    "i_t": (float, 0.0, "NMS IoU threshold (published: 0)"),
    "post": (str, "proposed", "post-processing: proposed (threshold + NMS) or traditional (0.5 + components)"),
    "averaging": (str, "micro", "pool counts over images (micro) or average per-image rates (macro)"),
    "split_mode": (str, "proportional", "proportional (15/5/10 for 30 images) or benchmark (exactly 30)"),
    "swap_axes": (int, 0, "1 if annotation files list 'x y' (col row) instead of 'row col'"),
    "seed": (int, 0, "seed for all randomness"),
}

COMMAND_OPTIONS = {
    "synth": ["n_images", "height", "width", "ridge_period", "pore_count", "pore_radius_min", "pore_radius_max",
              "noise_sigma", "seed"],
    "train": ["base_lr", "decay_rate", "decay_steps", "batch_size", "dropout_rate", "weight_decay", "pos_fraction",
              "eval_every", "patience", "max_steps", "bn_epsilon", "bn_momentum", "split_mode", "swap_axes", "seed"],
    "gridsearch": ["split_mode", "swap_axes"],
    "detect": ["p_t", "i_t", "post", "split_mode", "swap_axes"],
    "evaluate": ["p_t", "i_t", "post", "averaging", "split_mode", "swap_axes"],
}

CHOICES = {"post": POSTPROCESSING, "averaging": ("micro", "macro"),
           "split_mode": ("proportional", "benchmark"), "swap_axes": (0, 1)}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _add_options(p: argparse.ArgumentParser, names: list[str]) -> None:
    g = p.add_argument_group("options (flag > --config file > default)")
    g.add_argument("--config", type=Path, help="key=value file supplying any option below")
    for name in names:
        typ, default, text = OPTIONS[name]
        g.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=argparse.SUPPRESS,
                       choices=CHOICES.get(name), help=f"{text} [default: {default}]")


def _add_data(p: argparse.ArgumentParser, default_subset: str) -> None:
    p.add_argument("--data", type=Path, help="directory of image + annotation pairs")
    p.add_argument("--annotations", type=Path, help="annotation directory if separate from --data")
    p.add_argument("--subset", choices=SUBSETS, default=default_subset,
                   help=f"which split of --data to use [default: {default_subset}]")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poredet", description="Fingerprint pore detection with a small FCN.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic fingerprint dataset")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    _add_options(p, COMMAND_OPTIONS["synth"])

    p = sub.add_parser("train", help="train the FCN on the training split")
    p.add_argument("--data", type=Path, required=True, help="directory of image + annotation pairs")
    p.add_argument("--annotations", type=Path, help="annotation directory if separate from --data")
    p.add_argument("--checkpoint", type=Path, required=True, help="where to write the best checkpoint")
    p.add_argument("--log", type=Path, help="append-only CSV training log")
    _add_options(p, COMMAND_OPTIONS["train"])

    p = sub.add_parser("gridsearch", help="choose p_t and i_t on the validation split")
    p.add_argument("--checkpoint", type=Path, required=True)
    _add_data(p, "validation")
    p.add_argument("--output", type=Path, help="write the 72-row grid table here")
    p.add_argument("--params-out", type=Path, help="write the chosen p_t/i_t as a config file")
    _add_options(p, COMMAND_OPTIONS["gridsearch"])

    p = sub.add_parser("detect", help="detect pores and write one 'row col score' file per image")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, nargs="*", default=[], help="image files to process")
    _add_data(p, "test")
    p.add_argument("--out-dir", type=Path, required=True)
    _add_options(p, COMMAND_OPTIONS["detect"])

    p = sub.add_parser("evaluate", help="score detections against ground truth")
    _add_data(p, "test")
    p.add_argument("--detections", type=Path, help="directory of detection files named like the images")
    p.add_argument("--checkpoint", type=Path, help="run detection with this model instead of reading files")
    p.add_argument("--report", type=Path, help="write the metrics report here")
    _add_options(p, COMMAND_OPTIONS["evaluate"])
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Effective option values for the chosen command."""
    names = COMMAND_OPTIONS[args.command]
    file_values = {}
    if getattr(args, "config", None) is not None:
        file_values = read_config(args.config)
    out = {}
    for name in names:
        typ, default, _ = OPTIONS[name]
        if hasattr(args, name):
            value = getattr(args, name)
        elif name in file_values:
            try:
                value = typ(file_values[name])
            except ValueError:
                raise ConfigError(f"{args.config}: bad value {file_values[name]!r} for {name}") from None
            if name in CHOICES and value not in CHOICES[name]:
                raise ConfigError(f"{args.config}: {name} must be one of {CHOICES[name]}")
        else:
            value = default
        out[name] = value
    return out


def _echo(opts: dict) -> None:
    sys.stdout.write("".join(f"# {k}={v}\n" for k, v in opts.items()))


def load_subset(args, opts) -> list[Sample]:
    if args.data is None:
        raise CliError("--data is required", EXIT_USAGE)
    pairs = find_pairs(args.data, args.annotations)
    n_train, n_val, _ = split_sizes(len(pairs), opts.get("split_mode", "proportional"))
    chosen = {"train": pairs[:n_train], "validation": pairs[n_train:n_train + n_val],
              "test": pairs[n_train + n_val:], "all": pairs}[args.subset]
    return [load_sample(img, ann, bool(opts.get("swap_axes", 0))) for img, ann in chosen]


def cmd_synth(args, opts) -> None:
    cfg = SynthConfig(opts["height"], opts["width"], opts["ridge_period"], opts["pore_count"],
                      (opts["pore_radius_min"], opts["pore_radius_max"]), opts["noise_sigma"], seed=opts["seed"])
    paths = generate_dataset(args.out, opts["n_images"], cfg)
    print(f"wrote {len(paths)} images to {args.out}")


def cmd_train(args, opts) -> None:
    from .data import split_dataset

    split = split_dataset(args.data, opts["split_mode"], args.annotations, bool(opts["swap_axes"]))
    names = {f.name for f in fields(TrainConfig)}
    config = TrainConfig(**{k: v for k, v in opts.items() if k in names})
    model = PoreModel.create(config.seed, config.dropout_rate, config.bn_epsilon, config.bn_momentum)
    result = train(model, split, config, checkpoint_path=args.checkpoint, log_path=args.log)
    print(f"best_step={result.best_step}")
    print(f"best_val_fscore={result.best_fscore:.6f}")
    print(f"stop_reason={result.stop_reason}")


def cmd_gridsearch(args, opts) -> None:
    model = load_checkpoint(args.checkpoint)
    samples = load_subset(args, opts)
    result = grid_search(model, samples)
    table = format_grid(result)
    if args.output is not None:
        _write(args.output, table)
    else:
        sys.stdout.write(table)
    chosen = {"p_t": f"{result.p_t:.1f}", "i_t": f"{result.i_t:.1f}"}
    if args.params_out is not None:
        _write(args.params_out, format_config(chosen))
    print(f"p_t={chosen['p_t']}")
    print(f"i_t={chosen['i_t']}")
    print(f"tdr={result.best.tdr:.6f}")
    print(f"fdr={result.best.fdr:.6f}")
    print(f"f_score={result.best.f_score:.6f}")


def _detect_all(model, images, opts) -> list[Detections]:
    return [run_postprocessing(infer_probability_map(model, img), opts["post"], opts["p_t"], opts["i_t"])
            for _, img in images]


def cmd_detect(args, opts) -> None:
    from .data import load_image

    model = load_checkpoint(args.checkpoint)
    if args.image:
        images = [(p.stem, load_image(p)) for p in args.image]
    else:
        images = [(s.name, s.image) for s in load_subset(args, opts)]
    if not images:
        raise CliError("no images to process (use --image or --data)", EXIT_USAGE)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for (name, _), dets in zip(images, _detect_all(model, images, opts)):
        save_detections(args.out_dir / f"{name}.txt", dets)
    print(f"wrote {len(images)} detection files to {args.out_dir}")


def cmd_evaluate(args, opts) -> None:
    samples = load_subset(args, opts)
    if args.detections is not None:
        dets = []
        for s in samples:
            path = args.detections / f"{s.name}.txt"
            if not path.is_file():
                raise FileNotFoundError(f"no detection file {path} for image {s.name}")
            dets.append(load_detections(path))
    elif args.checkpoint is not None:
        model = load_checkpoint(args.checkpoint)
        dets = _detect_all(model, [(s.name, s.image) for s in samples], opts)
    else:
        raise CliError("evaluate needs --detections or --checkpoint", EXIT_USAGE)
    report = format_report(evaluate_detections(dets, samples), opts["averaging"])
    if args.report is not None:
        _write(args.report, report)
    sys.stdout.write(report)


def _write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "gridsearch": cmd_gridsearch,
            "detect": cmd_detect, "evaluate": cmd_evaluate}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve(args)
        _echo(opts)
        COMMANDS[args.command](args, opts)
    except CliError as exc:
        print(f"poredet: error: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"poredet: error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except CheckpointError as exc:
        print(f"poredet: error: incompatible checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except TrainingDivergedError as exc:
        print(f"poredet: error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, DataFormatError, AnnotationValidationError, PairingError, PGMError,
            InfeasiblePoresError, ValueError) as exc:
        print(f"poredet: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic
        print(f"poredet: unexpected error: {exc!r}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
