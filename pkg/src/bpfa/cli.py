"""Command-line entry point.

    bpfa run --task synthetic --strategy gibbs-ssvi --K 40 --batch 100 --seed 7 --out runs/g7
    bpfa baseline --task synthetic --epochs 200 --out runs/gibbs
    bpfa plot runs/*/metrics.jsonl --out plot.csv

Settings may also come from a key=value file (``--config``); flags given on
the command line take precedence.
"""
from __future__ import annotations

import argparse
import logging
import sys
import types
import typing
from dataclasses import fields

from .experiment import TASKS, ExperimentConfig, emit_plot_data, run_baseline, run_experiment
from .local import GIBBS_INITS, Strategy

# flag name -> ExperimentConfig field, where they differ
_FLAG_FIELDS = {"batch": "batch_size", "burnin": "burn_in", "nsamples": "n_samples"}


def _convert(name: str, text: str):
    hints = typing.get_type_hints(ExperimentConfig)
    kind = hints[name]
    if isinstance(kind, types.UnionType) or typing.get_origin(kind) is typing.Union:
        args = [a for a in typing.get_args(kind) if a is not type(None)]
        if text.lower() in ("", "none"):
            return None
        kind = args[0]
    if kind is bool:
        lowered = text.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {text!r}")
    return kind(text)


def read_config(path) -> dict:
    """Parse a key=value file; '#' starts a comment, keys may use '-' or '_'."""
    valid = {f.name for f in fields(ExperimentConfig)}
    out = {}
    with open(path) as fh:
        for n, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{n}: expected key=value")
            key = key.strip().replace("-", "_")
            key = _FLAG_FIELDS.get(key, key)
            if key not in valid:
                raise ValueError(f"{path}:{n}: unknown setting {key!r}")
            out[key] = _convert(key, value.strip())
    return out


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", help="key=value settings file (flags override it)")
    p.add_argument("--task", choices=TASKS, default=S)
    p.add_argument("--strategy", choices=[s.value for s in Strategy], default=S)
    p.add_argument("--K", type=int, default=S, help="truncation level")
    p.add_argument("--batch", type=int, default=S, help="minibatch size")
    p.add_argument("--epochs", type=int, default=S, help="number of iterations (one minibatch each)")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--init", default=S, help="random | gibbs:<subset>:<iters>")
    p.add_argument("--burnin", type=int, default=S)
    p.add_argument("--nsamples", type=int, default=S)
    p.add_argument("--single-site", dest="blocked", action="store_false", default=S,
                   help="draw z_k given the current w_k instead of jointly")
    p.add_argument("--random-scan", action="store_true", default=S, help="visit features in random order")
    p.add_argument("--gibbs-init", choices=GIBBS_INITS, default=S,
                   help="local chain start: z from the current pi, Bernoulli(0.5), or all off")
    p.add_argument("--eval-every-s", type=float, default=S, help="evaluation period in training seconds")
    p.add_argument("--eval-every", type=int, default=S,
                   help="evaluation period in iterations (overrides --eval-every-s)")
    p.add_argument("--time-budget-s", type=float, default=S, help="stop after this much training time")
    p.add_argument("--holdout", type=float, default=S)
    p.add_argument("--observe-frac", type=float, default=S)
    p.add_argument("--noise-sd", type=float, default=S)
    p.add_argument("--M", type=int, default=S, help="predictive sample count")
    p.add_argument("--paper-literal-mu", action="store_true", default=S,
                   help="omit gamma_obs from the loading mean statistic")
    p.add_argument("--no-timing", dest="timing", action="store_false", default=S,
                   help="record null wall-clock times so metric files are bitwise reproducible")
    p.add_argument("--checkpoint-every", type=int, default=S)
    p.add_argument("--resume", default=S, help="checkpoint to continue from")
    p.add_argument("--out", default=S, help="output directory")
    p.add_argument("--image", default=S, help="8-bit binary graymap")
    p.add_argument("--crop", default=S, help="size or row,col,height,width")
    p.add_argument("--matrix", default=S, help="delimited matrix, NaN marks missing")
    p.add_argument("--mask", default=S, help="0/1 mask file matching --matrix")
    for name in ("N", "D", "K_true"):
        p.add_argument(f"--{name}", type=int, default=S, help="synthetic task size")
    for name in ("gamma_w", "gamma_obs", "a", "b", "c_prior", "d_prior", "e_prior", "f_prior", "t0", "zeta"):
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=float, default=S)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    parser = argparse.ArgumentParser(prog="bpfa", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run_flags(sub.add_parser("run", parents=[common], help="fit by stochastic variational inference"))
    _add_run_flags(sub.add_parser("baseline", parents=[common], help="run the full Gibbs sampler"))
    plot = sub.add_parser("plot", parents=[common], help="merge metric files into a CSV table")
    plot.add_argument("metrics", nargs="+")
    plot.add_argument("--out", required=True)
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    settings = read_config(args.config) if getattr(args, "config", None) else {}
    for key, value in vars(args).items():
        if key in ("config", "command", "verbose"):
            continue
        settings[_FLAG_FIELDS.get(key, key)] = value
    return ExperimentConfig(**settings)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "plot":
            emit_plot_data(args.metrics, args.out)
            return 0
        cfg = config_from_args(args)
        result = (run_experiment if args.command == "run" else run_baseline)(cfg)
    except (ValueError, TypeError, OSError, FloatingPointError) as exc:
        print(f"bpfa: error: {exc}", file=sys.stderr)
        return 2
    last = result.records[-1] if result.records else None
    if last is not None:
        psnr = "" if last.psnr_db is None else f" psnr={last.psnr_db:.2f}dB"
        mse = "nan" if last.pred_mse is None else f"{last.pred_mse:.4g}"
        print(f"{last.strategy} iter={last.epoch} loglik={last.pred_loglik:.6g} mse={mse}{psnr}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
