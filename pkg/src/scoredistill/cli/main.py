"""``scoredistill`` command line: argument parsing, dispatch and exit codes."""

from __future__ import annotations

import argparse
import os
import sys

from .. import ndgrad as nd
from ..diffusion import DivergenceError, ScheduleRangeError, SingularityError, VocabularyError
from ..dip import ConfigurationError
from ..sceneopt import TrainingDiverged
from . import commands
from .config import ConfigError, build
from .io import IntegrityError

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

COMMANDS = {
    "train-denoiser": (commands.cmd_train_denoiser, "fit the small noise-prediction network"),
    "sample": (commands.cmd_sample, "guided ancestral samples over a seed x omega grid"),
    "distill-2d": (commands.cmd_distill_2d, "optimize an image generator with score distillation"),
    "distill-3d": (commands.cmd_distill_3d, "optimize a radiance field from a frozen denoiser"),
    "render": (commands.cmd_render, "render a saved scene from fixed cameras"),
    "gradcheck": (commands.cmd_gradcheck, "finite-difference check of every hand-written VJP"),
    "sweep": (commands.cmd_sweep, "guidance grid or cumulative ablations"),
}


def parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="scoredistill", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key = value file, optionally with [section] headers")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key (repeatable)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default=f"runs/{name}", help="output directory")
        p.add_argument("--deterministic", action="store_true", default=None,
                       help="single-threaded, bit-reproducible execution")
        p.add_argument("--threads", type=int, help="worker threads for per-view work (default $SDS_THREADS or 1)")
    return ap


def _threads(arg: int | None) -> int | None:
    if arg is not None:
        return arg
    env = os.environ.get("SDS_THREADS")
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"SDS_THREADS must be an integer, got {env!r}") from None


def main(argv: list[str] | None = None) -> int:
    try:
        args = parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    fn = COMMANDS[args.command][0]
    try:
        cfg = build(args.config, args.set, seed=args.seed, deterministic=args.deterministic,
                    threads=_threads(args.threads))
        result = fn(cfg, args.out)
    except (ConfigError, ConfigurationError, VocabularyError, ScheduleRangeError, commands.UsageFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (nd.NonFiniteError, DivergenceError, TrainingDiverged, SingularityError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IntegrityError, OSError) as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO
    if args.command == "gradcheck":
        print(result["report"])
        return EXIT_OK if result["passed"] else EXIT_NUMERIC
    for k, v in result.items():
        print(f"{k}: {v}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())


def main_exit() -> None:
    sys.exit(main())
