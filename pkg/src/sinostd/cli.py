"""Command-line interface.

Subcommands: init-config, gen-dataset, train-vae, train-lrd, standardize,
recon, eval, selfcheck. Exit codes: 0 success, 1 usage error, 2 data error,
3 numeric divergence.
"""

from __future__ import annotations

import argparse
import sys

from . import pipeline
from .dataset import DataError
from .degradation import DegradationError
from .fileio import FileFormatError
from .grid import CheckpointError, GridError
from .metrics import MetricError
from .pipeline import ConfigError
from .projection import ProjectionError
from .sinovae import DivergenceError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sinostd",
                     description="Sinogram degradation simulation and learned standardization")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-config", help="write a default run configuration")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=128,
                   help="square geometry extent (views = bins), default 128")

    p = sub.add_parser("gen-dataset", help="generate a clean/degraded training dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--threads", type=int, default=1,
                   help="accepted for compatibility; generation is sequential")

    p = sub.add_parser("train-vae", help="stage one: train the sinogram VAE")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train-lrd", help="stage two: train the latent refiner")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--vae", required=True, help="frozen SinoVAE checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("standardize", help="map a degraded sinogram to a clean one")
    p.add_argument("--vae", required=True)
    p.add_argument("--lrd", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pgm", default=None, help="also export a 16-bit PGM preview")

    p = sub.add_parser("recon", help="FBP reconstruction of a sinogram file")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hann", action="store_true", help="apodize the ramp filter")
    p.add_argument("--pgm", default=None, help="also export a 16-bit PGM preview")

    p = sub.add_parser("eval", help="projection- and image-domain metrics over paired files")
    p.add_argument("--ref", required=True, help="directory of reference sinograms")
    p.add_argument("--test", required=True, help="directory of sinograms under test")
    p.add_argument("--out", required=True, help="report prefix (.csv and .json)")

    sub.add_parser("selfcheck", help="run the built-in oracle and invariant sweep")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    log = lambda msg: print(msg, file=sys.stderr)
    try:
        if args.command == "init-config":
            cfg = pipeline.default_config(args.size)
            cfg.validate()
            pipeline.save_config(args.out, cfg)
            log(f"wrote {args.out}")
        elif args.command == "gen-dataset":
            cfg = pipeline.load_config(args.config)
            if args.seed is not None:
                cfg.seed = args.seed
            manifest = pipeline.cmd_gen_dataset(cfg, args.samples, args.out, log=log)
            log(f"dataset of {manifest.n_samples} samples at {args.out}")
        elif args.command == "train-vae":
            cfg = pipeline.load_config(args.config)
            if args.seed is not None:
                cfg.seed = args.seed
            pipeline.cmd_train_vae(cfg, args.dataset, args.out, log=log)
        elif args.command == "train-lrd":
            cfg = pipeline.load_config(args.config)
            if args.seed is not None:
                cfg.seed = args.seed
            pipeline.cmd_train_lrd(cfg, args.dataset, args.vae, args.out, log=log)
        elif args.command == "standardize":
            out = pipeline.cmd_standardize(args.vae, args.lrd, args.input, args.out,
                                           seed=args.seed)
            if args.pgm:
                from .fileio import write_pgm
                write_pgm(args.pgm, out)
            log(f"wrote {args.out}")
        elif args.command == "recon":
            pipeline.cmd_recon(args.input, args.out, pgm_path=args.pgm, hann=args.hann)
            log(f"wrote {args.out}")
        elif args.command == "eval":
            report = pipeline.cmd_eval(args.ref, args.test, args.out, log=log)
            log(f"evaluated {report['n_pairs']} pairs -> {args.out}.csv/.json")
        elif args.command == "selfcheck":
            ok = pipeline.run_selfcheck(log=print)
            return EXIT_OK if ok else EXIT_DIVERGED
    except DivergenceError as exc:
        log(f"divergence: {exc}")
        return EXIT_DIVERGED
    except (DataError, FileFormatError, CheckpointError, ConfigError, DegradationError,
            ProjectionError, MetricError, GridError, OSError) as exc:
        log(f"error: {exc}")
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
