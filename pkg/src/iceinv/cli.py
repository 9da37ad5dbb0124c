"""
Command-line driver.

    iceinv <stage> [--config PATH] [--seed N] [--threads N] [--out DIR]

Stages are `forward synth invert lcurve spectrum sample predict all`;
without --config the built-in desk problem runs.  --seed overrides the
config's master seed, --out the output directory.  Any stage failure
exits nonzero with a one-line reason.
"""

import argparse
import sys

from .mesh import ConfigurationError, GeometryError
from .stokes import NonlinearSolveError
from . import config as cfgmod
from .pipeline import Pipeline, STAGES, StageError

_STAGE_HELP = {
    "forward": "solve the nonlinear Stokes problem at the configured truth",
    "synth": "generate noisy synthetic surface observations",
    "invert": "MAP estimation of the basal friction field",
    "lcurve": "regularization scan with corner selection",
    "spectrum": "randomized GEVD of the misfit Hessian at the MAP",
    "sample": "prior and posterior draws plus pointwise deviations",
    "predict": "mass-flux prediction with linearized uncertainty",
    "all": "synth, invert, lcurve, spectrum, sample, predict in sequence",
}


def build_parser():
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", metavar="PATH",
                        help="INI run configuration (default: built-in desk problem)")
    shared.add_argument("--seed", type=int, metavar="N",
                        help="override the master seed")
    shared.add_argument("--threads", type=int, default=1, metavar="N",
                        help="worker threads for concurrent stages (default 1)")
    shared.add_argument("--out", metavar="DIR",
                        help="override the output directory")
    ap = argparse.ArgumentParser(
        prog="iceinv",
        description="Basal-friction inversion and uncertainty pipeline "
                    "for a flowline ice slab.")
    sub = ap.add_subparsers(dest="stage", required=True, metavar="stage")
    for stage in STAGES:
        sub.add_parser(stage, parents=[shared], help=_STAGE_HELP[stage])
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.config is not None:
            cfg = cfgmod.load_config(args.config)
        else:
            cfg = cfgmod.RunConfig()
        if args.seed is not None:
            cfg = cfgmod.with_seed(cfg, args.seed)
        if args.out is not None:
            cfg = cfgmod.with_output(cfg, args.out)
        Pipeline(cfg, threads=args.threads).run(args.stage)
    except (ConfigurationError, GeometryError, StageError,
            NonlinearSolveError, OSError) as exc:
        print(f"iceinv: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
