"""Batch command-line interface for the assembly-dynamics pipeline.

Every subcommand reads/writes artifacts under ``--out`` so stages can be run
separately or all at once via ``report``.  Failures exit nonzero and print a
one-line JSON error record to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import config_reference, load_config
from . import pipeline


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="colloidsde",
        description="reduced-SDE pipeline for field-driven colloidal assembly",
    )
    parser.add_argument("--config", type=Path, default=None,
                        help="flat key=value config file")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the master seed")
    parser.add_argument("--out", type=Path, default=Path("out"),
                        help="artifact directory")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", help="run seeded trajectories per voltage")
    sub.add_parser("order-params", help="order-parameter table for all frames")
    sub.add_parser("featurize", help="reference, filtering, density corpus")
    sub.add_parser("dmaps", help="fit the latent-coordinate model")
    restrict = sub.add_parser("restrict", help="embed trajectories "
                              "(or external files) in latent coordinates")
    restrict.add_argument("--external", type=Path, nargs="*", default=[],
                          help="external trajectory files to restrict")
    sub.add_parser("fit-km", help="burst-moment drift/diffusivity field")
    sub.add_parser("fit-nn", help="likelihood-trained network models")
    integ = sub.add_parser("integrate", help="latent rollout of a fitted model")
    integ.add_argument("--model", choices=("nn", "km", "nn-param"), default="nn")
    integ.add_argument("--x0", type=str, default=None,
                       help="initial latent point 'phi1,phi2'")
    integ.add_argument("--steps", type=int, default=None)
    integ.add_argument("--h", type=float, default=None)
    integ.add_argument("--p", type=float, default=None)
    sub.add_parser("free-energy", help="effective-potential surfaces")
    sub.add_parser("compare", help="trajectory envelopes and coefficient gaps")
    sub.add_parser("uq", help="ensemble uncertainty maps")
    report = sub.add_parser("report", help="full pipeline plus plots")
    report.add_argument("--external", type=Path, nargs="*", default=[])
    sub.add_parser("config-reference", help="print all config keys")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "config-reference":
            print(config_reference())
            return 0
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = load_config(args.config, overrides)
        out = args.out
        out.mkdir(parents=True, exist_ok=True)

        if args.command == "simulate":
            pipeline.stage_simulate(cfg, out)
        elif args.command == "order-params":
            pipeline.stage_order_params(cfg, out)
        elif args.command == "featurize":
            pipeline.stage_featurize(cfg, out)
        elif args.command == "dmaps":
            pipeline.stage_dmaps(cfg, out)
        elif args.command == "restrict":
            if args.external:
                pipeline.stage_restrict_external(cfg, out, args.external)
            else:
                pipeline.stage_restrict(cfg, out)
        elif args.command == "fit-km":
            pipeline.stage_fit_km(cfg, out)
        elif args.command == "fit-nn":
            pipeline.stage_fit_nn(cfg, out)
        elif args.command == "integrate":
            x0 = None
            if args.x0:
                x0 = [float(tok) for tok in args.x0.split(",")]
            pipeline.stage_integrate(cfg, out, args.model, x0=x0,
                                     n_steps=args.steps, h=args.h, p=args.p)
        elif args.command == "free-energy":
            pipeline.stage_free_energy(cfg, out)
        elif args.command == "compare":
            pipeline.stage_compare(cfg, out)
        elif args.command == "uq":
            pipeline.stage_uq(cfg, out)
        elif args.command == "report":
            pipeline.stage_report(cfg, out, external_paths=args.external)
        else:  # pragma: no cover - argparse enforces choices
            raise ValueError(f"unknown command {args.command!r}")
        return 0
    except Exception as exc:
        record = {"error": type(exc).__name__, "message": str(exc),
                  "command": getattr(args, "command", None)}
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
