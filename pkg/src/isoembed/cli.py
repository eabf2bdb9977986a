"""Command line front end: ``isoembed <command> --config run.json``.

Exit codes: 0 on success, 1 when a solve stage fails its own checks, 2 when
the configuration is unusable.  Stage failures still leave a partial report
under out_dir."""

from __future__ import annotations

import argparse
import sys

from .pipeline import (
    ConfigError,
    RunConfig,
    run_decompose,
    run_embed,
    run_family,
    run_oscillate,
    run_perturb,
    run_poisson_check,
    run_verify,
)

_RUNNERS = {
    "embed": (run_embed, "declared gain to embedded map, full chain"),
    "family": (run_family, "track a curve of gains over a time window"),
    "decompose": (run_decompose, "write the positive rank-one decomposition"),
    "oscillate": (run_oscillate, "stage one primitive and report its defect decay"),
    "perturb": (run_perturb, "solve one localized perturbation problem"),
    "poisson-check": (run_poisson_check, "refinement study of the Dirichlet solver"),
    "verify": (run_verify, "re-measure a written final_map.csv against its target"),
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="isoembed",
        description="isometric-embedding constructions on desk-scale ball grids",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, blurb) in _RUNNERS.items():
        cmd = sub.add_parser(name, help=blurb)
        cmd.add_argument("--config", required=True, metavar="PATH",
                         help="JSON run configuration")
    return parser


def cli_main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    runner = _RUNNERS[args.command][0]
    try:
        config = RunConfig.from_json(args.config)
        report = runner(config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FloatingPointError) as exc:
        print(f"stage error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"stage error: {exc}", file=sys.stderr)
        return 1
    print(f"{args.command}: ok")
    for key in sorted(report.final):
        value = report.final[key]
        if isinstance(value, float):
            print(f"  {key} = {value:.6g}")
        elif isinstance(value, (int, str, bool)):
            print(f"  {key} = {value}")
    print(f"report: {report.path}")
    return 0


if __name__ == "__main__":
    sys.exit(cli_main())
