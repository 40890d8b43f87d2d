"""Command line front end.

Subcommands: ``run`` executes a scenario config and writes its artifacts,
``gen-topology`` emits a standalone topology file a scenario can load, and
``audit`` runs a world and checks every structural invariant. All logging
goes to stderr (verbosity from the UIPSIM_LOG environment variable:
error, info, or debug); machine-readable output goes only to files.

Exit codes: 0 success, 1 protocol failure or audit violation, 2 bad
configuration, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import load_config
from .errors import ConfigError, UipsimError
from .scenario import (
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_OK,
    SNAPSHOT_FORMAT,
    run_audit,
    run_parallel_seeds,
    run_scenario,
)
from .underlay import TOPOLOGY_KINDS, TopologySpec, build_topology

logger = logging.getLogger(__name__)

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    raw = os.environ.get("UIPSIM_LOG", "error").strip().lower()
    level = _LOG_LEVELS.get(raw, logging.ERROR)
    logging.basicConfig(
        stream=sys.stderr,
        level=level,
        format="%(levelname)s %(name)s: %(message)s",
    )


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uipsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute a scenario config")
    run_p.add_argument("--config", required=True, help="path to scenario JSON")
    run_p.add_argument("--output", help="output directory (overrides config)")
    run_p.add_argument(
        "--parallel-seeds",
        help="comma-separated seeds; one independent run per seed in worker processes",
    )

    gen_p = sub.add_parser("gen-topology", help="generate a topology file")
    gen_p.add_argument("--kind", required=True, choices=[k for k in TOPOLOGY_KINDS if k != "file"])
    gen_p.add_argument("--n", type=int, required=True)
    gen_p.add_argument("--p", type=float)
    gen_p.add_argument("--m", type=int)
    gen_p.add_argument("--chords", type=int)
    gen_p.add_argument("--clusters", type=int)
    gen_p.add_argument("--gateways", type=int)
    gen_p.add_argument("--seed", type=int, required=True)
    gen_p.add_argument("--out", required=True)

    audit_p = sub.add_parser("audit", help="run a world and audit invariants")
    audit_p.add_argument("--config", required=True)
    audit_p.add_argument("--output", help="directory for audit.json")

    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    if args.parallel_seeds:
        try:
            seeds = [int(s) for s in args.parallel_seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"--parallel-seeds must be comma-separated integers, got {args.parallel_seeds!r}")
        if not seeds:
            raise ConfigError("--parallel-seeds given but empty")
        cfg = load_config(args.config)  # validate before forking workers
        out = args.output or cfg.output or "uipsim-out"
        return run_parallel_seeds(args.config, seeds, out)
    cfg = load_config(args.config)
    code, _ = run_scenario(cfg, args.output)
    return code


def _cmd_gen_topology(args: argparse.Namespace) -> int:
    spec = TopologySpec(
        kind=args.kind,
        n=args.n,
        seed=args.seed,
        p=args.p,
        chords=args.chords,
        m=args.m,
        clusters=args.clusters,
        gateways=args.gateways,
    )
    underlay = build_topology(spec)
    data = underlay.snapshot()
    data["format"] = SNAPSHOT_FORMAT
    data["id_bits"] = None
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    with open(args.out, "w") as fh:
        json.dump(data, fh, sort_keys=True, indent=2)
        fh.write("\n")
    logger.info(
        "wrote %s: %d nodes, %d channels", args.out, underlay.n, len(list(underlay.channels()))
    )
    return EXIT_OK


def _cmd_audit(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    return run_audit(cfg, args.output)


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "gen-topology":
            return _cmd_gen_topology(args)
        if args.command == "audit":
            return _cmd_audit(args)
        parser.error(f"unknown command {args.command!r}")
    except ConfigError as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        logger.error("%s", exc)
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except UipsimError as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
