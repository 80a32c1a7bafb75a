"""Command-line front end.

One binary, four subcommands: serve the platform over HTTP, generate a
device corpus, run the scripted neighbourhood scenario, or run the
instance-pool latency benchmark. Every subcommand exits 0 on success,
1 on a runtime failure, 2 on a usage error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from typing import List, Optional

from .devices import generate_synthetic_corpus
from .model import PlatformError
from .pool import CSV_HEADER, InstancePoolConfig, emit_latency_csv
from .scenario import (
    ScenarioError,
    load_config,
    render_report,
    run_case_study,
    summarize,
)
from .serve import serve


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridvo",
        description="Smart-grid device virtualization platform:"
                    " virtual objects, aggregate view engines, services,"
                    " and a pool-scaling benchmark.")
    parser.add_argument("--seed", type=int, default=None,
                        help="seed for all generated values (default 0;"
                             " scenario falls back to its config's seed)")
    parser.add_argument("--log-level", default="warning",
                        choices=["debug", "info", "warning", "error"],
                        help="log verbosity (default warning)")
    clock = parser.add_mutually_exclusive_group()
    clock.add_argument("--sim-clock", action="store_true", default=True,
                       help="advance time from observation timestamps"
                            " (default)")
    clock.add_argument("--wall-clock", dest="sim_clock",
                       action="store_false",
                       help="tick once a second from the system clock"
                            " (serve only)")

    sub = parser.add_subparsers(dest="command", metavar="command")

    p_serve = sub.add_parser(
        "serve", help="serve every platform endpoint from one port")
    p_serve.add_argument("--bind", default="127.0.0.1:8099",
                         metavar="HOST:PORT",
                         help="listen address (default 127.0.0.1:8099)")
    p_serve.add_argument("--scenario", metavar="FILE",
                         help="preload virtual objects and grants from a"
                              " scenario config")
    p_serve.add_argument("--layer", default="all",
                         choices=["all", "vo", "me", "registry"],
                         help="serve only one layer's routes (default all)")
    p_serve.add_argument("--snapshot", metavar="FILE",
                         default="gridvo-snapshot.json",
                         help="state summary written on shutdown"
                              " (default gridvo-snapshot.json)")

    p_gen = sub.add_parser(
        "gen", help="write a deterministic device CSV corpus")
    p_gen.add_argument("--homes", type=int, default=2,
                       help="number of homes, each a meter plus a weather"
                            " unit (default 2)")
    p_gen.add_argument("--minutes", type=int, default=60,
                       help="readings per device (default 60)")
    p_gen.add_argument("--out", required=True, metavar="DIR",
                       help="output directory")

    p_scn = sub.add_parser(
        "scenario", help="run the scripted neighbourhood case study")
    p_scn.add_argument("--config", metavar="FILE",
                       help="topology TOML (default: bundled two-home"
                            " neighbourhood)")
    p_scn.add_argument("--corpus", metavar="DIR",
                       help="replay this corpus instead of generating one")
    p_scn.add_argument("--out", metavar="FILE",
                       default="scenario-report.json",
                       help="report path (default scenario-report.json)")

    p_bench = sub.add_parser(
        "bench", help="instance-pool latency benchmark")
    p_bench.add_argument("--instances", metavar="LIST",
                         help="comma-separated fixed pool sizes,"
                              " e.g. 1,2,5,10")
    p_bench.add_argument("--dynamic", metavar="MIN:MAX",
                         help="add an autoscaling pool, e.g. 0:10")
    p_bench.add_argument("--batch", type=int, default=400,
                         help="requests arriving together each minute"
                              " (default 400)")
    p_bench.add_argument("--minutes", type=int, default=5,
                         help="minutes to simulate (default 5)")
    p_bench.add_argument("--out", metavar="CSV",
                         help="also write the table to this file")

    return parser


def cmd_serve(args: argparse.Namespace) -> int:
    return serve(args.bind, seed=args.seed or 0, layer=args.layer,
                 wall_clock=not args.sim_clock,
                 snapshot_path=args.snapshot,
                 scenario_config=args.scenario)


def cmd_gen(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    if args.homes < 1:
        parser.error(f"--homes must be >= 1, got {args.homes}")
    if args.minutes < 1:
        parser.error(f"--minutes must be >= 1, got {args.minutes}")
    manifest = generate_synthetic_corpus(args.seed or 0, args.homes,
                                         args.minutes, args.out)
    for entry in manifest["files"]:
        print(f"{entry['path']}: {entry['rows']} rows")
    print(f"manifest: {args.out}/manifest.json")
    return 0


def cmd_scenario(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    report = run_case_study(config, corpus_dir=args.corpus, seed=args.seed,
                            reuse_corpus=args.corpus is not None)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(render_report(report))
    print(summarize(report))
    print(f"report: {args.out}")
    return 0


def cmd_bench(args: argparse.Namespace,
              parser: argparse.ArgumentParser) -> int:
    configs: List[InstancePoolConfig] = []
    if args.instances:
        for part in args.instances.split(","):
            try:
                n = int(part)
            except ValueError:
                parser.error(f"--instances expects integers, got {part!r}")
            if n < 1:
                parser.error(f"--instances entries must be >= 1, got {n}")
            configs.append(InstancePoolConfig.static(n))
    if args.dynamic:
        lo, sep, hi = args.dynamic.partition(":")
        if not sep:
            parser.error("--dynamic expects MIN:MAX, e.g. 0:10")
        try:
            configs.append(InstancePoolConfig.dynamic(int(lo), int(hi)))
        except ValueError:
            parser.error(f"--dynamic expects integers, got {args.dynamic!r}")
    if not configs:
        parser.error("nothing to benchmark: pass --instances and/or"
                     " --dynamic")
    if args.batch < 0:
        parser.error(f"--batch must be >= 0, got {args.batch}")
    if args.minutes < 1:
        parser.error(f"--minutes must be >= 1, got {args.minutes}")
    text = emit_latency_csv(configs, args.out, args.batch, args.minutes)
    sys.stdout.write(text)
    if args.out:
        print(f"written: {args.out}", file=sys.stderr)
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(),
                        format="%(asctime)s %(name)s %(levelname)s"
                               " %(message)s")
    if args.command is None:
        parser.print_help()
        return 2
    try:
        if args.command == "serve":
            return cmd_serve(args)
        if args.command == "gen":
            return cmd_gen(args, parser)
        if args.command == "scenario":
            return cmd_scenario(args)
        if args.command == "bench":
            return cmd_bench(args, parser)
    except ScenarioError as e:
        print(f"gridvo {args.command}: {e}", file=sys.stderr)
        return 1
    except PlatformError as e:
        print(f"gridvo {args.command}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"gridvo {args.command}: {e}", file=sys.stderr)
        return 1
    raise AssertionError(f"unrouted command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
