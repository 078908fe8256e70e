"""Command-line entry point: ``porch run ...`` and ``porch report METRICS``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .dataset import DatasetError
from .ledger import HashMode
from .runner import RunConfig, report, run


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="porch", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="execute acquisition cycles")
    r.add_argument("--relays", type=int, default=4, help="number of relay servers (>= 2)")
    r.add_argument("--cycles", type=int, default=10, help="acquisition cycles to run")
    r.add_argument("--period-ms", type=int, default=15000, help="time between cycle starts")
    r.add_argument("--seed", type=int, default=0, help="master seed; PORCH_SEED overrides it")
    r.add_argument("--challenge-lo", type=int, default=0, help="smallest random challenge")
    r.add_argument("--challenge-hi", type=int, default=9, help="largest random challenge")
    r.add_argument("--k-eligible", type=int, default=None,
                   help="relays drawn each cycle as mining candidates (default: all)")
    r.add_argument("--hash-mode", choices=["single", "double"], default="single",
                   help="block hash: SHA-256 or SHA-256 applied twice")
    r.add_argument("--transport", choices=["sim", "tcp"], default="sim",
                   help="virtual-clock simulator or localhost sockets")
    r.add_argument("--latency-ms", type=int, default=1, help="simulated per-link latency")
    r.add_argument("--drop", nargs=2, action="append", metavar=("NODE", "P"), default=[],
                   help="drop every message to or from NODE with probability P (repeatable)")
    r.add_argument("--dataset", default=None, help="bus,quantity,index,base,jitter CSV (default: builtin 9-bus)")
    r.add_argument("--chain-out", default=None, help="write the final chain as JSON")
    r.add_argument("--metrics-out", default=None, help="write per-cycle metrics CSV")
    r.add_argument("--trace-out", default=None, help="write the event trace as JSON lines")
    r.add_argument("--realtime", action="store_true", help="pace the simulator to the wall clock")
    r.add_argument("--base-port", type=int, default=20000,
                   help="first TCP port; 0 lets the OS choose")
    r.add_argument("-v", "--verbose", action="store_true")

    rep = sub.add_parser("report", help="summarise a metrics CSV")
    rep.add_argument("metrics")
    return p


def _config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> RunConfig:
    seed = args.seed
    if os.environ.get("PORCH_SEED"):
        try:
            seed = int(os.environ["PORCH_SEED"])
        except ValueError:
            parser.error("PORCH_SEED must be an integer")
    drop = {}
    for node, p in args.drop:
        try:
            drop[node] = float(p)
        except ValueError:
            parser.error(f"--drop probability {p!r} is not a number")
        if not 0.0 <= drop[node] <= 1.0:
            parser.error("--drop probability must be in [0, 1]")
    try:
        return RunConfig(
            relays=args.relays, cycles=args.cycles, period=args.period_ms, seed=seed,
            challenge_range=(args.challenge_lo, args.challenge_hi), k_eligible=args.k_eligible,
            hash_mode=HashMode(args.hash_mode), transport=args.transport,
            latency=args.latency_ms, drop=drop, dataset=args.dataset,
            chain_out=args.chain_out, metrics_out=args.metrics_out, trace_out=args.trace_out,
            realtime=args.realtime, base_port=args.base_port,
        )
    except ValueError as exc:
        parser.error(str(exc))


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    if args.command == "report":
        try:
            print(report(args.metrics).text())
        except DatasetError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        return 0

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = _config(args, parser)
    known = {"CC", "DA", *(f"R{i}" for i in range(1, cfg.relays + 1))}
    unknown = set(cfg.drop) - known
    if unknown:
        parser.error(f"--drop names unknown node(s): {', '.join(sorted(unknown))}")
    try:
        result = run(cfg)
    except DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    committed = sum(m.committed for m in result.metrics)
    print(f"{committed}/{len(result.metrics)} cycles committed; chain length {len(result.chain)}; "
          f"tip {result.chain.tip.current_hash[:16]}")
    if result.violations:
        print("chain violations: " + ", ".join(map(str, result.violations)), file=sys.stderr)
    if not result.replicas_identical:
        print("replicas diverged", file=sys.stderr)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
