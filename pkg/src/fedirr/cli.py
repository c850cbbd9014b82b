"""``fedirr`` command line: serve, client, demo, compare."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import config as config_mod
from .errors import BindError, ConfigError, FedIrrError, InvalidInput, ServerUnreachable

log = logging.getLogger("fedirr")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_CONVERGED = 2


def _load_config(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.resolve(getattr(args, "config", None))
    overrides = {}
    for name in ("nodes", "ticks", "seed", "scenario", "policy"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if overrides:
        try:
            cfg = replace(cfg, **overrides)
        except InvalidInput as exc:
            raise ConfigError(f"command line: {exc}") from None
    return cfg


def cmd_serve(args) -> int:
    from .client import FEATURE_DIM, FEATURE_NAMES
    from .experiment import validation_set
    from .server import AggregationServer, load_latest

    cfg = _load_config(args)
    listen = args.listen or cfg.server.listen
    config_mod.parse_addr(listen)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    initial = load_latest(out).params() if args.resume else None
    expected = args.expect or cfg.nodes

    server = AggregationServer(FEATURE_DIM, cfg.train, listen=listen, out_dir=out,
                               deadline_s=cfg.server.deadline_s, validation=validation_set(cfg),
                               feature_names=FEATURE_NAMES, initial=initial)
    with server:
        server.bind()
        print(f"listening on {server.address}", flush=True)
        registered = server.wait_for_clients(expected, cfg.server.registration_timeout_s)
        if registered == 0:
            print("error: no clients registered before the timeout", file=sys.stderr)
            return EXIT_ERROR
        result = server.run_training()
    final = result.final
    print(f"round={final.round} converged={str(result.converged).lower()} "
          f"weights={','.join(f'{w:.6g}' for w in final.weights)}")
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def cmd_client(args) -> int:
    from .alerts import AlertDispatcher, SinkConfig
    from .client import run_client, write_telemetry

    cfg = _load_config(args)
    sinks = list(cfg.sinks) or [SinkConfig(kind="console")]
    dispatcher = AlertDispatcher(sinks, dt_hours=cfg.dt_hours)
    try:
        result = run_client(cfg, args.node_id, server=args.server, offline=args.offline,
                            dispatcher=dispatcher, retry_attempts=args.retries)
    except ServerUnreachable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    node = result.node
    if args.telemetry:
        write_telemetry(args.telemetry, node.records)
    led = node.ledger
    print(f"node={node.node_id} ticks={node.tick} rounds={result.rounds_seen} "
          f"applied_liters={led.applied_liters:.3f} wasted_liters={led.wasted_liters:.3f}")
    return EXIT_OK


def cmd_demo(args) -> int:
    from .experiment import run_demo

    cfg = _load_config(args)
    result = run_demo(cfg, args.out, figures=not args.no_figures)
    print((Path(args.out) / "report.txt").read_text(encoding="utf-8"), end="")
    return EXIT_OK


def cmd_compare(args) -> int:
    from .report import compare_runs, write_comparison

    for run in (args.run_a, args.run_b):
        if not (Path(run) / "report.csv").is_file():
            print(f"error: {run}: no report.csv (not a run directory?)", file=sys.stderr)
            return EXIT_ERROR
    rows = compare_runs(args.run_a, args.run_b)
    text = write_comparison(rows, args.run_a, args.run_b, args.out, figures=not args.no_figures)
    print(text, end="")
    return EXIT_OK


def _add_overrides(p: argparse.ArgumentParser, policy=True) -> None:
    p.add_argument("--scenario", choices=("dry-spell", "rain-heavy", "alternating"))
    p.add_argument("--seed", type=int)
    if policy:
        p.add_argument("--policy", choices=config_mod.POLICIES)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedirr", description="Federated smart-irrigation simulator.")
    parser.add_argument("--print-default-config", action="store_true",
                        help="print the default JSON config and exit")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command")

    cfg_help = f"JSON config file (default: ${config_mod.CONFIG_ENV}, else built-in defaults)"

    p = sub.add_parser("serve", help="run the aggregation server")
    p.add_argument("--config", help=cfg_help)
    p.add_argument("--listen", help="host:port (default from config, 127.0.0.1:7070)")
    p.add_argument("--out", default="checkpoints", help="checkpoint directory")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    p.add_argument("--expect", type=int, help="clients to wait for (default: config nodes)")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("client", help="run one edge node")
    p.add_argument("--config", help=cfg_help)
    p.add_argument("--server", help="host:port of the server")
    p.add_argument("--node-id", default="node-01")
    _add_overrides(p)
    p.add_argument("--ticks", type=int)
    p.add_argument("--telemetry", help="write telemetry CSV here")
    p.add_argument("--offline", action="store_true", help="never contact a server")
    p.add_argument("--retries", type=int, default=3)
    p.set_defaults(func=cmd_client)

    p = sub.add_parser("demo", help="server and all nodes in one process")
    p.add_argument("--config", help=cfg_help)
    p.add_argument("--out", default="runs/demo", help="run directory")
    p.add_argument("--nodes", type=int)
    p.add_argument("--ticks", type=int)
    _add_overrides(p)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("compare", help="water comparison of two run directories")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.add_argument("--out", default="compare", help="output directory")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.print_default_config:
        sys.stdout.write(config_mod.dumps(config_mod.ExperimentConfig()))
        return EXIT_OK
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_ERROR
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
    except BindError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (FedIrrError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
