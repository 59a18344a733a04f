"""Single entry binary: node, registry, validation, config, and harness.

Exit codes: 0 success, 1 domain error (bad descriptor, failed run, occupied
port), 2 usage error. Human logs go to stderr; stdout carries only
machine-readable output (the listening announcement, validation summaries,
report locations).
"""
from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
import time
from pathlib import Path

from .config import NodeConfig, resolve_config
from .core import EngineError
from .engine import VirtualSensorConfig
from .node import Node
from .plugins import parse_descriptor_file

log = logging.getLogger(__name__)

_NODE_FLAGS = [
    ("--host", str, "bind address"),
    ("--port", int, "listen port (0 = ephemeral, announced on stdout)"),
    ("--node-id", str, "node identity in the registry"),
    ("--plugins-dir", str, "directory watched for *.plugin descriptors"),
    ("--vsensors-dir", str, "directory of *.vsensor configs loaded at start"),
    ("--data-dir", str, "root for journals and local state"),
    ("--registry", str, "registry address host:port"),
    ("--group-tag", str, "community grouping tag for registry lookups"),
    ("--log-level", str, "DEBUG|INFO|WARNING|ERROR"),
    ("--history-size", int, "default per-sensor history capacity"),
    ("--buffer-capacity", int, "per-subscription pending buffer capacity"),
    ("--ttl-s", int, "registry registration ttl seconds"),
    ("--refresh-s", int, "registry refresh period seconds"),
    ("--admission-workers", int, "constrained role: concurrent connection admissions"),
    ("--admission-delay-ms", int, "constrained role: per-connection setup delay"),
    ("--admission-timeout-ms", int, "constrained role: drop connections waiting longer"),
]


def _add_node_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file (flags and env override it)")
    for flag, ftype, help_text in _NODE_FLAGS:
        parser.add_argument(flag, type=ftype, help=help_text, default=None)


def _flags_dict(args: argparse.Namespace) -> dict:
    return {
        flag.lstrip("-").replace("-", "_"): getattr(
            args, flag.lstrip("-").replace("-", "_")
        )
        for flag, _, _ in _NODE_FLAGS
    }


def _setup_logging(level_name: str) -> None:
    level = getattr(logging, level_name.upper(), None)
    if not isinstance(level, int):
        from .core import invalid_query

        raise invalid_query(f"unknown log level {level_name!r}")
    logging.basicConfig(
        stream=sys.stderr,
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _serve(cfg: NodeConfig, serve_registry: bool) -> int:
    node = Node(cfg, serve_registry=serve_registry)
    stop = threading.Event()

    def _on_signal(signum, frame):
        stop.set()

    signal.signal(signal.SIGTERM, _on_signal)
    signal.signal(signal.SIGINT, _on_signal)
    node.start()
    print(node.announce(), flush=True)
    try:
        # A handler that fires inside wait()'s flag-check window would be
        # lost by an unbounded wait; the timeout re-checks the flag.
        while not stop.wait(timeout=1.0):
            pass
    finally:
        node.stop()
    return 0


def _cmd_serve(args: argparse.Namespace, serve_registry: bool) -> int:
    cfg = resolve_config(flags=_flags_dict(args), config_file=args.config)
    _setup_logging(cfg.log_level)
    return _serve(cfg, serve_registry)


def _cmd_plugin_validate(args: argparse.Namespace) -> int:
    descriptor = parse_descriptor_file(Path(args.file))
    print(
        json.dumps(
            {
                "ok": True,
                "plugin_id": descriptor.plugin_id,
                "fields": [f.name for f in descriptor.output],
                "min_sampling_interval_ms": descriptor.min_sampling_interval_ms,
            },
            sort_keys=True,
        )
    )
    return 0


def _cmd_vsensor_validate(args: argparse.Namespace) -> int:
    path = Path(args.file)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        print(f"error: {path}: {exc}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as exc:
        print(f"error: {path}: not valid JSON: {exc}", file=sys.stderr)
        return 1
    config = VirtualSensorConfig.from_obj(obj)
    print(
        json.dumps(
            {
                "ok": True,
                "name": config.name,
                "plugin_id": config.plugin_id,
                "sampling_interval_ms": config.sampling_interval_ms,
                "history_size": config.history_size,
                "processors": len(config.processors),
            },
            sort_keys=True,
        )
    )
    return 0


def _cmd_config_show(args: argparse.Namespace) -> int:
    cfg = resolve_config(flags=_flags_dict(args), config_file=args.config)
    print(json.dumps(cfg.to_obj(), indent=2, sort_keys=True))
    return 0


def _cmd_harness_run(args: argparse.Namespace) -> int:
    from .harness.runner import run_scenario
    from .harness.scenario import load_scenario, with_overrides

    _setup_logging(args.log_level)
    cfg = load_scenario(args.scenario)
    overrides = {}
    if args.duration_s is not None:
        overrides["duration_s"] = args.duration_s
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = with_overrides(cfg, **overrides)
    if args.out:
        run_dir = Path(args.out)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
        run_dir = Path("runs") / f"{cfg.name}-{stamp}"
    result = run_scenario(cfg, run_dir, log_level=args.child_log_level)
    summary = {
        "run_dir": str(result.run_dir),
        "status": result.status,
        "total_round_trips": result.report.total_round_trips,
    }
    if result.report.total_round_trips > 0:
        from .harness.metrics import time_per_request

        summary["time_per_request_ms"] = round(time_per_request(result.report), 3)
    print(json.dumps(summary, sort_keys=True))
    return 0 if result.ok else 1


def _cmd_harness_report(args: argparse.Namespace) -> int:
    from .harness.report import write_report
    from .harness.runner import load_run

    _setup_logging(args.log_level)
    report = load_run(args.run_dir)
    against = load_run(args.against) if args.against else None
    paths = write_report(report, args.run_dir, against=against)
    print(json.dumps({"written": [str(p) for p in paths]}, sort_keys=True))
    return 0


def _cmd_harness_list(args: argparse.Namespace) -> int:
    from .harness.scenario import bundled_scenarios

    for name, cfg in sorted(bundled_scenarios().items()):
        print(
            f"{name}: topology={cfg.topology.value} mode={cfg.mode} "
            f"clients={cfg.client_count}x{cfg.sensors_per_client} "
            f"requests={cfg.request_count} duration={cfg.duration_s}s"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mosden",
        description="Distributed opportunistic-sensing engine: node, registry, and benchmark harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    node = sub.add_parser("node", help="sensor-hosting node commands")
    node_sub = node.add_subparsers(dest="node_command", required=True)
    node_serve = node_sub.add_parser("serve", help="run a node until SIGTERM")
    _add_node_flags(node_serve)

    registry = sub.add_parser("registry", help="registry service commands")
    registry_sub = registry.add_subparsers(dest="registry_command", required=True)
    registry_serve = registry_sub.add_parser("serve", help="run the registry until SIGTERM")
    _add_node_flags(registry_serve)

    plugin = sub.add_parser("plugin", help="plugin descriptor tools")
    plugin_sub = plugin.add_subparsers(dest="plugin_command", required=True)
    plugin_validate = plugin_sub.add_parser("validate", help="check one descriptor file")
    plugin_validate.add_argument("file")

    vsensor = sub.add_parser("vsensor", help="virtual-sensor config tools")
    vsensor_sub = vsensor.add_subparsers(dest="vsensor_command", required=True)
    vsensor_validate = vsensor_sub.add_parser("validate", help="check one config file")
    vsensor_validate.add_argument("file")

    config = sub.add_parser("config", help="configuration tools")
    config_sub = config.add_subparsers(dest="config_command", required=True)
    config_show = config_sub.add_parser("show", help="print the resolved configuration")
    _add_node_flags(config_show)

    harness = sub.add_parser("harness", help="benchmark harness")
    harness_sub = harness.add_subparsers(dest="harness_command", required=True)
    run = harness_sub.add_parser("run", help="execute a scenario")
    run.add_argument("--scenario", required=True, help="bundled name or JSON file")
    run.add_argument("--out", help="run directory (default runs/<name>-<utc>)")
    run.add_argument("--duration-s", type=int, default=None, help="override duration")
    run.add_argument("--seed", type=int, default=None, help="override seed")
    run.add_argument("--log-level", default="INFO")
    run.add_argument(
        "--child-log-level", default="WARNING", help="log level passed to spawned nodes"
    )
    rep = harness_sub.add_parser("report", help="re-render reports from raw artifacts")
    rep.add_argument("run_dir")
    rep.add_argument(
        "--against", help="second run directory for cross-mode comparison rows"
    )
    rep.add_argument("--log-level", default="INFO")
    harness_sub.add_parser("list-scenarios", help="print bundled scenarios")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "node":
            return _cmd_serve(args, serve_registry=False)
        if args.command == "registry":
            return _cmd_serve(args, serve_registry=True)
        if args.command == "plugin":
            return _cmd_plugin_validate(args)
        if args.command == "vsensor":
            return _cmd_vsensor_validate(args)
        if args.command == "config":
            return _cmd_config_show(args)
        if args.command == "harness":
            if args.harness_command == "run":
                return _cmd_harness_run(args)
            if args.harness_command == "report":
                return _cmd_harness_report(args)
            return _cmd_harness_list(args)
        parser.print_help(sys.stderr)
        return 2
    except EngineError as exc:
        print(f"error: {exc.kind.value}: {exc.detail}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main(sys.argv[1:]))
