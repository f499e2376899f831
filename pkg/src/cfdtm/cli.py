"""Command-line entry points.

  bench run --config FILE [overrides]     drive the microbenchmark
  bench scenario NAME                     replay a scripted interleaving
  bench check HISTORY                     verify a recorded history file
  bench serve --config FILE --node-index I --listen HOST:PORT
                                          host one node's objects over TCP

Config files are key=value lines ('#' starts a comment); any flag given on
the command line overrides the file.
"""

import argparse
import signal
import sys
import time

from . import bench, history
from .node import NodeServer
from .objects import reference_cell, stock_def
from .transport import TcpNodeHost

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def parse_config_file(path: str) -> dict:
    values: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def _coerce(value: str, template):
    if isinstance(template, bool):
        low = value.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if template is None or isinstance(template, float):
        return float(value)
    if isinstance(template, int):
        return int(value)
    if isinstance(template, list):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


def build_config(args) -> bench.BenchConfig:
    cfg = bench.BenchConfig()
    raw = parse_config_file(args.config) if args.config else {}
    for key, value in raw.items():
        if not hasattr(cfg, key):
            raise ValueError(f"unknown config key {key!r}")
        setattr(cfg, key, _coerce(value, getattr(cfg, key)))
    for key in ("algorithm", "seed", "nodes", "transport", "op_latency_ms",
                "txns_per_client", "read_ratio"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    if getattr(args, "clients", None) is not None:
        cfg.clients_per_node = max(1, args.clients // cfg.nodes)
    if getattr(args, "node_addrs", None):
        cfg.node_addrs = args.node_addrs
        cfg.transport = "tcp"
    if getattr(args, "record_history", None):
        cfg.record_history = True
    return cfg


def cmd_run(args) -> int:
    cfg = build_config(args)
    report = bench.run_benchmark(cfg)
    print(f"algorithm={report.algorithm} clients={report.clients} "
          f"read_ratio={report.read_ratio:g} committed={report.committed} "
          f"throughput={report.throughput_ops_s:.1f} ops/s "
          f"p50={report.p50_ms:.1f}ms p99={report.p99_ms:.1f}ms "
          f"manual={report.manual_aborts} forced={report.forced_aborts} "
          f"wait={report.wait_seconds:.2f}s")
    if args.csv:
        bench.emit_csv([report], args.csv)
        print(f"wrote {args.csv}")
    if args.record_history:
        meta = {
            "init": {oid: {"value": 0} for _, oid in bench.hosted_objects(cfg)},
            "kinds": {oid: f"refcell:{cfg.op_latency_ms / 1000.0}"
                      if cfg.op_latency_ms else "refcell"
                      for _, oid in bench.hosted_objects(cfg)},
        }
        history.write_history(args.record_history, report.events, meta)
        print(f"wrote {args.record_history}")
    return 0


def cmd_scenario(args) -> int:
    result = bench.run_scenario(args.name)
    print(result.report())
    return 0 if result.passed else 1


def cmd_check(args) -> int:
    events, meta = history.read_history(args.history)
    failures = 0

    violations = history.check_version_order(events)
    print(f"version order: {'ok' if not violations else 'VIOLATIONS'}")
    for violation in violations[:20]:
        print(f"  {violation}")
    failures += bool(violations)

    report = history.check_abort_accounting(events)
    print(f"abort accounting: commits={report.commits} manual={report.manual_aborts} "
          f"forced={report.forced_aborts} "
          f"{'ok' if report.ok() else 'VIOLATIONS'}")
    for violation in report.violations:
        print(f"  {violation}")
    failures += not report.ok()

    if meta.get("init") and meta.get("kinds"):
        defs = {oid: stock_def(kind) for oid, kind in meta["kinds"].items()}
        result = history.check_serializable(events, meta["init"], defs,
                                            final_states=meta.get("final"))
        print(f"serializability: {result.status}"
              + (f" (order: {' '.join(result.order)})" if result.order else "")
              + (f" ({result.detail})" if result.detail else ""))
        failures += result.status == "violation"
    else:
        print("serializability: skipped (no initial states in file)")
    return 1 if failures else 0


def cmd_serve(args) -> int:
    raw = parse_config_file(args.config) if args.config else {}
    cfg = bench.BenchConfig()
    for key, value in raw.items():
        if hasattr(cfg, key):
            setattr(cfg, key, _coerce(value, getattr(cfg, key)))
    listen = args.listen or raw.get("listen", "127.0.0.1:0")
    node_index = args.node_index if args.node_index is not None else int(raw.get("node_index", 0))
    lease = args.heartbeat_timeout if args.heartbeat_timeout is not None else \
        float(raw.get("heartbeat_timeout", 0)) or None

    node = NodeServer(f"n{node_index}", wait_timeout=cfg.wait_timeout,
                      lease_timeout=lease,
                      sweep_interval=min(0.5, (lease or 1.0) / 4))
    latency = cfg.op_latency_ms / 1000.0
    for idx, oid in bench.hosted_objects(cfg):
        if idx == node_index:
            node.register(oid, reference_cell(latency))
    host = TcpNodeHost(node, listen)
    print(f"node n{node_index} listening on {host.address}", flush=True)

    stop = []
    signal.signal(signal.SIGTERM, lambda *a: stop.append(1))
    signal.signal(signal.SIGINT, lambda *a: stop.append(1))
    while not stop:
        time.sleep(0.2)
    host.close()
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="bench",
                                     description="transactional toolkit benchmark driver")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run the microbenchmark")
    run_p.add_argument("--config")
    run_p.add_argument("--algorithm")
    run_p.add_argument("--clients", type=int)
    run_p.add_argument("--seed", type=int)
    run_p.add_argument("--nodes", type=int)
    run_p.add_argument("--transport", choices=["local", "tcp"])
    run_p.add_argument("--node-addrs", nargs="*", dest="node_addrs")
    run_p.add_argument("--op-latency-ms", type=float, dest="op_latency_ms")
    run_p.add_argument("--txns-per-client", type=int, dest="txns_per_client")
    run_p.add_argument("--read-ratio", type=float, dest="read_ratio")
    run_p.add_argument("--csv")
    run_p.add_argument("--record-history", dest="record_history")
    run_p.set_defaults(fn=cmd_run)

    scen_p = sub.add_parser("scenario", help="replay a scripted interleaving")
    scen_p.add_argument("name", choices=bench.SCENARIO_NAMES)
    scen_p.set_defaults(fn=cmd_scenario)

    check_p = sub.add_parser("check", help="verify a recorded history file")
    check_p.add_argument("history")
    check_p.set_defaults(fn=cmd_check)

    serve_p = sub.add_parser("serve", help="host one node's objects over TCP")
    serve_p.add_argument("--config")
    serve_p.add_argument("--listen")
    serve_p.add_argument("--node-index", type=int, dest="node_index")
    serve_p.add_argument("--heartbeat-timeout", type=float, dest="heartbeat_timeout")
    serve_p.set_defaults(fn=cmd_serve)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
