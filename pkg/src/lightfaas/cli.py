"""Command-line entry point: component daemons and the benchmarking harness."""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import sys

from .model import ConfigError, load_config

log = logging.getLogger("lightfaas")


def _run(coro):
    """asyncio.run on uvloop when it is installed."""
    try:
        import uvloop
    except ImportError:
        return asyncio.run(coro)
    uvloop.install()
    return asyncio.run(coro)


def _overrides(pairs: list[str] | None) -> dict[str, str]:
    out = {}
    for p in pairs or []:
        k, sep, v = p.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {p!r}")
        out[k.strip()] = v
    return out


def _run_daemon(args, cls, runner):
    cfg = load_config(cls, args.config, _overrides(args.set))
    try:
        _run(runner(cfg))
    except KeyboardInterrupt:
        pass


def cmd_controlplane(args):
    from .controlplane.server import ControlPlaneConfig, run
    _run_daemon(args, ControlPlaneConfig, run)


def cmd_dataplane(args):
    from .dataplane.server import DataPlaneConfig, run
    _run_daemon(args, DataPlaneConfig, run)


def cmd_worker(args):
    from .worker.daemon import WorkerConfig, run
    _run_daemon(args, WorkerConfig, run)


def cmd_frontend(args):
    from .frontend import FrontendConfig, run
    _run_daemon(args, FrontendConfig, run)


def cmd_generate(args):
    from .harness.trace import GenerateConfig, generate_trace, write_trace
    cfg = GenerateConfig(n_functions=args.functions, duration_s=args.duration, seed=args.seed, profile=args.profile,
                         rate_per_function=args.rate, exec_median_ms=args.exec_median_ms,
                         exec_sigma=args.exec_sigma, exec_max_ms=args.exec_max_ms)
    funcs, invs = generate_trace(cfg)
    write_trace(args.output, invs)
    print(f"wrote {len(invs)} invocations of {len(funcs)} functions to {args.output}")


def cmd_ingest(args):
    from .harness.trace import IngestConfig, ingest_trace, write_trace
    cfg = IngestConfig(start_minute=args.start_minute, end_minute=args.end_minute, n_functions=args.functions,
                       seed=args.seed, exec_max_ms=args.exec_max_ms)
    funcs, invs = ingest_trace(args.invocations, args.durations, args.memory, cfg)
    write_trace(args.output, invs)
    print(f"wrote {len(invs)} invocations of {len(funcs)} functions to {args.output}")


def _write_report(out_dir: str, records, warmup: float) -> dict:
    from .harness import report
    os.makedirs(out_dir, exist_ok=True)
    report.write_records(os.path.join(out_dir, "records.csv"), records)
    s = report.summarize(records, warmup)
    report.write_series(os.path.join(out_dir, "series.csv"), s)
    report.write_function_slowdowns(os.path.join(out_dir, "functions.csv"), s)
    text = report.format_summary(s)
    with open(os.path.join(out_dir, "summary.txt"), "w") as f:
        f.write(text + "\n")
    return s


def cmd_replay(args):
    from .harness.loadgen import ReplayConfig, replay
    from .harness.report import format_summary
    from .harness.trace import read_trace
    invs = read_trace(args.trace)
    cfg = ReplayConfig(entry=args.entry, control_planes=args.control_planes.split(","), timeout=args.timeout,
                       calibrate=not args.no_calibrate, stable_window=args.stable_window,
                       panic_window=args.panic_window, grace=args.grace)
    result = _run(replay(invs, cfg))
    s = _write_report(args.out_dir, result.records, args.warmup)
    with open(os.path.join(args.out_dir, "registration.json"), "w") as f:
        json.dump({"latency_ms": result.registration_ms, "reference_ms": result.reference_ms}, f)
    print(format_summary(s))


def cmd_sweep(args):
    from .harness import sweep
    rates = [float(r) for r in args.rates.split(",")] if args.rates else None
    cps = args.control_planes.split(",")

    def show(step):
        print(json.dumps(step.to_dict()), flush=True)

    if args.mode == "cold":
        cfg = sweep.ColdSweepConfig(entry=args.entry, control_planes=cps, step_duration=args.step_duration)
        if rates:
            cfg.rates = rates
        steps = _run(sweep.cold_sweep(cfg, show))
    else:
        cfg = sweep.WarmConfig(entry=args.entry, control_planes=cps, step_duration=args.step_duration)
        if rates:
            cfg.rates = rates
        steps = _run(sweep.warm_sweep(cfg, show))
    knee = sweep.find_knee(steps)
    print(f"knee: {knee}")
    if args.output:
        import csv
        with open(args.output, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(steps[0].to_dict()), lineterminator="\n")
            w.writeheader()
            for s in steps:
                w.writerow(s.to_dict())


def cmd_faults(args):
    from .harness.cluster import Cluster
    from .harness.faults import inject, parse_schedule
    with open(args.schedule) as f:
        schedule = parse_schedule(f.read())
    cluster = Cluster.attach(args.data_dir)
    events = _run(inject(cluster, schedule))
    cluster.save_state()
    for ev in events:
        print(f"{ev.t:.3f}s {ev.action} {ev.component}")


def cmd_report(args):
    from .harness.report import format_summary, read_records
    records = read_records(args.records)
    s = _write_report(args.out_dir or os.path.dirname(os.path.abspath(args.records)), records, args.warmup)
    print(format_summary(s))


def cmd_cluster(args):
    from .harness.cluster import Cluster, Topology, stop_from_state
    if args.action == "down":
        n = stop_from_state(args.data_dir)
        print(f"stopped {n} components")
        return
    overrides = _overrides(args.set)
    overrides.setdefault("data_dir", args.data_dir)
    topo = load_config(Topology, args.topology, overrides)
    cluster = Cluster(topo)
    cluster.start()
    try:
        st = _run(cluster.wait_ready(args.wait))
    except TimeoutError:
        print("cluster did not become ready; see logs in " + os.path.join(topo.data_dir, "logs"), file=sys.stderr)
        cluster.stop()
        sys.exit(1)
    print(f"cluster up: leader {st['leader']}, entry {cluster.entry_address}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lightfaas", description=__doc__)
    ap.add_argument("--log-level", default=os.environ.get("LIGHTFAAS_LOG", "INFO"))
    sub = ap.add_subparsers(dest="command", required=True)

    for name, fn, help_ in (("controlplane", cmd_controlplane, "run a control plane replica"),
                            ("dataplane", cmd_dataplane, "run a data plane replica"),
                            ("worker", cmd_worker, "run a worker daemon"),
                            ("frontend", cmd_frontend, "run the front-end router")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")
        p.set_defaults(func=fn)

    p = sub.add_parser("generate", help="generate a synthetic trace")
    p.add_argument("--functions", type=int, default=50)
    p.add_argument("--duration", type=float, default=600.0, help="seconds")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--profile", default="poisson", help="poisson | timer | burst:N@T")
    p.add_argument("--rate", type=float, default=0.2, help="mean invocations/s per function")
    p.add_argument("--exec-median-ms", type=float, default=50.0)
    p.add_argument("--exec-sigma", type=float, default=1.0)
    p.add_argument("--exec-max-ms", type=float, default=1000.0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("ingest", help="convert Azure-format CSVs into a trace")
    p.add_argument("--invocations", required=True)
    p.add_argument("--durations", required=True)
    p.add_argument("--memory", required=True)
    p.add_argument("--start-minute", type=int, default=0)
    p.add_argument("--end-minute", type=int, default=1440)
    p.add_argument("--functions", type=int)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--exec-max-ms", type=float)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("replay", help="replay a trace open-loop against a cluster")
    p.add_argument("--trace", required=True)
    p.add_argument("--entry", default="127.0.0.1:20300")
    p.add_argument("--control-planes", default="127.0.0.1:20000,127.0.0.1:20001,127.0.0.1:20002")
    p.add_argument("--out-dir", default="replay-out")
    p.add_argument("--warmup", type=float, default=0.0, help="seconds excluded from the report")
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--stable-window", type=float, default=60.0)
    p.add_argument("--panic-window", type=float, default=6.0)
    p.add_argument("--grace", type=float, default=30.0)
    p.add_argument("--no-calibrate", action="store_true", help="use trace exec times as the reference")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("sweep", help="constant-rate throughput sweep")
    p.add_argument("mode", choices=["cold", "warm"])
    p.add_argument("--entry", default="127.0.0.1:20300")
    p.add_argument("--control-planes", default="127.0.0.1:20000,127.0.0.1:20001,127.0.0.1:20002")
    p.add_argument("--rates", help="comma-separated rates per second")
    p.add_argument("--step-duration", type=float, default=5.0)
    p.add_argument("-o", "--output", help="CSV with one row per rate step")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("faults", help="inject scheduled faults into a cluster started with 'cluster up'")
    p.add_argument("--data-dir", default="cluster-data")
    p.add_argument("--schedule", required=True, help="lines like '60 kill cp-leader' or '30 kill dp1 restart=5'")
    p.set_defaults(func=cmd_faults)

    p = sub.add_parser("report", help="summarize a records CSV")
    p.add_argument("--records", required=True)
    p.add_argument("--warmup", type=float, default=0.0)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("cluster", help="start or stop a local cluster")
    p.add_argument("action", choices=["up", "down"])
    p.add_argument("--topology", help="key = value topology file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--data-dir", default="cluster-data")
    p.add_argument("--wait", type=float, default=30.0, help="seconds to wait for readiness")
    p.set_defaults(func=cmd_cluster)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, ValueError, OSError) as e:
        log.error("%s", e)
        sys.exit(2)


if __name__ == "__main__":
    main()
