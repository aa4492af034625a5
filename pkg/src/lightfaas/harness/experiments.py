"""End-to-end experiments against a freshly spawned local cluster.

Each experiment starts its own cluster, drives load, injects faults where
relevant, and returns the raw measurements; judging them is left to callers
(the acceptance tests and ``scripts/``).
"""

from __future__ import annotations

import asyncio
import collections
import contextlib
import logging
import os
import statistics
import time
from dataclasses import dataclass, field

from ..httpio import UpstreamBrokenError, UpstreamConnectError
from ..model import FunctionSpec, SchedulingConfig, decode_sandbox
from ..wire import RpcError, RpcUnavailable
from . import report, sweep
from .cluster import Cluster, Topology
from .faults import Fault, inject
from .loadgen import Invoker, ReplayConfig, open_loop, register_functions, replay, submit_async
from .report import Outcome
from .trace import GenerateConfig, generate_trace

log = logging.getLogger(__name__)


@contextlib.asynccontextmanager
async def live_cluster(topo: Topology, ready_timeout: float = 60.0):
    cluster = Cluster(topo)
    cluster.start()
    try:
        await cluster.wait_ready(ready_timeout)
        yield cluster
    finally:
        cluster.stop()


async def leader_name(cluster: Cluster, timeout: float = 15.0) -> str:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        name = await cluster.leader()
        if name is not None:
            try:
                st = await cluster.call(name, "cp.stats", timeout=1.0)
                if st.get("operational"):
                    return name
            except (RpcUnavailable, RpcError):
                pass
        await asyncio.sleep(0.05)
    raise TimeoutError("no operational control plane leader")


async def cp_totals(cluster: Cluster) -> tuple[int, int]:
    """(store writes, sandbox creates) summed over live replicas, so a leader change loses nothing."""
    writes = creates = 0
    for name in cluster.components:
        if name.startswith("cp") and cluster.alive(name):
            st = await cluster.call(name, "cp.stats")
            writes += st["store_writes"]
            creates += st["counters"]["creates"]
    return writes, creates


async def wait_warm(inv: Invoker, function: str, timeout: float = 30.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        try:
            resp = await inv.invoke(function)
            if resp.status == 200:
                return
        except (asyncio.TimeoutError, UpstreamConnectError, UpstreamBrokenError):
            pass
        await asyncio.sleep(0.1)
    raise TimeoutError(f"{function} never served")


async def wait_scale(cluster: Cluster, functions: dict[str, int], timeout: float = 30.0) -> dict[str, list[int]]:
    """Wait until each function has at least the given number of ready sandboxes."""
    deadline = time.monotonic() + timeout
    while True:
        name = await leader_name(cluster)
        have = (await cluster.call(name, "cp.sandboxes"))["sandboxes"]
        if all(len(have.get(f, [])) >= n for f, n in functions.items()):
            return have
        if time.monotonic() > deadline:
            raise TimeoutError(f"functions did not reach scale: {functions}")
        await asyncio.sleep(0.2)


def worker_indices(stats: dict) -> dict[str, int]:
    """Worker address -> registry index, from a ``cp.stats`` reply."""
    return {w["key"]: int(i) for i, w in stats["workers"].items()}


async def worker_union(cluster: Cluster) -> set[int]:
    """Oracle: the sandboxes workers report running, asked of each directly."""
    ids = set()
    for name in cluster.components:
        if name.startswith("w") and cluster.alive(name):
            try:
                r = await cluster.call(name, "worker.list")
            except (RpcUnavailable, RpcError):
                continue
            ids.update(decode_sandbox(bytes.fromhex(s["record"])).id for s in r["sandboxes"])
    return ids


# --- cold-start sweep (persistence-free path and throughput shape) ----------

@dataclass
class ColdResult:
    steps: list[sweep.SweepStep]
    knee: float | None
    store_writes: int
    cold_starts: int
    creates: int
    monotone: bool

    def to_dict(self) -> dict:
        return {"knee": self.knee, "store_writes": self.store_writes, "cold_starts": self.cold_starts,
                "creates": self.creates, "monotone": self.monotone, "steps": [s.to_dict() for s in self.steps]}


async def cold_experiment(topo: Topology, rates: list[float], step_duration: float = 5.0,
                          gap: float = 6.0, settle: float = 5.0) -> ColdResult:
    async with live_cluster(topo) as cluster:
        cps = topo.cp_addresses()
        cfg = sweep.ColdSweepConfig(entry=cluster.entry_address, control_planes=cps, rates=list(rates),
                                    step_duration=step_duration, gap=gap)
        # registration writes are expected; count from after it
        await register_functions(cps, sweep.cold_functions(cfg))
        w0, c0 = await cp_totals(cluster)
        steps = await sweep.cold_sweep(cfg, register=False)
        await asyncio.sleep(settle)  # teardowns of the last step
        w1, c1 = await cp_totals(cluster)
        writes, creates = w1 - w0, c1 - c0
    knee = sweep.find_knee(steps)
    return ColdResult(steps, knee, writes, sum(s.ok for s in steps), creates,
                      sweep.monotone_past_knee(steps, knee))


# --- warm path ---------------------------------------------------------------

async def warm_experiment(topo: Topology, rate: float = 500.0, duration: float = 60.0,
                          scale: int = 16, warmup: float = 5.0) -> sweep.SweepStep:
    """Measured window at ``rate`` after an unmeasured ``warmup`` at the same rate,
    which lets the autoscaler settle on the steady-state sandbox count."""
    async with live_cluster(topo) as cluster:
        cfg = sweep.WarmConfig(entry=cluster.entry_address, control_planes=topo.cp_addresses(),
                               min_scale=scale, max_scale=scale)
        await sweep.prepare_warm(cfg)
        await wait_scale(cluster, {cfg.function: scale})
        if warmup > 0:
            await sweep.warm_step(cfg, rate, warmup)
        step, _ = await sweep.warm_step(cfg, rate, duration)
    return step


# --- registration ------------------------------------------------------------

async def registration_experiment(topo: Topology, n: int = 1000) -> list[float]:
    async with live_cluster(topo):
        specs = [FunctionSpec(f"reg-{i:05d}", "echo") for i in range(n)]
        return await register_functions(topo.cp_addresses(), specs)


# --- control plane leader failover -------------------------------------------

@dataclass
class LeaderFailoverResult:
    t_kill: float
    killed: str
    warm_total: int
    warm_failures: int
    cold_total: int
    cold_failures: int
    resume_s: float | None
    recovery: dict
    merged_equal: bool
    merged_diff: tuple[list[int], list[int]]
    recovered_sandboxes: int
    early_recovered_kills: int
    recovered_kills: int


async def leader_failover_experiment(topo: Topology, duration: float = 14.0, kill_at: float = 4.0,
                                     cold_rate: float = 20.0, warm_rate: float = 50.0,
                                     stable_window: float = 5.0) -> LeaderFailoverResult:
    async with live_cluster(topo) as cluster:
        cps = topo.cp_addresses()
        warm_sched = SchedulingConfig(min_scale=2, stable_window=stable_window, panic_window=1.0,
                                      scale_to_zero_grace=1.0)
        cold_sched = SchedulingConfig(stable_window=stable_window, panic_window=1.0, scale_to_zero_grace=1.0)
        n_cold = int(cold_rate * duration)
        cold_names = [f"lf-cold-{i:04d}" for i in range(n_cold)]
        await register_functions(cps, [FunctionSpec("lf-warm", "echo", sched=warm_sched)]
                                 + [FunctionSpec(n, "echo", sched=cold_sched) for n in cold_names])
        inv = Invoker(cluster.entry_address, 30.0)
        await wait_warm(inv, "lf-warm")
        await wait_scale(cluster, {"lf-warm": 2})
        old = await leader_name(cluster)
        old_term = (await cluster.call(old, "cp.stats"))["term"]
        t0 = time.perf_counter() + 0.05

        async def warm_fire(_, t, t0):
            return await inv.timed("lf-warm", t, t0, 1.0, b"w")

        async def cold_fire(name, t, t0):
            return await inv.timed(name, t, t0, 1.0)

        warm_task = asyncio.ensure_future(open_loop(((i / warm_rate, i) for i in range(int(warm_rate * duration))),
                                                    warm_fire, t0))
        cold_task = asyncio.ensure_future(open_loop(((i / cold_rate, n) for i, n in enumerate(cold_names)),
                                                    cold_fire, t0))
        events = await inject(cluster, [Fault(kill_at, "kill", [old])], t0)
        t_kill = events[0].t

        # recovery oracle: compare the new leader's merged view with the workers' own lists
        new = None
        recovery = {}
        deadline = time.monotonic() + 20
        while time.monotonic() < deadline:
            try:
                new = await leader_name(cluster, 5.0)
                st = await cluster.call(new, "cp.stats")
                if st["term"] > old_term and st["recovery"].get("term") == st["term"]:
                    recovery = st["recovery"]
                    break
            except (RpcUnavailable, RpcError, TimeoutError):
                pass
            await asyncio.sleep(0.05)
        equal, diff = False, ([], [])
        for _ in range(40):
            merged = set()
            for ids in (await cluster.call(new, "cp.sandboxes"))["sandboxes"].values():
                merged.update(ids)
            union = await worker_union(cluster)
            diff = (sorted(merged - union), sorted(union - merged))
            if merged == union:
                equal = True
                break
            await asyncio.sleep(0.05)

        warm, _ = await warm_task
        cold, _ = await cold_task
        # stay around for one more window so early downscaling would show up
        await asyncio.sleep(max(0.0, stable_window + 1.0 - (time.perf_counter() - t0 - t_kill)))
        counters = (await cluster.call(new, "cp.stats"))["counters"]
        inv.close()
    after = [r for r in cold if r.t_submit >= t_kill and r.outcome == Outcome.OK]
    resume = min(r.t_response for r in after) - t_kill if after else None
    return LeaderFailoverResult(
        t_kill, old, len(warm), sum(r.outcome != Outcome.OK for r in warm), len(cold),
        sum(r.outcome != Outcome.OK for r in cold), resume, recovery, equal, diff,
        recovery.get("sandboxes", 0), counters["early_recovered_kills"], counters["recovered_kills"])


# --- data plane failover -----------------------------------------------------

@dataclass
class DataPlaneFailoverResult:
    t_kill: float
    total: int
    failures: list[float]  # submit times of failed invocations
    last_failure_after_kill: float | None
    restarted_functions: list[str]
    control_plane_functions: list[str]


async def dataplane_failover_experiment(topo: Topology, victim: str = "dp1", n_functions: int = 30,
                                        rate: float = 100.0, duration: float = 20.0, kill_at: float = 5.0,
                                        restart_after: float = 1.0) -> DataPlaneFailoverResult:
    async with live_cluster(topo) as cluster:
        names = [f"dpf-{i:03d}" for i in range(n_functions)]
        sched = SchedulingConfig(min_scale=1)
        await register_functions(topo.cp_addresses(), [FunctionSpec(n, "echo", sched=sched) for n in names])
        await wait_scale(cluster, {n: 1 for n in names})
        inv = Invoker(cluster.entry_address, 10.0)
        for n in names:
            await wait_warm(inv, n)
        t0 = time.perf_counter() + 0.05

        async def fire(i, t, t0):
            return await inv.timed(names[i % len(names)], t, t0, 1.0)

        load = asyncio.ensure_future(open_loop(((i / rate, i) for i in range(int(rate * duration))), fire, t0))
        events = await inject(cluster, [Fault(kill_at, "kill", [victim], restart_after)], t0)
        t_kill = next(e.t for e in events if e.action == "kill")
        records, _ = await load
        inv.close()
        # the restarted replica must have re-synced its cache from the control plane
        restarted: list[str] = []
        deadline = time.monotonic() + 15
        while time.monotonic() < deadline:
            try:
                restarted = (await cluster.call(victim, "dp.functions"))["functions"]
                if restarted:
                    break
            except (RpcUnavailable, RpcError):
                pass
            await asyncio.sleep(0.1)
        leader = await leader_name(cluster)
        cp_funcs = sorted(f["spec"]["name"] for f in (await cluster.call(leader, "cp.list_functions"))["functions"])
    failures = [r.t_submit for r in records if r.outcome != Outcome.OK]
    last = max(failures) - t_kill if failures else None
    return DataPlaneFailoverResult(t_kill, len(records), failures, last, sorted(restarted), cp_funcs)


# --- worker failure ----------------------------------------------------------

@dataclass
class WorkerFailureResult:
    killed_indices: list[int]
    endpoints_gone_s: float | None
    bound_s: float
    inflight_total: int
    inflight_errors: int
    inflight_timeouts: int
    inflight_error_latency_s: list[float]
    replacements_on_killed: int
    scale_restored: bool
    subsequent_total: int
    subsequent_failures: int


async def _dp_endpoint_workers(cluster: Cluster, functions: list[str]) -> set[int]:
    out = set()
    for name in cluster.components:
        if not name.startswith("dp") or not cluster.alive(name):
            continue
        for f in functions:
            try:
                r = await cluster.call(name, "dp.endpoints", {"function": f})
            except (RpcUnavailable, RpcError):
                continue
            out.update(e["worker"] for e in r["endpoints"])
    return out


async def worker_failure_experiment(topo: Topology, kill: int = 5, n_functions: int = 10, scale: int = 3,
                                    sleep_ms: int = 3000, inflight: int = 10) -> WorkerFailureResult:
    async with live_cluster(topo) as cluster:
        names = [f"wf-{i:03d}" for i in range(n_functions)]
        sched = SchedulingConfig(min_scale=scale)
        slow = SchedulingConfig(min_scale=inflight)
        await register_functions(topo.cp_addresses(), [FunctionSpec(n, "echo", sched=sched) for n in names]
                                 + [FunctionSpec("wf-slow", f"sleep:{sleep_ms}", sched=slow)])
        await wait_scale(cluster, {**{n: scale for n in names}, "wf-slow": inflight})
        leader = await leader_name(cluster)
        index_of = worker_indices(await cluster.call(leader, "cp.stats"))
        victims = [f"w{i}" for i in range(kill)]
        killed = sorted(index_of[cluster.components[v].address] for v in victims)
        inv = Invoker(cluster.entry_address, 30.0)
        for n in names:
            await wait_warm(inv, n)

        t0 = time.perf_counter()

        async def slow_call(i):
            return await inv.timed("wf-slow", 0.0, t0, float(sleep_ms))

        pending = [asyncio.ensure_future(slow_call(i)) for i in range(inflight)]
        await asyncio.sleep(0.5)
        t_kill = time.perf_counter() - t0
        for v in victims:
            cluster.kill(v)
        watched = names + ["wf-slow"]
        gone = None
        deadline = time.monotonic() + 4 * topo.failure_threshold + 5
        while time.monotonic() < deadline:
            if not (await _dp_endpoint_workers(cluster, watched)) & set(killed):
                gone = time.perf_counter() - t0 - t_kill
                break
            await asyncio.sleep(0.05)
        slow = await asyncio.gather(*pending)
        # replacements: every function back at its scale, on survivors only
        restored = True
        try:
            await wait_scale(cluster, {**{n: scale for n in names}, "wf-slow": inflight}, timeout=20.0)
        except TimeoutError:
            restored = False
        leader = await leader_name(cluster)
        placed = (await cluster.call(leader, "cp.sandboxes"))["workers"]
        on_killed = sum(1 for idx in placed.values() if idx in killed)
        after = []
        for n in names:
            for _ in range(3):
                after.append(await inv.timed(n, 0.0, t0, 1.0))
        inv.close()
    errors = [r for r in slow if r.outcome == Outcome.ERROR]
    return WorkerFailureResult(
        killed, gone, 2 * topo.failure_threshold, len(slow), len(errors),
        sum(r.outcome == Outcome.TIMEOUT for r in slow), [r.t_response - t_kill for r in errors],
        on_killed, restored, len(after), sum(r.outcome != Outcome.OK for r in after))


# --- async at-least-once -----------------------------------------------------

@dataclass
class AsyncResult:
    acked: int
    statuses: dict[str, int]
    attempts: dict[int, int]
    unresolved: int
    done_without_execution: int
    retried: int
    duplicated: int
    failed_before_budget: int
    killed: str


def read_exec_log(path: str) -> collections.Counter:
    counts = collections.Counter()
    if os.path.exists(path):
        with open(path) as f:
            for line in f:
                parts = line.split()
                if parts:
                    counts[parts[0]] += 1
    return counts


async def async_experiment(topo: Topology, n: int = 1000, rate: float = 100.0, sleep_ms: int = 200,
                           kill_at: float = 5.0, resolve_timeout: float = 180.0) -> AsyncResult:
    if not topo.exec_log:
        raise ValueError("async experiment needs topology.exec_log")
    if os.path.exists(topo.exec_log):
        os.remove(topo.exec_log)
    async with live_cluster(topo) as cluster:
        fn = "async-fn"
        sched = SchedulingConfig(stable_window=10.0, panic_window=2.0, scale_to_zero_grace=5.0)
        await register_functions(topo.cp_addresses(), [FunctionSpec(fn, f"sleep:{sleep_ms}", sched=sched)])

        async def kill_busiest():
            await asyncio.sleep(kill_at)
            leader = await leader_name(cluster)
            placed = (await cluster.call(leader, "cp.sandboxes"))["workers"]
            index_of = worker_indices(await cluster.call(leader, "cp.stats"))
            by_index = {idx: name for name, c in cluster.components.items() if c.address in index_of
                        for idx in [index_of[c.address]]}
            busiest = collections.Counter(placed.values()).most_common(1)
            victim = by_index[busiest[0][0]] if busiest else "w0"
            cluster.kill(victim)
            return victim

        killer = asyncio.ensure_future(kill_busiest())
        ids = await submit_async(cluster.entry_address, fn, n, rate)
        victim = await killer
        inv = Invoker(cluster.entry_address, 10.0)
        final: dict[str, dict] = {}
        deadline = time.monotonic() + resolve_timeout
        while time.monotonic() < deadline and len(final) < len(ids):
            for rid in ids:
                if rid in final:
                    continue
                try:
                    st = await inv.async_status(fn, rid)
                except (asyncio.TimeoutError, UpstreamConnectError, UpstreamBrokenError):
                    continue
                if st and st["status"] in ("Done", "Failed"):
                    final[rid] = st
            if len(final) < len(ids):
                await asyncio.sleep(1.0)
        inv.close()
    execs = read_exec_log(topo.exec_log)
    statuses = collections.Counter(st["status"] for st in final.values())
    attempts = collections.Counter(st["attempts"] for st in final.values())
    done = [rid for rid, st in final.items() if st["status"] == "Done"]
    retried = [rid for rid, st in final.items() if st["attempts"] > 1]
    return AsyncResult(
        acked=len(ids), statuses=dict(statuses), attempts=dict(attempts), unresolved=len(ids) - len(final),
        done_without_execution=sum(1 for rid in done if execs[rid] < 1), retried=len(retried),
        duplicated=sum(1 for rid in retried if execs[rid] >= 2),
        failed_before_budget=sum(1 for st in final.values() if st["status"] == "Failed" and st["attempts"] < 3),
        killed=victim)


# --- trace replay ------------------------------------------------------------

@dataclass
class ReplayOutcome:
    summary: dict
    registration_ms: list[float]
    records: list = field(repr=False, default_factory=list)


async def trace_experiment(topo: Topology, gen: GenerateConfig, warmup_s: float = 60.0,
                           out_dir: str | None = None) -> ReplayOutcome:
    _, invocations = generate_trace(gen)
    async with live_cluster(topo) as cluster:
        cfg = ReplayConfig(entry=cluster.entry_address, control_planes=topo.cp_addresses())
        result = await replay(invocations, cfg)
    s = report.summarize(result.records, warmup_s)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        report.write_records(os.path.join(out_dir, "records.csv"), result.records)
        report.write_function_slowdowns(os.path.join(out_dir, "functions.csv"), s)
        with open(os.path.join(out_dir, "summary.txt"), "w") as f:
            f.write(report.format_summary(s) + "\n")
    return ReplayOutcome(s, result.registration_ms, result.records)


def mean(xs) -> float:
    return statistics.fmean(xs) if xs else float("nan")
