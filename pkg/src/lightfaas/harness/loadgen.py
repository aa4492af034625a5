"""Open-loop load generation against a running cluster."""

from __future__ import annotations

import asyncio
import json
import logging
import statistics
import subprocess
import sys
import time
from dataclasses import dataclass, field

from ..frontend import RoutingTable
from ..httpio import ConnectionPool, UpstreamBrokenError, UpstreamConnectError, build_request, exchange
from ..model import FunctionSpec, SchedulingConfig
from ..sandbox_server import spin
from ..wire import LeaderClient, RpcError, RpcUnavailable, parse_address
from .report import InvocationRecord, Outcome
from .trace import Invocation, functions_of

log = logging.getLogger(__name__)


class Invoker:
    """HTTP client for the cluster entry point.

    A comma-separated ``address`` lists data plane replicas; requests are then
    routed client-side with the same function hash the front end uses.
    """

    def __init__(self, address: str, timeout: float = 30.0):
        replicas = [a.strip() for a in address.split(",") if a.strip()]
        self.table = RoutingTable(tuple(sorted(replicas)))
        self._addrs = {a: parse_address(a) for a in replicas}
        self.addr = self._addrs[replicas[0]]
        self.timeout = timeout
        self.pool = ConnectionPool(connect_timeout=2.0, max_idle=1024)

    async def invoke(self, function: str, payload: bytes = b"", mode: str = "sync",
                     request_id: str | None = None):
        headers = {"X-Function-Name": function, "X-Invocation-Mode": mode}
        if request_id:
            headers["X-Request-Id"] = request_id
        addr = self._addrs[self.table.route(function)] if len(self._addrs) > 1 else self.addr
        return await exchange(self.pool, addr, build_request("POST", "/invoke", headers, payload), self.timeout)

    async def get(self, path: str):
        return await exchange(self.pool, self.addr, build_request("GET", path), self.timeout)

    async def async_status(self, function: str, request_id: str) -> dict | None:
        """Status of an async request, asked of the replica that owns ``function``."""
        addr = self._addrs[self.table.route(function)] if len(self._addrs) > 1 else self.addr
        resp = await exchange(self.pool, addr, build_request("GET", f"/async/{request_id}",
                                                             {"X-Function-Name": function}), self.timeout)
        return json.loads(resp.body) if resp.status == 200 else None

    async def timed(self, function: str, t_scheduled: float, t0: float, exec_reference_ms: float,
                    payload: bytes = b"") -> InvocationRecord:
        t_submit = time.perf_counter() - t0
        status, service, outcome, err = 0, None, Outcome.ERROR, ""
        try:
            resp = await self.invoke(function, payload)
            status = resp.status
            if status == 200:
                outcome = Outcome.OK
                if "x-service-time" in resp.headers:
                    service = float(resp.headers["x-service-time"])
            else:
                err = resp.body[:200].decode("latin-1")
        except asyncio.TimeoutError:
            outcome, err = Outcome.TIMEOUT, "timeout"
        except (UpstreamConnectError, UpstreamBrokenError, OSError) as e:
            err = str(e)[:200]
        t_response = time.perf_counter() - t0
        return InvocationRecord(function, t_scheduled, t_submit, t_response, outcome, exec_reference_ms,
                                status, service, err)

    def close(self):
        self.pool.close()


async def register_functions(control_planes: list[str], specs: list[FunctionSpec]) -> list[float]:
    """Register ``specs`` one by one; returns per-call latencies in ms."""
    client = LeaderClient([parse_address(a) for a in control_planes])
    lat = []
    try:
        for spec in specs:
            t = time.perf_counter()
            await client.call("cp.register_function", {"spec": spec.to_dict()}, timeout=10.0)
            lat.append((time.perf_counter() - t) * 1000)
    finally:
        client.close()
    return lat


async def open_loop(schedule, fire, t0: float | None = None) -> tuple[list, list[float]]:
    """Run ``fire(item, t_scheduled, t0)`` at each ``(t_seconds, item)`` instant.

    Submission never waits for earlier responses. Returns the results in
    schedule order and each submission's lateness in ms.
    """
    t0 = time.perf_counter() if t0 is None else t0
    tasks, drift = [], []
    for t, item in schedule:
        delay = t0 + t - time.perf_counter()
        if delay > 0:
            await asyncio.sleep(delay)
        drift.append((time.perf_counter() - t0 - t) * 1000)
        tasks.append(asyncio.ensure_future(fire(item, t, t0)))
    return await asyncio.gather(*tasks), drift


# --- spin calibration and reference execution times --------------------------

def iterations_per_ms(target_ms: float = 50.0) -> float:
    n = 20000
    while True:
        t = time.perf_counter()
        spin(n)
        dt = (time.perf_counter() - t) * 1000
        if dt >= target_ms:
            return n / dt
        n *= 2


def spin_image(exec_ms: float, ipm: float) -> str:
    return f"spin:{max(1, round(exec_ms * ipm))}"


async def measure_reference(images: list[str], port: int = 29999, warmup: int = 5, runs: int = 20) -> dict[str, float]:
    """Median latency per image against a dedicated, otherwise idle sandbox process."""
    out = {}
    for image in sorted(set(images)):
        proc = subprocess.Popen([sys.executable, "-m", "lightfaas.sandbox_server", "--port", str(port),
                                 "--image", image], stdin=subprocess.DEVNULL, stdout=subprocess.DEVNULL,
                                stderr=subprocess.DEVNULL)
        pool = ConnectionPool()
        try:
            for _ in range(500):
                try:
                    await exchange(pool, ("127.0.0.1", port), build_request("GET", "/healthz"), 1.0)
                    break
                except (UpstreamConnectError, UpstreamBrokenError, asyncio.TimeoutError):
                    await asyncio.sleep(0.01)
            samples = []
            for i in range(warmup + runs):
                t = time.perf_counter()
                await exchange(pool, ("127.0.0.1", port), build_request("POST", "/", None, b""), 60.0)
                if i >= warmup:
                    samples.append((time.perf_counter() - t) * 1000)
            out[image] = statistics.median(samples)
        finally:
            pool.close()
            proc.kill()
            proc.wait()
    return out


# --- trace replay ------------------------------------------------------------

@dataclass
class ReplayConfig:
    entry: str = "127.0.0.1:20300"
    control_planes: list[str] = field(default_factory=lambda: ["127.0.0.1:20000"])
    timeout: float = 60.0
    stable_window: float = 60.0
    panic_window: float = 6.0
    grace: float = 30.0
    queue_timeout: float = 30.0
    calibrate: bool = True
    reference_port: int = 29999


@dataclass
class ReplayResult:
    records: list[InvocationRecord]
    registration_ms: list[float]
    drift_ms: list[float]
    reference_ms: dict[str, float]
    images: dict[str, str]


async def replay(invocations: list[Invocation], cfg: ReplayConfig) -> ReplayResult:
    """Register the trace's functions, calibrate references, and replay open-loop."""
    first = functions_of(invocations)
    ipm = iterations_per_ms()
    images = {name: spin_image(inv.exec_ms, ipm) for name, inv in first.items()}
    if cfg.calibrate:
        ref_by_image = await measure_reference(list(images.values()), cfg.reference_port)
        reference = {name: ref_by_image[img] for name, img in images.items()}
    else:
        reference = {name: inv.exec_ms for name, inv in first.items()}
    sched = SchedulingConfig(stable_window=cfg.stable_window, panic_window=cfg.panic_window,
                             scale_to_zero_grace=cfg.grace, queue_timeout=cfg.queue_timeout)
    specs = [FunctionSpec(name, images[name], sched=sched) for name in first]
    reg = await register_functions(cfg.control_planes, specs)
    inv_client = Invoker(cfg.entry, cfg.timeout)

    async def fire(inv: Invocation, t, t0):
        return await inv_client.timed(inv.function, t, t0, reference[inv.function])

    try:
        records, drift = await open_loop(((inv.t_ms / 1000, inv) for inv in invocations), fire)
    finally:
        inv_client.close()
    return ReplayResult(list(records), reg, drift, reference, images)


async def submit_async(entry: str, function: str, n: int, rate: float) -> list[str]:
    """Submit ``n`` async invocations at ``rate``/s; returns acknowledged ids."""
    inv = Invoker(entry, 10.0)

    async def fire(i, t, t0):
        try:
            resp = await inv.invoke(function, str(i).encode(), mode="async")
        except (asyncio.TimeoutError, UpstreamConnectError, UpstreamBrokenError):
            return None
        if resp.status != 202:
            return None
        return json.loads(resp.body)["id"]

    try:
        ids, _ = await open_loop(((i / rate, i) for i in range(n)), fire)
    finally:
        inv.close()
    return [i for i in ids if i]


async def wait_for_leader(control_planes: list[str], timeout: float = 10.0):
    client = LeaderClient([parse_address(a) for a in control_planes])
    deadline = time.monotonic() + timeout
    try:
        while time.monotonic() < deadline:
            try:
                return await client.call("cp.status", {}, timeout=1.0, attempts=1)
            except (RpcUnavailable, RpcError):
                await asyncio.sleep(0.05)
    finally:
        client.close()
    raise TimeoutError("no control plane leader")
