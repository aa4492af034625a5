"""Worker node daemon: runs sandboxes on behalf of the control plane."""

from __future__ import annotations

import asyncio
import enum
import logging
import time
from collections import deque
from dataclasses import dataclass, field

from ..model import ComponentKind, ComponentRecord, FunctionSpec, SandboxRecord, encode_sandbox
from ..wire import LeaderClient, RpcError, RpcServer, RpcUnavailable, parse_addresses
from .runtime import Handle, SandboxRuntime, make_runtime

log = logging.getLogger(__name__)


@dataclass
class WorkerConfig:
    host: str = "127.0.0.1"
    port: int = 7000
    control_planes: list[str] = field(default_factory=lambda: ["127.0.0.1:9000"])
    runtime: str = "stub"
    stub_delay: float = 0.04
    port_range: str = "30000-32767"
    parallel_creates: int = 64
    readiness_timeout: float = 10.0
    probe_interval: float = 0.01
    heartbeat_interval: float = 0.5
    cpu_capacity: int = 16000
    mem_capacity: int = 65536
    name: str = ""
    exec_log: str | None = None

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"


def parse_port_range(text: str) -> range:
    lo, _, hi = text.partition("-")
    lo, hi = int(lo), int(hi or lo)
    if not 0 < lo <= hi <= 65535:
        raise ValueError(f"bad port range {text!r}")
    return range(lo, hi + 1)


class PortPool:
    """Pre-reserved ports; recycled ones go to the back of the free list."""

    def __init__(self, ports):
        self.ports = frozenset(ports)
        self.free = deque(sorted(self.ports))
        self.leased: dict[int, int] = {}  # sandbox id -> port

    def lease(self, sandbox_id: int) -> int | None:
        if sandbox_id in self.leased:
            return self.leased[sandbox_id]
        if not self.free:
            return None
        port = self.free.popleft()
        self.leased[sandbox_id] = port
        return port

    def release(self, sandbox_id: int):
        port = self.leased.pop(sandbox_id, None)
        if port is not None:
            self.free.append(port)


class Phase(str, enum.Enum):
    CREATING = "Creating"
    PROBING = "Probing"
    READY = "Ready"
    TERMINATING = "Terminating"
    CRASHED = "Crashed"


@dataclass
class LocalSandbox:
    id: int
    spec: FunctionSpec
    port: int
    phase: Phase = Phase.CREATING
    handle: Handle | None = None
    record: SandboxRecord | None = None
    created: float = 0.0
    ready_at: float = 0.0


class WorkerDaemon:
    def __init__(self, cfg: WorkerConfig, runtime: SandboxRuntime | None = None):
        self.cfg = cfg
        self.runtime = runtime or make_runtime(cfg.runtime, cfg.host, cfg.stub_delay, cfg.exec_log)
        self.pool = PortPool(parse_port_range(cfg.port_range))
        self.sandboxes: dict[int, LocalSandbox] = {}
        self.index = -1
        self.cp = LeaderClient(parse_addresses(cfg.control_planes))
        self.rpc = RpcServer({"worker.create": self.h_create, "worker.kill": self.h_kill,
                              "worker.list": self.h_list, "worker.stats": lambda p: self.metrics()},
                             cfg.host, cfg.port)
        self._sem = asyncio.Semaphore(cfg.parallel_creates)
        self._tasks: list[asyncio.Task] = []
        self.registered = asyncio.Event()
        self.counters = {"created": 0, "ready": 0, "failed": 0, "killed": 0, "crashed": 0, "rejected": 0,
                         "heartbeats": 0, "reports_lost": 0}
        self.heartbeat_times: list[float] = []

    async def start(self):
        await self.rpc.start()
        self.cfg.port = self.rpc.port
        self._tasks.append(asyncio.ensure_future(self._control_loop()))
        return self

    async def stop(self):
        for t in self._tasks:
            t.cancel()
        await self.rpc.stop()
        for sb in list(self.sandboxes.values()):
            await self._teardown(sb)
        self.cp.close()

    def record(self) -> ComponentRecord:
        return ComponentRecord(ComponentKind.WORKER_NODE, self.cfg.name, self.cfg.host, self.cfg.port,
                               self.cfg.cpu_capacity, self.cfg.mem_capacity)

    # --- control plane -----------------------------------------------------

    async def register(self):
        r = await self.cp.call("cp.register_component", {"record": self.record().to_dict()})
        self.index = r["index"]
        self.registered.set()
        log.info("worker %s registered as index %d", self.cfg.address, self.index)

    async def _control_loop(self):
        backoff = 0.05
        while not self.registered.is_set():
            try:
                await self.register()
            except (RpcUnavailable, RpcError) as e:
                log.info("registration failed (%s); retrying", e)
                await asyncio.sleep(backoff)
                backoff = min(2 * backoff, 1.0)
        interval = self.cfg.heartbeat_interval
        next_at = time.monotonic() + interval
        while True:
            await asyncio.sleep(max(0.0, next_at - time.monotonic()))
            next_at += interval
            if next_at < time.monotonic():
                next_at = time.monotonic() + interval
            asyncio.ensure_future(self._heartbeat())

    async def _heartbeat(self):
        cpu, mem = self.committed()
        params = {"kind": ComponentKind.WORKER_NODE.value, "index": self.index, "key": self.cfg.address,
                  "cpu_committed": cpu, "mem_committed": mem, "sandboxes": len(self.sandboxes)}
        try:
            self.heartbeat_times.append(time.monotonic())
            del self.heartbeat_times[:-100]
            r = await self.cp.call("cp.heartbeat", params, timeout=1.0, attempts=3)
            self.counters["heartbeats"] += 1
            if r.get("resync"):
                await self.register()
        except (RpcUnavailable, RpcError) as e:
            log.debug("heartbeat failed: %s", e)

    async def _report(self, method: str, params: dict, attempts: int = 3):
        for i in range(attempts):
            try:
                await self.cp.call(method, params, timeout=2.0)
                return True
            except (RpcUnavailable, RpcError) as e:
                log.debug("%s failed (%s), attempt %d", method, e, i + 1)
                await asyncio.sleep(0.1 * (i + 1))
        self.counters["reports_lost"] += 1
        return False

    def committed(self) -> tuple[int, int]:
        cpu = sum(sb.spec.sched.cpu_request for sb in self.sandboxes.values())
        mem = sum(sb.spec.sched.mem_request for sb in self.sandboxes.values())
        return cpu, mem

    # --- sandbox commands ----------------------------------------------------

    def h_create(self, p):
        spec = FunctionSpec.from_dict(p["spec"])
        sid = int(p["sandbox_id"])
        if sid in self.sandboxes:
            return {"ok": True, "port": self.sandboxes[sid].port}
        port = self.pool.lease(sid)
        if port is None:
            self.counters["rejected"] += 1
            raise RpcError("pool-exhausted", f"no free port on {self.cfg.address}")
        sb = LocalSandbox(sid, spec, port, created=time.monotonic())
        self.sandboxes[sid] = sb
        self.counters["created"] += 1
        asyncio.ensure_future(self._bring_up(sb))
        return {"ok": True, "port": port}

    async def create_sandbox(self, spec: FunctionSpec, sandbox_id: int) -> LocalSandbox:
        self.h_create({"spec": spec.to_dict(), "sandbox_id": sandbox_id})
        return self.sandboxes[sandbox_id]

    async def _bring_up(self, sb: LocalSandbox):
        async with self._sem:
            if sb.phase != Phase.CREATING:
                self._forget(sb)
                return
            try:
                sb.handle = await self.runtime.create(sb.id, sb.spec, sb.port)
            except Exception as e:
                log.warning("runtime create of sandbox %d failed: %s", sb.id, e)
                await self._fail(sb)
                return
        if sb.phase == Phase.TERMINATING:
            await self._teardown(sb)
            return
        sb.phase = Phase.PROBING
        deadline = time.monotonic() + self.cfg.readiness_timeout
        while True:
            if sb.phase != Phase.PROBING:
                return  # killed while probing
            if sb.handle.exited.done() or time.monotonic() > deadline:
                await self._fail(sb)
                return
            if await self.runtime.probe(sb.handle):
                break
            await asyncio.sleep(self.cfg.probe_interval)
        if sb.phase != Phase.PROBING or self.sandboxes.get(sb.id) is not sb:
            return
        sb.phase = Phase.READY
        sb.ready_at = time.monotonic()
        sb.record = SandboxRecord(sb.id, self.cfg.host, sb.port, max(self.index, 0))
        self.counters["ready"] += 1
        sb.handle.exited.add_done_callback(lambda _f, sb=sb: self._on_exit(sb))
        await self._report("cp.sandbox_ready", {"function": sb.spec.name, "record": encode_sandbox(sb.record).hex()})

    async def _fail(self, sb: LocalSandbox):
        self.counters["failed"] += 1
        await self._teardown(sb)
        await self._report("cp.sandbox_failed", {"function": sb.spec.name, "sandbox_id": sb.id})

    def _on_exit(self, sb: LocalSandbox):
        if self.sandboxes.get(sb.id) is sb and sb.phase == Phase.READY:
            asyncio.ensure_future(self._crashed(sb))

    async def _crashed(self, sb: LocalSandbox):
        log.warning("sandbox %d of %s exited unexpectedly", sb.id, sb.spec.name)
        sb.phase = Phase.CRASHED
        self.counters["crashed"] += 1
        await self._teardown(sb)
        await self._report("cp.sandbox_crashed", {"function": sb.spec.name, "sandbox_id": sb.id})

    def _forget(self, sb: LocalSandbox):
        if self.sandboxes.get(sb.id) is sb:
            del self.sandboxes[sb.id]
        self.pool.release(sb.id)

    async def _teardown(self, sb: LocalSandbox):
        self._forget(sb)
        if sb.handle is not None:
            try:
                await self.runtime.kill(sb.handle)
            except Exception as e:
                log.warning("runtime kill of sandbox %d failed: %s", sb.id, e)

    async def h_kill(self, p):
        return await self.kill_sandbox(int(p["sandbox_id"]))

    async def kill_sandbox(self, sandbox_id: int):
        sb = self.sandboxes.get(sandbox_id)
        if sb is None or sb.phase == Phase.TERMINATING:
            return {"ok": True}
        self.counters["killed"] += 1
        created = sb.phase == Phase.CREATING
        sb.phase = Phase.TERMINATING
        if not created:
            await self._teardown(sb)
        # a sandbox still inside runtime.create is torn down by its bring-up task
        return {"ok": True}

    def list_sandboxes(self) -> list[SandboxRecord]:
        return [sb.record for sb in self.sandboxes.values() if sb.phase == Phase.READY]

    def h_list(self, p):
        return {"index": self.index,
                "sandboxes": [{"function": sb.spec.name, "record": encode_sandbox(sb.record).hex()}
                              for sb in self.sandboxes.values() if sb.phase == Phase.READY]}

    def metrics(self) -> dict:
        cpu, mem = self.committed()
        phases = {ph.value: 0 for ph in Phase}
        for sb in self.sandboxes.values():
            phases[sb.phase.value] += 1
        return {"address": self.cfg.address, "index": self.index, "cpu_committed": cpu, "mem_committed": mem,
                "ports_free": len(self.pool.free), "ports_leased": len(self.pool.leased),
                "phases": phases, "counters": dict(self.counters)}


async def run(cfg: WorkerConfig):
    w = await WorkerDaemon(cfg).start()
    try:
        await asyncio.Event().wait()
    finally:
        await w.stop()
