"""The control plane replica: registry, autoscaling, placement, health, recovery."""

from __future__ import annotations

import asyncio
import json
import logging
import os
import time
from dataclasses import dataclass, field

from ..model import (
    ComponentKind, ComponentRecord, EndpointSet, FunctionSpec, MetricsSample, SandboxRecord,
    decode_sandbox, encode_sandbox,
)
from ..monitoring import serve_metrics
from ..store import Namespace, NotLeader, Replica, StoreConfig, StoreError
from ..wire import RpcClient, RpcError, RpcServer, RpcUnavailable, notification
from .autoscaler import AutoscalerState
from .placer import NoFeasibleWorker, WorkerState, WorkerStatus, place, release

log = logging.getLogger(__name__)

EPOCH_SHIFT = 32


@dataclass
class ControlPlaneConfig:
    host: str = "127.0.0.1"
    port: int = 9000
    replicas: list[str] = field(default_factory=list)
    data_dir: str = "cp-data"
    metrics_port: int = 0
    reconcile_period: float = 2.0
    heartbeat_interval: float = 0.5
    failure_threshold: float = 1.5
    election_timeout_min: float = 0.15
    election_timeout_max: float = 0.30
    leader_heartbeat_interval: float = 0.05
    ack_mode: str = "local"
    persist_sandboxes: bool = False
    frontends: list[str] = field(default_factory=list)
    drain_timeout: float = 1.0
    broadcast_delay: float = 0.01  # coalescing window for endpoint updates
    recovery_merge_timeout: float = 1.0
    fsync: bool = True
    seed: int = -1

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"


@dataclass
class Sandbox:
    id: int
    function: str
    worker_index: int
    created: float
    record: SandboxRecord | None = None
    terminating: bool = False
    recovered: bool = False

    @property
    def ready(self) -> bool:
        return self.record is not None


class FunctionState:
    def __init__(self, spec: FunctionSpec):
        self.spec = spec
        self.scaler = AutoscalerState(spec.sched)
        self.sandboxes: dict[int, Sandbox] = {}
        self.seq = 0

    @property
    def downscale_suppressed_until(self):
        return self.scaler.suppressed_until

    def live(self) -> list[Sandbox]:
        return [s for s in self.sandboxes.values() if not s.terminating]

    def endpoints(self) -> tuple[SandboxRecord, ...]:
        return tuple(sorted((s.record for s in self.sandboxes.values() if s.ready and not s.terminating),
                            key=lambda r: r.id))


@dataclass
class DataPlaneState:
    record: ComponentRecord
    client: RpcClient
    last_heartbeat: float
    alive: bool = True


class ControlPlane:
    def __init__(self, cfg: ControlPlaneConfig):
        self.cfg = cfg
        replicas = cfg.replicas or [cfg.address]
        if cfg.address not in replicas:
            replicas = [cfg.address, *replicas]
        store_cfg = StoreConfig(cfg.election_timeout_min, cfg.election_timeout_max,
                                cfg.leader_heartbeat_interval, cfg.ack_mode, fsync=cfg.fsync)
        self.store = Replica(cfg.address, replicas, cfg.data_dir, store_cfg,
                             allow_sandboxes=cfg.persist_sandboxes,
                             seed=None if cfg.seed < 0 else cfg.seed)
        self.store.on_leader = self._on_leader
        self.store.on_follower = self._on_follower
        self.functions: dict[str, FunctionState] = {}
        self.workers: dict[int, WorkerState] = {}
        self.worker_clients: dict[int, RpcClient] = {}
        self.dataplanes: dict[str, DataPlaneState] = {}
        self.frontend_clients = [RpcClient(*_split(a)) for a in cfg.frontends]
        self.term = 0
        self.operational = False
        self.merging = False
        self._sid = 0
        self._urgent: set[str] = set()
        self._urgent_event = asyncio.Event()
        self._dirty: set[str] = set()
        self._flush_scheduled = False
        self._leader_tasks: list[asyncio.Task] = []
        self._server: RpcServer | None = None
        self._metrics_server = None
        self.counters = {"dropped_samples": 0, "creates": 0, "kills": 0, "create_failures": 0,
                         "crashes": 0, "recovered_kills": 0, "early_recovered_kills": 0, "adopted": 0,
                         "broadcasts": 0, "deferred_placements": 0}
        self.recovery_log: list[dict] = []

    # --- lifecycle ---------------------------------------------------------

    async def start(self):
        handlers = {
            "cp.register_function": self.h_register_function,
            "cp.deregister_function": self.h_deregister_function,
            "cp.register_component": self.h_register_component,
            "cp.deregister_component": self.h_deregister_component,
            "cp.list_functions": self.h_list_functions,
            "cp.metrics": self.h_metrics,
            "cp.heartbeat": self.h_heartbeat,
            "cp.sandbox_ready": self.h_sandbox_ready,
            "cp.sandbox_failed": self.h_sandbox_failed,
            "cp.sandbox_crashed": self.h_sandbox_crashed,
            "cp.status": self.h_status,
            "cp.stats": self.h_stats,
            "cp.endpoints": self.h_endpoints,
            "cp.sandboxes": self.h_sandboxes,
            **self.store.handlers(),
        }
        self._server = await RpcServer(handlers, self.cfg.host, self.cfg.port).start()
        if self.cfg.metrics_port:
            self._metrics_server = await serve_metrics(self.cfg.host, self.cfg.metrics_port, self.metrics)
        await self.store.start()
        return self

    async def stop(self):
        self._on_follower()
        await self.store.stop()
        if self._server:
            await self._server.stop()
        if self._metrics_server:
            self._metrics_server.close()
        for c in list(self.worker_clients.values()) + self.frontend_clients:
            c.close()

    # --- leadership --------------------------------------------------------

    async def _on_leader(self, term: int):
        self.term = term
        self._sid = 0
        self._leader_tasks.append(asyncio.ensure_future(self._recover(term)))

    def _on_follower(self):
        for t in self._leader_tasks:
            t.cancel()
        self._leader_tasks = []
        self.operational = False
        self.functions.clear()
        self.workers.clear()
        for c in self.worker_clients.values():
            c.close()
        self.worker_clients.clear()
        for dp in self.dataplanes.values():
            dp.client.close()
        self.dataplanes.clear()

    async def _recover(self, term: int):
        """Rebuild in-memory state after winning an election.

        Components and functions come from the store; sandboxes are merged
        from worker reports.  Downscaling is suppressed for one stable window.
        """
        t0 = time.monotonic()
        try:
            now = time.monotonic()
            for _, raw in self.store.scan(Namespace.WORKER_NODES):
                rec = ComponentRecord.from_dict(json.loads(raw))
                self._add_worker(rec, now)
            for _, raw in self.store.scan(Namespace.DATA_PLANES):
                rec = ComponentRecord.from_dict(json.loads(raw))
                self._add_dataplane(rec, now)
            for i, (name, raw) in enumerate(self.store.scan(Namespace.FUNCTIONS)):
                self.functions[name] = FunctionState(FunctionSpec.from_bytes(raw))
                if i % 512 == 511:
                    await asyncio.sleep(0)
        except StoreError:
            log.exception("store unreadable; abdicating")
            self.store._step_down(self.store.state.current_term)
            return
        specs = [f.spec.to_dict() for f in self.functions.values()]
        await self._broadcast("dp.sync_functions", {"specs": specs})
        for fs in self.functions.values():
            fs.scaler.suppressed_until = now + fs.spec.sched.stable_window
        self.merging = True
        self.operational = True
        t_operational = time.monotonic()
        self._leader_tasks.append(asyncio.ensure_future(self._scaler_loop(term)))
        self._leader_tasks.append(asyncio.ensure_future(self._health_loop(term)))
        await asyncio.gather(*(self._merge_worker(idx, self.cfg.recovery_merge_timeout)
                               for idx in list(self.workers)))
        now = time.monotonic()
        for fs in self.functions.values():
            fs.scaler.suppressed_until = now + fs.spec.sched.stable_window
        self.merging = False
        self._wake_all()
        self.recovery_log.append({"term": term, "operational_after": t_operational - t0,
                                  "merged_after": time.monotonic() - t0,
                                  "sandboxes": sum(len(f.sandboxes) for f in self.functions.values())})
        log.info("leader term %d operational in %.1f ms", term, 1e3 * (t_operational - t0))

    def _require_leader(self):
        if not self.store.is_leader:
            raise NotLeader(self.store.state.leader_hint)
        if not self.operational:
            raise RpcError("unavailable", "leader recovering")

    # --- registry ----------------------------------------------------------

    def _add_worker(self, rec: ComponentRecord, now: float) -> WorkerState:
        ws = WorkerState(rec, last_heartbeat=now)
        self.workers[rec.index] = ws
        old = self.worker_clients.pop(rec.index, None)
        if old:
            old.close()
        self.worker_clients[rec.index] = RpcClient(rec.ip, rec.port)
        return ws

    def _add_dataplane(self, rec: ComponentRecord, now: float) -> DataPlaneState:
        old = self.dataplanes.get(rec.key)
        if old:
            old.client.close()
        dp = DataPlaneState(rec, RpcClient(rec.ip, rec.port), last_heartbeat=now)
        self.dataplanes[rec.key] = dp
        return dp

    async def h_register_function(self, p):
        self._require_leader()
        spec = FunctionSpec.from_dict(p["spec"])
        existing = self.functions.get(spec.name)
        if existing is not None:
            if existing.spec == spec:
                return {"ok": True, "existing": True}
            raise RpcError("duplicate", f"function {spec.name} registered with a different spec")
        await self.store.put(Namespace.FUNCTIONS, spec.name, spec.to_bytes())
        if spec.name not in self.functions:
            self.functions[spec.name] = FunctionState(spec)
        await self._broadcast("dp.add_functions", {"specs": [spec.to_dict()]})
        if spec.sched.min_scale:
            self._trigger(spec.name)
        return {"ok": True}

    async def h_deregister_function(self, p):
        self._require_leader()
        name = p["name"]
        fs = self.functions.get(name)
        if fs is None:
            return {"ok": True}
        await self.store.delete(Namespace.FUNCTIONS, name)
        self.functions.pop(name, None)
        await self._broadcast("dp.remove_function", {"name": name})
        for sb in list(fs.sandboxes.values()):
            asyncio.ensure_future(self._kill(fs, sb, drain=0))
        return {"ok": True}

    async def h_register_component(self, p):
        self._require_leader()
        rec = ComponentRecord.from_dict(p["record"])
        ns = Namespace.WORKER_NODES if rec.kind == ComponentKind.WORKER_NODE else Namespace.DATA_PLANES
        raw = self.store.get(ns, rec.key)
        now = time.monotonic()
        if raw is not None:
            old = ComponentRecord.from_dict(json.loads(raw))
            if not old.same_identity(rec):
                raise RpcError("duplicate", f"{rec.kind.value} {rec.key} already registered")
            rec = old
        else:
            if rec.kind == ComponentKind.WORKER_NODE and (rec.cpu_capacity <= 0 or rec.mem_capacity <= 0):
                raise RpcError("invalid", "worker capacity must be positive")
            used = {json.loads(v)["index"] for _, v in self.store.scan(ns)}
            index = next(i for i in range(len(used) + 1) if i not in used)
            if index > 0xFFFF:
                raise RpcError("full", "worker registry exhausted")
            rec = ComponentRecord(rec.kind, rec.name, rec.ip, rec.port, rec.cpu_capacity, rec.mem_capacity, index)
            await self.store.put(ns, rec.key, json.dumps(rec.to_dict()).encode())
        if rec.kind == ComponentKind.WORKER_NODE:
            known = self.workers.get(rec.index)
            if known is None or known.status == WorkerStatus.DEAD:
                self._add_worker(rec, now)
                asyncio.ensure_future(self._merge_worker(rec.index, self.cfg.recovery_merge_timeout))
            else:
                known.last_heartbeat = now
            return {"index": rec.index}
        self._add_dataplane(rec, now)
        await self._notify_frontends("add", rec.key)
        return {"index": rec.index, "functions": self._function_list()}

    async def h_deregister_component(self, p):
        self._require_leader()
        kind = ComponentKind(p["kind"])
        key = p["key"]
        ns = Namespace.WORKER_NODES if kind == ComponentKind.WORKER_NODE else Namespace.DATA_PLANES
        raw = self.store.get(ns, key)
        if raw is None:
            return {"ok": True}
        rec = ComponentRecord.from_dict(json.loads(raw))
        await self.store.delete(ns, key)
        if kind == ComponentKind.WORKER_NODE:
            ws = self.workers.get(rec.index)
            if ws:
                self._worker_dead(ws)
                self.workers.pop(rec.index, None)
        else:
            dp = self.dataplanes.pop(key, None)
            if dp:
                dp.client.close()
            await self._notify_frontends("remove", key)
        return {"ok": True}

    def _function_list(self) -> list[dict]:
        out = []
        for fs in self.functions.values():
            out.append({"spec": fs.spec.to_dict(), "endpoints": self._endpoint_set(fs).to_dict()})
        return out

    def h_list_functions(self, p):
        self._require_leader()
        return {"functions": self._function_list()}

    # --- metrics & autoscaling --------------------------------------------

    def h_metrics(self, p):
        self._require_leader()
        now = time.monotonic()
        urgent = p.get("urgent", False)
        for name, inflight in p["samples"]:
            fs = self.functions.get(name)
            if fs is None:
                self.counters["dropped_samples"] += 1
                log.debug("dropping sample for unknown function %s", name)
                continue
            fs.scaler.record(MetricsSample(name, inflight, now))
            if urgent or inflight > len(fs.live()) * fs.spec.sched.concurrency_target:
                self._trigger(name)
        return {"ok": True}

    def _trigger(self, name: str):
        self._urgent.add(name)
        self._urgent_event.set()

    def _wake_all(self):
        self._urgent.update(self.functions)
        self._urgent_event.set()

    async def _scaler_loop(self, term: int):
        period = self.cfg.reconcile_period
        next_tick = time.monotonic()
        while self.store.is_leader and self.term == term:
            timeout = next_tick - time.monotonic()
            if timeout > 0 and not self._urgent:
                self._urgent_event.clear()
                try:
                    await asyncio.wait_for(self._urgent_event.wait(), timeout)
                except asyncio.TimeoutError:
                    pass
            now = time.monotonic()
            if now >= next_tick:
                names = list(self.functions)
                self._urgent.clear()
                next_tick = now + period
            else:
                names, self._urgent = list(self._urgent), set()
            if self.merging:
                # placement waits for worker reports, else recovered capacity is duplicated
                self._urgent.update(names)
                await asyncio.sleep(0.01)
                continue
            for i, name in enumerate(names):
                if i and i % 256 == 0:
                    await asyncio.sleep(0)  # keep heartbeats flowing through long passes
                fs = self.functions.get(name)
                if fs is None:
                    continue
                if not fs.sandboxes and fs.scaler.idle(now):
                    fs.scaler.desired = 0
                    continue
                self.reconcile(fs, now)
            await asyncio.sleep(0)

    def reconcile(self, fs: FunctionState, now: float):
        live = fs.live()
        desired = fs.scaler.evaluate(now, len(live))
        diff = desired - len(live)
        if diff > 0:
            for _ in range(diff):
                if not self._start_create(fs, now):
                    break
        elif diff < 0:
            ready = sorted((s for s in live if s.ready), key=lambda s: (s.created, s.id), reverse=True)
            for sb in ready[:-diff]:
                sb.terminating = True
                self._mark_dirty(fs.spec.name)
                asyncio.ensure_future(self._kill(fs, sb, drain=self.cfg.drain_timeout))

    def _next_sid(self) -> int:
        self._sid += 1
        return (self.term << EPOCH_SHIFT) | self._sid

    def _start_create(self, fs: FunctionState, now: float) -> bool:
        sched = fs.spec.sched
        try:
            ws = place(sched.cpu_request, sched.mem_request, self.workers.values())
        except NoFeasibleWorker:
            self.counters["deferred_placements"] += 1
            return False
        sb = Sandbox(self._next_sid(), fs.spec.name, ws.index, now)
        fs.sandboxes[sb.id] = sb
        self.counters["creates"] += 1
        asyncio.ensure_future(self._create(fs, sb, ws))
        return True

    async def _create(self, fs: FunctionState, sb: Sandbox, ws: WorkerState):
        client = self.worker_clients.get(ws.index)
        try:
            if self.cfg.persist_sandboxes:
                await self.store.put(Namespace.SANDBOXES, str(sb.id),
                                     json.dumps([fs.spec.name, sb.worker_index]).encode())
            if client is None:
                raise RpcUnavailable("worker gone")
            await client.call("worker.create", {"spec": fs.spec.to_dict(), "sandbox_id": sb.id}, timeout=2.0)
        except (RpcUnavailable, RpcError, StoreError) as e:
            log.debug("create %d on worker %d failed: %s", sb.id, ws.index, e)
            self._drop_sandbox(fs, sb)
            self.counters["create_failures"] += 1
            self._trigger_later(fs.spec.name)

    def _trigger_later(self, name: str, delay: float = 0.05):
        asyncio.get_running_loop().call_later(delay, self._trigger, name)

    def _drop_sandbox(self, fs: FunctionState, sb: Sandbox):
        if fs.sandboxes.pop(sb.id, None) is None:
            return
        ws = self.workers.get(sb.worker_index)
        if ws is not None:
            release(ws, fs.spec.sched.cpu_request, fs.spec.sched.mem_request)
        if sb.ready:
            self._mark_dirty(fs.spec.name)

    async def _kill(self, fs: FunctionState, sb: Sandbox, drain: float):
        sb.terminating = True
        if drain:
            await asyncio.sleep(drain)
        self.counters["kills"] += 1
        if sb.recovered:
            self.counters["recovered_kills"] += 1
            if time.monotonic() - sb.created < fs.spec.sched.stable_window:
                self.counters["early_recovered_kills"] += 1
        client = self.worker_clients.get(sb.worker_index)
        self._drop_sandbox(fs, sb)
        try:
            if self.cfg.persist_sandboxes:
                await self.store.delete(Namespace.SANDBOXES, str(sb.id))
            if client is not None:
                await client.call("worker.kill", {"sandbox_id": sb.id}, timeout=2.0)
        except (RpcUnavailable, RpcError, StoreError) as e:
            log.debug("kill %d failed: %s", sb.id, e)

    # --- worker reports ----------------------------------------------------

    async def h_sandbox_ready(self, p):
        self._require_leader()
        rec = decode_sandbox(bytes.fromhex(p["record"]))
        self._adopt(p["function"], rec, recovered=False)
        fs = self.functions.get(p["function"])
        if fs is not None and self.cfg.persist_sandboxes and rec.id in fs.sandboxes:
            await self.store.put(Namespace.SANDBOXES, str(rec.id), encode_sandbox(rec))
        return {"ok": True}

    def _adopt(self, function: str, rec: SandboxRecord, recovered: bool):
        """Merge a running sandbox reported by a worker into the actual state."""
        fs = self.functions.get(function)
        ws = self.workers.get(rec.worker_index)
        if fs is None or ws is None or ws.status == WorkerStatus.DEAD:
            client = self.worker_clients.get(rec.worker_index)
            if client is not None:
                asyncio.ensure_future(self._kill_orphan(client, rec.id))
            return
        sb = fs.sandboxes.get(rec.id)
        if sb is None:
            sb = Sandbox(rec.id, function, rec.worker_index, time.monotonic(), recovered=recovered)
            fs.sandboxes[rec.id] = sb
            ws.cpu_committed += fs.spec.sched.cpu_request
            ws.mem_committed += fs.spec.sched.mem_request
            self.counters["adopted"] += 1
        elif sb.record == rec:
            return
        sb.record = rec
        if not sb.terminating:
            self._mark_dirty(function)

    async def _kill_orphan(self, client: RpcClient, sid: int):
        try:
            await client.call("worker.kill", {"sandbox_id": sid}, timeout=2.0)
        except (RpcUnavailable, RpcError):
            pass

    def h_sandbox_failed(self, p):
        self._require_leader()
        fs = self.functions.get(p["function"])
        if fs is not None:
            sb = fs.sandboxes.get(p["sandbox_id"])
            if sb is not None:
                self.counters["create_failures"] += 1
                self._drop_sandbox(fs, sb)
                self._trigger_later(fs.spec.name)
        return {"ok": True}

    def h_sandbox_crashed(self, p):
        self._require_leader()
        fs = self.functions.get(p["function"])
        if fs is not None:
            sb = fs.sandboxes.get(p["sandbox_id"])
            if sb is not None:
                self.counters["crashes"] += 1
                self._drop_sandbox(fs, sb)
                self._trigger(fs.spec.name)
        return {"ok": True}

    async def _merge_worker(self, index: int, timeout: float):
        client = self.worker_clients.get(index)
        ws = self.workers.get(index)
        if client is None or ws is None:
            return
        try:
            r = await client.call("worker.list", {}, timeout=timeout)
        except (RpcUnavailable, RpcError) as e:
            log.info("worker %d unreachable during merge: %s", index, e)
            ws.status = WorkerStatus.SUSPECT
            return
        for item in r["sandboxes"]:
            self._adopt(item["function"], decode_sandbox(bytes.fromhex(item["record"])), recovered=True)

    # --- health ------------------------------------------------------------

    def h_heartbeat(self, p):
        self._require_leader()
        now = time.monotonic()
        if p["kind"] == ComponentKind.WORKER_NODE.value:
            ws = self.workers.get(p["index"])
            if ws is None or ws.status == WorkerStatus.DEAD or ws.record.key != p.get("key", ws.record.key):
                return {"resync": True}
            ws.last_heartbeat = now
            if ws.status == WorkerStatus.SUSPECT:
                ws.status = WorkerStatus.HEALTHY
                asyncio.ensure_future(self._merge_worker(ws.index, self.cfg.recovery_merge_timeout))
            return {"ok": True}
        dp = self.dataplanes.get(p["key"])
        if dp is None or not dp.alive:
            return {"resync": True}
        dp.last_heartbeat = now
        return {"ok": True}

    async def _health_loop(self, term: int):
        interval = self.cfg.heartbeat_interval / 2
        while self.store.is_leader and self.term == term:
            await asyncio.sleep(interval)
            self.monitor_health(time.monotonic())

    def monitor_health(self, now: float) -> list[tuple[str, object]]:
        events = []
        limit = self.cfg.failure_threshold
        for ws in list(self.workers.values()):
            if ws.status != WorkerStatus.DEAD and now - ws.last_heartbeat > limit:
                log.warning("worker %d (%s) missed heartbeats; marking dead", ws.index, ws.record.key)
                self._worker_dead(ws)
                events.append(("worker", ws.index))
        for key, dp in list(self.dataplanes.items()):
            if dp.alive and now - dp.last_heartbeat > limit:
                log.warning("data plane %s missed heartbeats; removing", key)
                dp.alive = False
                asyncio.ensure_future(self._notify_frontends("remove", key))
                events.append(("dataplane", key))
        return events

    def _worker_dead(self, ws: WorkerState):
        ws.status = WorkerStatus.DEAD
        ws.cpu_committed = ws.mem_committed = 0
        for fs in self.functions.values():
            lost = [sb for sb in fs.sandboxes.values() if sb.worker_index == ws.index]
            for sb in lost:
                fs.sandboxes.pop(sb.id, None)
            if lost:
                self._mark_dirty(fs.spec.name)
                self._trigger(fs.spec.name)

    # --- broadcasts --------------------------------------------------------

    def _endpoint_set(self, fs: FunctionState) -> EndpointSet:
        return EndpointSet(fs.spec.name, (self.term << EPOCH_SHIFT) | fs.seq, fs.endpoints())

    def _mark_dirty(self, name: str):
        self._dirty.add(name)
        if not self._flush_scheduled:
            self._flush_scheduled = True
            asyncio.get_running_loop().call_later(self.cfg.broadcast_delay, self._flush_dirty)

    def _flush_dirty(self):
        self._flush_scheduled = False
        dirty, self._dirty = self._dirty, set()
        sets = []
        for name in dirty:
            fs = self.functions.get(name)
            if fs is None:
                continue
            fs.seq += 1
            sets.append(self._endpoint_set(fs).to_dict())
        if sets:
            self.counters["broadcasts"] += 1
            asyncio.ensure_future(self._broadcast("dp.update_endpoints", {"sets": sets}, notify=True))

    async def _broadcast(self, method: str, params: dict, notify: bool = False):
        targets = [dp for dp in self.dataplanes.values() if dp.alive]
        frame = notification(method, params) if notify else None

        async def send(dp):
            try:
                if notify:
                    await dp.client.notify(method, frame=frame)
                else:
                    await dp.client.call(method, params, timeout=2.0)
            except (RpcUnavailable, RpcError) as e:
                log.debug("broadcast %s to %s failed: %s", method, dp.record.key, e)

        if targets:
            await asyncio.gather(*(send(dp) for dp in targets))

    async def _notify_frontends(self, op: str, key: str):
        for c in self.frontend_clients:
            try:
                await c.call("fe.membership", {"op": op, "address": key}, timeout=1.0)
            except (RpcUnavailable, RpcError):
                pass

    # --- introspection -----------------------------------------------------

    def h_status(self, p):
        return {**self.store.status(), "operational": self.operational}

    def h_stats(self, p):
        return self.metrics()

    def h_endpoints(self, p):
        self._require_leader()
        fs = self.functions.get(p["function"])
        if fs is None:
            raise RpcError("not-found", p["function"])
        return {"set": self._endpoint_set(fs).to_dict(),
                "recovered": [s.id for s in fs.sandboxes.values() if s.recovered]}

    def h_sandboxes(self, p):
        """Ready, non-terminating sandbox ids per function (the merged actual state)."""
        self._require_leader()
        return {"sandboxes": {name: [r.id for r in fs.endpoints()] for name, fs in self.functions.items()
                              if fs.sandboxes},
                "workers": {str(s.id): s.worker_index for fs in self.functions.values()
                            for s in fs.sandboxes.values() if s.ready and not s.terminating}}

    def metrics(self) -> dict:
        funcs = {}
        for name, fs in self.functions.items():
            live = fs.live()
            funcs[name] = {"desired": fs.scaler.desired, "actual": len(live),
                           "ready": sum(1 for s in live if s.ready), "panicking": int(fs.scaler.panicking)}
        workers = {str(i): {"status": w.status.value, "cpu_committed": w.cpu_committed,
                            "mem_committed": w.mem_committed, "key": w.record.key}
                   for i, w in self.workers.items()}
        return {
            "role": self.store.state.role.value, "term": self.store.state.current_term,
            "leader": self.store.state.leader_hint, "operational": int(self.operational),
            "store_writes": self.store.writes, "store_appended": self.store.appended,
            "functions_registered": len(self.functions),
            "sandboxes_total": sum(len(f.live()) for f in self.functions.values()),
            "dataplanes_alive": sum(1 for d in self.dataplanes.values() if d.alive),
            "counters": dict(self.counters), "functions": funcs, "workers": workers,
            "recovery": self.recovery_log[-1] if self.recovery_log else {},
        }


def _split(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host, int(port)


async def run(cfg: ControlPlaneConfig):
    os.makedirs(cfg.data_dir, exist_ok=True)
    cp = await ControlPlane(cfg).start()
    try:
        await asyncio.Event().wait()
    finally:
        await cp.stop()
