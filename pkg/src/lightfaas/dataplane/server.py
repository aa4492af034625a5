"""Data plane replica: queueing, throttling, load balancing and proxying of invocations."""

from __future__ import annotations

import asyncio
import json
import logging
import os
import time
import uuid
from dataclasses import dataclass, field

from ..httpio import (
    ConnectionPool, HttpError, UpstreamBrokenError, UpstreamConnectError, build_request, build_response,
    exchange, read_message,
)
from ..model import ComponentKind, ComponentRecord, EndpointSet, FunctionSpec
from ..monitoring import serve_metrics
from ..wire import LeaderClient, RpcError, RpcServer, RpcUnavailable, parse_addresses
from .asyncq import AsyncEnvelope, AsyncLog, AsyncStatus
from .cache import Endpoint, FunctionCache

log = logging.getLogger(__name__)

RELAYED_HEADERS = ("x-service-time", "x-sandbox-id")


@dataclass
class DataPlaneConfig:
    host: str = "127.0.0.1"
    port: int = 8000
    control_planes: list[str] = field(default_factory=lambda: ["127.0.0.1:9000"])
    data_dir: str = "dp-data"
    metrics_port: int = 0
    metrics_period: float = 1.0
    heartbeat_interval: float = 0.5
    queue_bound: int = 10000
    async_attempts: int = 3
    async_backoff: float = 0.5
    urgent_delay: float = 0.002
    body_cap: int = 8 << 20
    fsync: bool = True
    startup_wait: float = 5.0  # how long a request for an uncached function waits for the first sync

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"


class InvocationError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


class DataPlane:
    def __init__(self, cfg: DataPlaneConfig):
        self.cfg = cfg
        self.caches: dict[str, FunctionCache] = {}
        self.cp = LeaderClient(parse_addresses(cfg.control_planes))
        self.pool = ConnectionPool()
        self.async_log = AsyncLog(os.path.join(cfg.data_dir, "async.log"), fsync=cfg.fsync)
        self.rpc = RpcServer({
            "dp.add_functions": self.h_add_functions,
            "dp.remove_function": self.h_remove_function,
            "dp.sync_functions": self.h_sync_functions,
            "dp.update_endpoints": self.h_update_endpoints,
            "dp.stats": lambda p: self.metrics(),
            "dp.functions": self.h_functions,
            "dp.endpoints": self.h_endpoints,
        })
        self.registered = asyncio.Event()
        self.last_cp_contact = 0.0
        self.counters = {"ok": 0, "failed": 0, "not_found": 0, "queue_timeouts": 0, "proxy_retries": 0,
                         "async_accepted": 0, "metric_batches": 0, "stale_versions": 0}
        self._urgent: set[str] = set()
        self._urgent_scheduled = False
        self._server = None
        self._metrics_server = None
        self._tasks: list[asyncio.Task] = []
        self._async_tasks: set[asyncio.Task] = set()

    # --- lifecycle ---------------------------------------------------------

    async def start(self):
        self.async_log.open()
        self._server = await asyncio.start_server(self._on_connection, self.cfg.host, self.cfg.port,
                                                  reuse_address=True, backlog=1024)
        if self.cfg.metrics_port:
            self._metrics_server = await serve_metrics(self.cfg.host, self.cfg.metrics_port, self.metrics)
        self._tasks.append(asyncio.ensure_future(self._register_loop()))
        self._tasks.append(asyncio.ensure_future(self._metrics_loop()))
        for env in self.async_log.pending():
            self._spawn_async(env)
        return self

    async def stop(self):
        for t in self._tasks + list(self._async_tasks):
            t.cancel()
        if self._server:
            self._server.close()
        if self._metrics_server:
            self._metrics_server.close()
        await self.rpc.stop()
        self.cp.close()
        self.pool.close()
        self.async_log.close()

    async def _on_connection(self, reader, writer):
        try:
            first = await reader.readexactly(1)
        except (asyncio.IncompleteReadError, ConnectionError):
            writer.close()
            return
        if first.isalpha():
            await self._serve_http(reader, writer, first)
        else:
            await self.rpc.serve_connection(reader, writer, first)

    # --- control plane interaction -----------------------------------------

    def _record(self) -> ComponentRecord:
        return ComponentRecord(ComponentKind.DATA_PLANE, "", self.cfg.host, self.cfg.port)

    async def sync_cache(self) -> int:
        """Register with the leader and replace the cache with its function list."""
        r = await self.cp.call("cp.register_component", {"record": self._record().to_dict()})
        self._install(r["functions"])
        self.last_cp_contact = time.monotonic()
        self.registered.set()
        return len(self.caches)

    def _install(self, functions: list[dict], authoritative: bool = True):
        names = set()
        for item in functions:
            spec = FunctionSpec.from_dict(item["spec"])
            names.add(spec.name)
            cache = self._ensure(spec)
            if item.get("endpoints"):
                self._apply(cache, EndpointSet.from_dict(item["endpoints"]))
        if authoritative:
            for name in [n for n in self.caches if n not in names]:
                self._drop_function(name)

    def _ensure(self, spec: FunctionSpec) -> FunctionCache:
        cache = self.caches.get(spec.name)
        if cache is None or cache.spec != spec:
            fresh = FunctionCache(spec)
            if cache is not None:
                fresh.endpoints, fresh.version = cache.endpoints, cache.version
                fresh.queue = cache.queue
                fresh.inflight = cache.inflight
            self.caches[spec.name] = cache = fresh
        return cache

    def _drop_function(self, name: str):
        cache = self.caches.pop(name, None)
        if cache is None:
            return
        while cache.queue:
            fut, _ = cache.queue.popleft()
            if not fut.done():
                fut.set_exception(InvocationError(404, f"function {name} deregistered"))

    async def _register_loop(self):
        backoff = 0.05
        while True:
            try:
                await self.sync_cache()
                break
            except (RpcUnavailable, RpcError) as e:
                log.info("control plane unreachable (%s); serving from cache", e)
                await asyncio.sleep(backoff)
                backoff = min(backoff * 2, 1.0)
        while True:
            await asyncio.sleep(self.cfg.heartbeat_interval)
            try:
                r = await self.cp.call("cp.heartbeat", {"kind": ComponentKind.DATA_PLANE.value,
                                                        "key": self.cfg.address}, timeout=1.0, attempts=3)
                self.last_cp_contact = time.monotonic()
                if r.get("resync"):
                    await self.sync_cache()
            except (RpcUnavailable, RpcError) as e:
                log.debug("heartbeat failed: %s", e)

    def h_add_functions(self, p):
        self.last_cp_contact = time.monotonic()
        for d in p["specs"]:
            self._ensure(FunctionSpec.from_dict(d))
        return {"ok": True}

    def h_remove_function(self, p):
        self._drop_function(p["name"])
        return {"ok": True}

    def h_sync_functions(self, p):
        self.last_cp_contact = time.monotonic()
        self._install([{"spec": d} for d in p["specs"]])
        return {"ok": True}

    def h_update_endpoints(self, p):
        self.last_cp_contact = time.monotonic()
        for d in p["sets"]:
            update = EndpointSet.from_dict(d)
            cache = self.caches.get(update.function)
            if cache is not None:
                self._apply(cache, update)
        return {"ok": True}

    def apply_endpoint_update(self, update: EndpointSet) -> bool:
        cache = self.caches.get(update.function)
        return cache is not None and self._apply(cache, update)

    def _apply(self, cache: FunctionCache, update: EndpointSet) -> bool:
        if not cache.apply(update):
            self.counters["stale_versions"] += 1
            return False
        self._dispatch(cache)
        return True

    def h_functions(self, p):
        return {"functions": sorted(self.caches)}

    def h_endpoints(self, p):
        cache = self.caches.get(p["function"])
        if cache is None:
            raise RpcError("not-found", p["function"])
        return {"version": cache.version,
                "endpoints": [{"id": ep.record.id, "worker": ep.record.worker_index, "inflight": ep.inflight,
                               "draining": ep.draining, "max_inflight": ep.max_inflight}
                              for ep in cache.endpoints.values()]}

    # --- metrics -----------------------------------------------------------

    def _mark_urgent(self, name: str):
        self._urgent.add(name)
        if not self._urgent_scheduled:
            self._urgent_scheduled = True
            asyncio.get_running_loop().call_later(self.cfg.urgent_delay, self._flush_urgent)

    def _flush_urgent(self):
        self._urgent_scheduled = False
        names, self._urgent = self._urgent, set()
        samples = [[n, self.caches[n].inflight] for n in names if n in self.caches]
        if samples:
            asyncio.ensure_future(self._send_metrics(samples, urgent=True))

    async def _send_metrics(self, samples, urgent=False):
        try:
            # notifications: a lost batch is covered by the next periodic report
            await self.cp.notify("cp.metrics", {"samples": samples, "urgent": urgent})
            self.counters["metric_batches"] += 1
        except (RpcUnavailable, RpcError) as e:
            log.debug("metrics dropped: %s", e)

    def collect_samples(self, now: float) -> list[list]:
        """Per-function inflight for functions with traffic within their stable window."""
        samples = []
        for name, cache in self.caches.items():
            if cache.inflight > 0:
                cache.last_nonzero = now
                samples.append([name, cache.inflight])
            elif cache.last_nonzero is not None:
                if now - cache.last_nonzero <= cache.spec.sched.stable_window:
                    samples.append([name, 0])
                else:
                    cache.last_nonzero = None
        return samples

    async def _metrics_loop(self):
        while True:
            await asyncio.sleep(self.cfg.metrics_period)
            samples = self.collect_samples(time.monotonic())
            if samples:
                asyncio.ensure_future(self._send_metrics(samples))

    def metrics(self) -> dict:
        per_fn = {}
        for name, c in self.caches.items():
            if c.inflight or c.queue or c.ok or c.failed:
                per_fn[name] = {"inflight": c.inflight, "queue_depth": len(c.queue), "ok": c.ok, "failed": c.failed,
                                "endpoints": len(c.endpoints)}
        since = time.monotonic() - self.last_cp_contact if self.last_cp_contact else -1
        return {"address": self.cfg.address, "functions_cached": len(self.caches),
                "inflight": sum(c.inflight for c in self.caches.values()),
                "queue_depth": sum(len(c.queue) for c in self.caches.values()),
                "cache_staleness_s": round(since, 3), "async_log_writes": self.async_log.writes,
                "counters": dict(self.counters), "functions": per_fn}

    # --- invocation path ---------------------------------------------------

    async def _serve_http(self, reader, writer, prefix: bytes):
        try:
            while True:
                req = await read_message(reader, self.cfg.body_cap, prefix)
                prefix = b""
                if req is None:
                    break
                writer.write(await self._handle(req))
        except (HttpError, ConnectionError, asyncio.IncompleteReadError) as e:
            log.debug("client connection: %s", e)
        finally:
            writer.close()

    async def _handle(self, req) -> bytes:
        if req.method == "GET" and req.path.startswith("/async/"):
            env = self.async_log.envelopes.get(req.path[len("/async/"):])
            if env is None:
                return build_response(404, b"unknown request id")
            return build_response(200, json.dumps(env.to_json()).encode(), {"Content-Type": "application/json"})
        if req.method != "POST" or not req.path.startswith("/invoke"):
            return build_response(404, b"not found")
        name = req.headers.get("x-function-name", "")
        mode = req.headers.get("x-invocation-mode", "sync").lower()
        if mode == "async":
            try:
                env = await self.submit_async(name, req.body)
            except InvocationError as e:
                return build_response(e.status, str(e).encode())
            return build_response(202, json.dumps({"id": env.id}).encode(), {"Content-Type": "application/json"})
        try:
            resp = await self.invoke(name, req.body, request_id=req.headers.get("x-request-id"))
        except InvocationError as e:
            return build_response(e.status, str(e).encode())
        headers = {k: resp.headers[k] for k in RELAYED_HEADERS if k in resp.headers}
        return build_response(resp.status, resp.body, headers)

    async def invoke(self, name: str, payload: bytes, request_id: str | None = None,
                     exec_timeout: float | None = None):
        """Run one invocation and return the sandbox response.

        Queueing is bounded by the function's queue_timeout; execution is
        bounded by ``exec_timeout`` when given.
        """
        cache = self.caches.get(name)
        if cache is None and not self.registered.is_set():
            # a restarted replica may be routed to before its cache is synced
            try:
                await asyncio.wait_for(self.registered.wait(), self.cfg.startup_wait)
            except asyncio.TimeoutError:
                pass
            cache = self.caches.get(name)
        if cache is None:
            self.counters["not_found"] += 1
            raise InvocationError(404, f"unknown function {name}")
        cache.inflight += 1
        try:
            resp = await self._invoke(cache, payload, request_id, exec_timeout)
        except InvocationError:
            cache.failed += 1
            self.counters["failed"] += 1
            raise
        finally:
            cache.inflight -= 1
        if resp.status == 200:
            cache.ok += 1
            self.counters["ok"] += 1
        else:
            cache.failed += 1
            self.counters["failed"] += 1
        return resp

    async def _invoke(self, cache: FunctionCache, payload: bytes, request_id, exec_timeout: float | None):
        ep = cache.pick_endpoint() if not cache.queue else None
        if ep is None:
            ep = await self._wait_for_slot(cache, time.monotonic() + cache.spec.sched.queue_timeout)
        headers = {"X-Request-Id": request_id} if request_id else None
        request = build_request("POST", "/", headers, payload)
        retried = False
        while True:
            try:
                resp = await exchange(self.pool, ep.record.address, request, exec_timeout)
            except UpstreamConnectError as e:
                # sandbox is gone but the cache still lists it; one retry elsewhere
                log.debug("connect to sandbox %d failed: %s", ep.record.id, e)
                cache.forget(ep)
                self._release(cache, ep)
                if retried:
                    raise InvocationError(502, "sandbox unreachable") from None
                retried = True
                self.counters["proxy_retries"] += 1
                ep = cache.pick_endpoint()
                if ep is None:
                    raise InvocationError(502, "sandbox unreachable, no alternative") from None
                continue
            except UpstreamBrokenError as e:
                self._release(cache, ep)
                raise InvocationError(502, f"sandbox failed mid-request: {e}") from None
            except asyncio.TimeoutError:
                self._release(cache, ep)
                raise InvocationError(504, "invocation timed out") from None
            self._release(cache, ep)
            return resp

    def _release(self, cache: FunctionCache, ep: Endpoint):
        cache.release(ep)
        if cache.queue:
            self._dispatch(cache)

    async def _wait_for_slot(self, cache: FunctionCache, deadline: float) -> Endpoint:
        if len(cache.queue) >= self.cfg.queue_bound:
            raise InvocationError(503, "queue full")
        fut = asyncio.get_running_loop().create_future()
        item = (fut, time.monotonic())
        cache.queue.append(item)
        if not cache.has_free_slot():
            self._mark_urgent(cache.spec.name)
        try:
            return await asyncio.wait_for(asyncio.shield(fut), max(0.001, deadline - time.monotonic()))
        except asyncio.TimeoutError:
            if fut.done() and not fut.cancelled() and fut.exception() is None:
                return fut.result()  # dispatched right at the deadline
            fut.cancel()
            try:
                cache.queue.remove(item)
            except ValueError:
                pass
            self.counters["queue_timeouts"] += 1
            raise InvocationError(503, "no sandbox became available before queue timeout") from None

    def _dispatch(self, cache: FunctionCache):
        """Hand free slots to queued requests in FIFO order."""
        q = cache.queue
        while q:
            fut, _ = q[0]
            if fut.done():
                q.popleft()
                continue
            ep = cache.pick_endpoint()
            if ep is None:
                return
            q.popleft()
            fut.set_result(ep)

    # --- async invocations -------------------------------------------------

    async def submit_async(self, name: str, payload: bytes) -> AsyncEnvelope:
        if name not in self.caches and not self.registered.is_set():
            try:
                await asyncio.wait_for(self.registered.wait(), self.cfg.startup_wait)
            except asyncio.TimeoutError:
                pass
        if name not in self.caches:
            self.counters["not_found"] += 1
            raise InvocationError(404, f"unknown function {name}")
        env = AsyncEnvelope(uuid.uuid4().hex, name, payload)
        self.async_log.record(env)
        self.counters["async_accepted"] += 1
        self._spawn_async(env)
        return env

    def _spawn_async(self, env: AsyncEnvelope):
        t = asyncio.ensure_future(self._run_async(env))
        self._async_tasks.add(t)
        t.add_done_callback(self._async_tasks.discard)

    async def _run_async(self, env: AsyncEnvelope):
        await self.registered.wait()
        backoff = self.cfg.async_backoff
        while env.attempts < self.cfg.async_attempts:
            env.attempts += 1
            env.status = AsyncStatus.RUNNING
            self.async_log.record(env)
            try:
                cache = self.caches.get(env.function)
                timeout = cache.spec.sched.queue_timeout if cache else None
                resp = await self.invoke(env.function, env.payload, request_id=env.id, exec_timeout=timeout)
                if resp.status == 200:
                    env.status, env.result, env.error = AsyncStatus.DONE, resp.body, ""
                    self.async_log.record(env)
                    return
                env.error = f"status {resp.status}"
            except InvocationError as e:
                env.error = str(e)
            if env.attempts < self.cfg.async_attempts:
                env.status = AsyncStatus.QUEUED
                self.async_log.record(env)
                await asyncio.sleep(backoff)
                backoff *= 2
        env.status = AsyncStatus.FAILED
        self.async_log.record(env)


async def run(cfg: DataPlaneConfig):
    dp = await DataPlane(cfg).start()
    try:
        await asyncio.Event().wait()
    finally:
        await dp.stop()
