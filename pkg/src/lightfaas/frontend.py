"""Front-end router: pins each function to one data plane by name hash."""

from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass, field

from .httpio import ConnectionPool, HttpError, UpstreamBrokenError, UpstreamConnectError, build_response, exchange, read_message
from .wire import RpcServer, parse_address

log = logging.getLogger(__name__)

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & MASK64
    return h


class NoReplicas(Exception):
    pass


@dataclass(frozen=True)
class RoutingTable:
    replicas: tuple[str, ...] = ()
    generation: int = 0

    def route(self, function: str) -> str:
        return route(function, self)

    def with_replica(self, address: str) -> RoutingTable:
        if address in self.replicas:
            return self
        return RoutingTable(tuple(sorted((*self.replicas, address))), self.generation + 1)

    def without_replica(self, address: str) -> RoutingTable:
        if address not in self.replicas:
            return self
        return RoutingTable(tuple(r for r in self.replicas if r != address), self.generation + 1)


def route(function: str, table: RoutingTable) -> str:
    if not table.replicas:
        raise NoReplicas("no healthy data plane replica")
    return table.replicas[fnv1a64(function.encode()) % len(table.replicas)]


@dataclass
class FrontendConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    rpc_port: int = 0
    dataplanes: list[str] = field(default_factory=list)
    probe_interval: float = 0.5
    probe_failures: int = 2
    probe_timeout: float = 0.25
    body_cap: int = 8 << 20


class Frontend:
    """HTTP router in front of the data planes.

    The table is replaced wholesale on every membership change, so a request
    reads one consistent snapshot without locking.
    """

    def __init__(self, cfg: FrontendConfig):
        self.cfg = cfg
        self.known: set[str] = set(cfg.dataplanes)
        self.table = RoutingTable(tuple(sorted(self.known)), 0)
        self.failures: dict[str, int] = {}
        self.pool = ConnectionPool()
        self.rpc = RpcServer({"fe.membership": self.h_membership, "fe.table": self.h_table}, cfg.host, cfg.rpc_port)
        self.counters = {"routed": 0, "unavailable": 0, "upstream_errors": 0}
        self._server = None
        self._probe_task = None

    async def start(self):
        await self.rpc.start()
        self.cfg.rpc_port = self.rpc.port
        self._server = await asyncio.start_server(self._serve, self.cfg.host, self.cfg.port,
                                                  reuse_address=True, backlog=1024)
        self.cfg.port = self._server.sockets[0].getsockname()[1]
        self._probe_task = asyncio.ensure_future(self._probe_loop())
        return self

    async def stop(self):
        if self._probe_task:
            self._probe_task.cancel()
        if self._server:
            self._server.close()
        await self.rpc.stop()
        self.pool.close()

    # --- membership ----------------------------------------------------------

    def add(self, address: str):
        self.known.add(address)
        self.failures[address] = 0
        self.table = self.table.with_replica(address)

    def remove(self, address: str):
        self.table = self.table.without_replica(address)

    def h_membership(self, p):
        if p["op"] == "add":
            self.add(p["address"])
        elif p["op"] == "remove":
            self.remove(p["address"])
        else:
            raise ValueError(f"unknown membership op {p['op']!r}")
        return {"generation": self.table.generation}

    def h_table(self, p):
        return {"replicas": list(self.table.replicas), "generation": self.table.generation}

    async def _probe(self, address: str) -> bool:
        try:
            _, w = await asyncio.wait_for(asyncio.open_connection(*parse_address(address)), self.cfg.probe_timeout)
        except (OSError, asyncio.TimeoutError):
            return False
        w.close()
        return True

    async def probe_once(self):
        addrs = sorted(self.known)
        results = await asyncio.gather(*(self._probe(a) for a in addrs))
        for addr, ok in zip(addrs, results):
            if ok:
                self.failures[addr] = 0
                if addr not in self.table.replicas:
                    log.info("data plane %s is back", addr)
                    self.table = self.table.with_replica(addr)
            else:
                self.failures[addr] = self.failures.get(addr, 0) + 1
                if self.failures[addr] >= self.cfg.probe_failures and addr in self.table.replicas:
                    log.warning("data plane %s failed %d probes; removing", addr, self.failures[addr])
                    self.table = self.table.without_replica(addr)

    async def _probe_loop(self):
        while True:
            await asyncio.sleep(self.cfg.probe_interval)
            await self.probe_once()

    # --- proxying ------------------------------------------------------------

    async def _serve(self, reader, writer):
        try:
            while True:
                req = await read_message(reader, self.cfg.body_cap)
                if req is None:
                    break
                writer.write(await self._forward(req))
        except (HttpError, ConnectionError, asyncio.IncompleteReadError) as e:
            log.debug("client connection: %s", e)
        finally:
            writer.close()

    async def _forward(self, req) -> bytes:
        name = req.headers.get("x-function-name", "")
        table = self.table
        try:
            target = route(name, table)
        except NoReplicas as e:
            self.counters["unavailable"] += 1
            return build_response(503, str(e).encode())
        self.counters["routed"] += 1
        try:
            resp = await exchange(self.pool, parse_address(target), req.raw_head + req.body)
        except (UpstreamConnectError, UpstreamBrokenError) as e:
            self.counters["upstream_errors"] += 1
            return build_response(502, f"data plane {target}: {e}".encode())
        return resp.raw_head + resp.body


async def run(cfg: FrontendConfig):
    fe = await Frontend(cfg).start()
    try:
        await asyncio.Event().wait()
    finally:
        await fe.stop()
