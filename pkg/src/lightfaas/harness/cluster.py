"""Spawn and supervise a local cluster, one OS process group per component."""

from __future__ import annotations

import asyncio
import json
import logging
import os
import signal
import subprocess
import sys
import time
from dataclasses import asdict, dataclass

from ..wire import LeaderClient, RpcClient, RpcError, RpcUnavailable

log = logging.getLogger(__name__)

STATE_FILE = "cluster.json"


@dataclass
class Topology:
    control_planes: int = 3
    data_planes: int = 3
    workers: int = 10
    frontend: bool = True
    runtime: str = "stub"
    stub_delay: float = 0.04
    base_port: int = 20000
    data_dir: str = "cluster-data"
    persist_sandboxes: bool = False
    ack_mode: str = "local"
    fsync: bool = True
    reconcile_period: float = 2.0
    heartbeat_interval: float = 0.5
    failure_threshold: float = 1.5
    # wider than the replica defaults: every component shares few cores here
    election_timeout_min: float = 0.5
    election_timeout_max: float = 1.0
    leader_heartbeat_interval: float = 0.1
    drain_timeout: float = 1.0
    metrics_period: float = 1.0
    worker_cpu: int = 16000
    worker_mem: int = 65536
    ports_per_worker: int = 0  # 0: split the range evenly
    parallel_creates: int = 64
    exec_log: str | None = None
    log_level: str = "WARNING"

    def cp_addresses(self) -> list[str]:
        return [f"127.0.0.1:{self.base_port + i}" for i in range(self.control_planes)]

    def dp_addresses(self) -> list[str]:
        return [f"127.0.0.1:{self.base_port + 100 + i}" for i in range(self.data_planes)]

    def worker_addresses(self) -> list[str]:
        return [f"127.0.0.1:{self.base_port + 200 + i}" for i in range(self.workers)]

    @property
    def frontend_address(self) -> str:
        return f"127.0.0.1:{self.base_port + 300}"

    @property
    def frontend_rpc_address(self) -> str:
        return f"127.0.0.1:{self.base_port + 301}"

    def worker_port_range(self, i: int) -> str:
        lo, hi = self.base_port + 1000, 32767
        per = self.ports_per_worker or (hi - lo + 1) // max(self.workers, 1)
        start = lo + i * per
        if start + per - 1 > hi:
            raise ValueError("sandbox port ranges exceed 32767; lower base_port or ports_per_worker")
        return f"{start}-{start + per - 1}"


@dataclass
class Component:
    name: str
    argv: list[str]
    address: str
    proc: subprocess.Popen | None = None
    pid: int | None = None
    log_path: str = ""
    restarts: int = 0


@dataclass
class FaultEvent:
    t: float
    action: str
    component: str
    detail: str = ""


class Cluster:
    """A supervised local cluster; components are killed by process group."""

    def __init__(self, topo: Topology):
        self.topo = topo
        self.components: dict[str, Component] = {}
        self.events: list[FaultEvent] = []
        self._plan()

    def _base(self, sub: str) -> list[str]:
        return [sys.executable, "-m", "lightfaas", "--log-level", self.topo.log_level, sub]

    def _plan(self):
        t = self.topo
        cps = t.cp_addresses()
        fes = [t.frontend_rpc_address] if t.frontend else []
        for i, addr in enumerate(cps):
            port = addr.rsplit(":", 1)[1]
            sets = {"port": port, "replicas": ",".join(cps), "data_dir": os.path.join(t.data_dir, f"cp{i}"),
                    "persist_sandboxes": t.persist_sandboxes, "ack_mode": t.ack_mode, "fsync": t.fsync,
                    "reconcile_period": t.reconcile_period, "heartbeat_interval": t.heartbeat_interval,
                    "failure_threshold": t.failure_threshold, "election_timeout_min": t.election_timeout_min,
                    "election_timeout_max": t.election_timeout_max,
                    "leader_heartbeat_interval": t.leader_heartbeat_interval, "drain_timeout": t.drain_timeout}
            if fes:
                sets["frontends"] = ",".join(fes)
            self._add(f"cp{i}", "controlplane", sets, addr)
        for i, addr in enumerate(t.dp_addresses()):
            sets = {"port": addr.rsplit(":", 1)[1], "control_planes": ",".join(cps),
                    "data_dir": os.path.join(t.data_dir, f"dp{i}"), "heartbeat_interval": t.heartbeat_interval,
                    "metrics_period": t.metrics_period, "fsync": t.fsync}
            self._add(f"dp{i}", "dataplane", sets, addr)
        for i, addr in enumerate(t.worker_addresses()):
            sets = {"port": addr.rsplit(":", 1)[1], "control_planes": ",".join(cps), "runtime": t.runtime,
                    "stub_delay": t.stub_delay, "port_range": t.worker_port_range(i),
                    "heartbeat_interval": t.heartbeat_interval, "cpu_capacity": t.worker_cpu,
                    "mem_capacity": t.worker_mem, "name": f"w{i}", "parallel_creates": t.parallel_creates}
            if t.exec_log:
                sets["exec_log"] = t.exec_log
            self._add(f"w{i}", "worker", sets, addr)
        if t.frontend:
            sets = {"port": t.frontend_address.rsplit(":", 1)[1],
                    "rpc_port": t.frontend_rpc_address.rsplit(":", 1)[1], "dataplanes": ",".join(t.dp_addresses())}
            self._add("fe", "frontend", sets, t.frontend_address)

    def _add(self, name: str, sub: str, sets: dict, address: str):
        argv = self._base(sub)
        for k, v in sets.items():
            if isinstance(v, bool):
                v = "true" if v else "false"
            argv += ["--set", f"{k}={v}"]
        self.components[name] = Component(name, argv, address)

    # --- process supervision -------------------------------------------------

    def spawn(self, name: str):
        c = self.components[name]
        if self.alive(name):
            return
        os.makedirs(os.path.join(self.topo.data_dir, "logs"), exist_ok=True)
        c.log_path = os.path.join(self.topo.data_dir, "logs", f"{name}.log")
        with open(c.log_path, "ab") as logf:
            c.proc = subprocess.Popen(c.argv, stdout=logf, stderr=subprocess.STDOUT, stdin=subprocess.DEVNULL,
                                      start_new_session=True)
        c.pid = c.proc.pid

    def kill(self, name: str, sig: int = signal.SIGKILL):
        if name not in self.components:
            raise KeyError(f"unknown component {name!r}")
        c = self.components[name]
        if c.pid is None:
            return
        try:
            os.killpg(c.pid, sig)
        except ProcessLookupError:
            return
        if c.proc is not None:
            try:
                c.proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                os.killpg(c.pid, signal.SIGKILL)
                c.proc.wait()
        else:
            _wait_gone(c.pid, 5.0)

    def restart(self, name: str):
        self.kill(name)
        self.components[name].restarts += 1
        self.spawn(name)

    def alive(self, name: str) -> bool:
        c = self.components[name]
        if c.proc is not None:
            return c.proc.poll() is None
        return c.pid is not None and _exists(c.pid)

    def pids(self) -> dict[str, int]:
        return {n: c.pid for n, c in self.components.items() if c.pid is not None}

    @classmethod
    def attach(cls, data_dir: str) -> Cluster:
        """Rebuild the supervisor for a cluster started by another process."""
        with open(os.path.join(data_dir, STATE_FILE)) as f:
            state = json.load(f)
        cluster = cls(Topology(**state["topology"]))
        for name, pid in state["pids"].items():
            cluster.components[name].pid = pid
        return cluster

    def start(self):
        for name in self.components:
            if name.startswith("cp"):
                self.spawn(name)
        for name in self.components:
            if not name.startswith("cp"):
                self.spawn(name)
        self.save_state()

    def stop(self):
        for name in reversed(list(self.components)):
            self.kill(name, signal.SIGTERM)

    def save_state(self):
        os.makedirs(self.topo.data_dir, exist_ok=True)
        with open(os.path.join(self.topo.data_dir, STATE_FILE), "w") as f:
            json.dump({"topology": asdict(self.topo), "pids": self.pids(),
                       "addresses": {n: c.address for n, c in self.components.items()}}, f, indent=1)

    # --- queries ---------------------------------------------------------------

    async def wait_ready(self, timeout: float = 30.0):
        """Wait until a leader is operational and every component registered."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            name = await self.leader()
            if name is not None:
                try:
                    st = await self.call(name, "cp.stats", timeout=1.0)
                    workers = sum(1 for w in st["workers"].values() if w["status"] == "Healthy")
                    if (st.get("operational") and workers >= self.topo.workers
                            and st["dataplanes_alive"] >= self.topo.data_planes):
                        return st
                except (RpcUnavailable, RpcError):
                    pass
            await asyncio.sleep(0.1)
        raise TimeoutError("cluster did not become ready")

    def leader_client(self) -> LeaderClient:
        return LeaderClient([_split(a) for a in self.topo.cp_addresses()])

    async def leader(self) -> str | None:
        """Name of the component currently leading, by asking every replica."""
        for name, c in self.components.items():
            if not name.startswith("cp") or not self.alive(name):
                continue
            client = RpcClient(*_split(c.address))
            try:
                st = await client.call("cp.status", {}, timeout=0.5)
                if st.get("role") == "Leader":
                    return name
            except (RpcUnavailable, RpcError):
                pass
            finally:
                client.close()
        return None

    async def call(self, name: str, method: str, params: dict | None = None, timeout: float = 2.0):
        client = RpcClient(*_split(self.components[name].address))
        try:
            return await client.call(method, params or {}, timeout=timeout)
        finally:
            client.close()

    @property
    def entry_address(self) -> str:
        """Front end if present, else every data plane (the invoker routes client-side)."""
        return self.topo.frontend_address if self.topo.frontend else ",".join(self.topo.dp_addresses())


def _split(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host, int(port)


def _exists(pgid: int) -> bool:
    try:
        os.killpg(pgid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def _wait_gone(pgid: int, timeout: float):
    deadline = time.monotonic() + timeout
    while _exists(pgid):
        if time.monotonic() > deadline:
            try:
                os.killpg(pgid, signal.SIGKILL)
            except ProcessLookupError:
                pass
            return
        time.sleep(0.02)


def stop_from_state(data_dir: str) -> int:
    """Terminate every process group recorded by ``cluster up``; returns how many were running."""
    cluster = Cluster.attach(data_dir)
    n = sum(1 for name in cluster.components if cluster.alive(name))
    cluster.stop()
    os.remove(os.path.join(data_dir, STATE_FILE))
    return n
