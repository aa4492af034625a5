"""Sandbox runtimes behind the three-call interface (create, kill, list)."""

from __future__ import annotations

import abc
import asyncio
import logging
import os
import sys
import time

from ..httpio import HttpError, build_request, build_response, read_message, split_messages
from ..model import FunctionSpec
from ..sandbox_server import EXEC_LOG_ENV, parse_behavior

log = logging.getLogger(__name__)


class SandboxStartError(Exception):
    pass


class Handle:
    """Runtime-specific sandbox handle."""

    def __init__(self, sandbox_id: int, spec: FunctionSpec, port: int):
        self.sandbox_id = sandbox_id
        self.spec = spec
        self.port = port
        self.exited = asyncio.get_running_loop().create_future()

    def __repr__(self):
        return f"Handle({self.sandbox_id}, port={self.port})"


class SandboxRuntime(abc.ABC):
    """Any runtime implementing these three calls can back a worker daemon."""

    host = "127.0.0.1"

    @abc.abstractmethod
    async def create(self, sandbox_id: int, spec: FunctionSpec, port: int) -> Handle: ...

    @abc.abstractmethod
    async def kill(self, handle: Handle): ...

    @abc.abstractmethod
    def list(self) -> list[Handle]: ...

    async def probe(self, handle: Handle) -> bool:
        """One readiness check; transport connect by default."""
        try:
            _, w = await asyncio.open_connection(self.host, handle.port)
        except OSError:
            return False
        w.close()
        return True


class _StubProtocol(asyncio.Protocol):
    """Serves one connection of an in-daemon stub sandbox (requests are not pipelined)."""

    def __init__(self, runtime: StubRuntime, handle: Handle, kind: str, arg: int):
        self.runtime = runtime
        self.handle = handle
        self.kind = kind
        self.arg = arg
        self.buf = bytearray()
        self.transport = None

    def connection_made(self, transport):
        self.transport = transport
        self.handle.conns.add(transport)

    def data_received(self, data):
        self.buf += data
        try:
            requests = split_messages(self.buf)
        except HttpError as e:
            log.debug("stub sandbox %d: %s", self.handle.sandbox_id, e)
            self.transport.close()
            return
        for req in requests:
            if req.method == "GET":
                self.transport.write(build_response(200, b"ok"))
                continue
            if self.runtime.exec_log:
                self.runtime.exec_log.write(f"{req.headers.get('x-request-id', '-')} {os.getpid()}\n")
            if self.kind == "sleep":
                t0 = time.perf_counter()
                asyncio.get_running_loop().call_later(self.arg / 1000, self._reply, req.body, t0)
            else:
                # spin is not burned inside the daemon; it is answered at once
                self._reply(req.body, time.perf_counter())

    def _reply(self, body: bytes, t0: float):
        if not self.transport.is_closing():
            ms = (time.perf_counter() - t0) * 1000
            self.transport.write(build_response(200, body, {"X-Service-Time": f"{ms:.3f}"}))

    def connection_lost(self, exc):
        self.handle.conns.discard(self.transport)


class StubRuntime(SandboxRuntime):
    """Sleeps ``delay`` and then serves the function from inside the daemon."""

    def __init__(self, delay: float = 0.04, host: str = "127.0.0.1", exec_log: str | None = None):
        self.delay = delay
        self.host = host
        self.exec_log = open(exec_log, "a", buffering=1) if exec_log else None
        self._servers: dict[int, tuple[Handle, asyncio.base_events.Server]] = {}

    async def create(self, sandbox_id, spec, port):
        kind, arg = parse_behavior(spec.image)
        await asyncio.sleep(self.delay)
        handle = Handle(sandbox_id, spec, port)
        handle.conns = set()
        loop = asyncio.get_running_loop()
        try:
            server = await loop.create_server(lambda: _StubProtocol(self, handle, kind, arg), self.host, port,
                                              reuse_address=True)
        except OSError as e:
            raise SandboxStartError(f"bind {port}: {e}") from None
        self._servers[sandbox_id] = (handle, server)
        return handle

    async def probe(self, handle):
        # the listener lives in this process, so readiness is its serving state
        entry = self._servers.get(handle.sandbox_id)
        return entry is not None and entry[1].is_serving()

    async def kill(self, handle):
        entry = self._servers.pop(handle.sandbox_id, None)
        if entry is not None:
            entry[1].close()
            for t in list(handle.conns):
                t.close()
        if not handle.exited.done():
            handle.exited.set_result(None)

    def list(self):
        return [h for h, _ in self._servers.values()]


class ProcessRuntime(SandboxRuntime):
    """One local process per sandbox running the built-in function server."""

    def __init__(self, host: str = "127.0.0.1", exec_log: str | None = None):
        self.host = host
        self.exec_log = exec_log
        self._procs: dict[int, tuple[Handle, asyncio.subprocess.Process]] = {}

    async def create(self, sandbox_id, spec, port):
        parse_behavior(spec.image)
        env = dict(os.environ)
        if self.exec_log:
            env[EXEC_LOG_ENV] = self.exec_log
        proc = await asyncio.create_subprocess_exec(
            sys.executable, "-m", "lightfaas.sandbox_server", "--host", self.host, "--port", str(port),
            "--image", spec.image, env=env, stdin=asyncio.subprocess.DEVNULL,
            stdout=asyncio.subprocess.DEVNULL, stderr=asyncio.subprocess.DEVNULL,
        )
        handle = Handle(sandbox_id, spec, port)
        handle.pid = proc.pid
        self._procs[sandbox_id] = (handle, proc)

        async def watch():
            code = await proc.wait()
            if not handle.exited.done():
                handle.exited.set_result(code)

        asyncio.ensure_future(watch())
        return handle

    async def probe(self, handle):
        try:
            r, w = await asyncio.wait_for(asyncio.open_connection(self.host, handle.port), 0.5)
        except (OSError, asyncio.TimeoutError):
            return False
        try:
            w.write(build_request("GET", "/healthz"))
            resp = await asyncio.wait_for(read_message(r), 1.0)
            return resp is not None and resp.status == 200
        except Exception:
            return False
        finally:
            w.close()

    async def kill(self, handle):
        entry = self._procs.pop(handle.sandbox_id, None)
        if entry is None:
            return
        proc = entry[1]
        if proc.returncode is None:
            try:
                proc.kill()
            except ProcessLookupError:
                pass
        try:
            await asyncio.wait_for(proc.wait(), 2.0)
        except asyncio.TimeoutError:
            log.warning("sandbox %d did not exit after SIGKILL", handle.sandbox_id)

    def list(self):
        return [h for h, _ in self._procs.values()]


def make_runtime(name: str, host: str = "127.0.0.1", stub_delay: float = 0.04,
                 exec_log: str | None = None) -> SandboxRuntime:
    if name == "stub":
        return StubRuntime(stub_delay, host, exec_log)
    if name == "process":
        return ProcessRuntime(host, exec_log)
    raise ValueError(f"unknown runtime {name!r}")
