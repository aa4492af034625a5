"""Length-prefixed, versioned RPC over asyncio streams.

Frame layout (big-endian)::

    u32 length-of-rest | u8 version | u8 kind | u32 message id | JSON body

Kinds: 0 request, 1 response, 2 error, 3 notification (a request that
expects no reply).

A frame whose version byte is not ``WIRE_VERSION`` is answered with an error
frame and the connection is closed.
"""

from __future__ import annotations

import asyncio
import inspect
import itertools
import json
import logging
import struct

log = logging.getLogger(__name__)

WIRE_VERSION = 1
_HEADER = struct.Struct(">IBBI")
MAX_FRAME = 64 << 20

REQUEST, RESPONSE, ERROR, NOTIFY = 0, 1, 2, 3


class RpcError(Exception):
    """Remote handler raised; ``code`` is a short machine-readable tag."""

    def __init__(self, code: str, message: str = "", data: dict | None = None):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code
        self.data = data or {}


class RpcUnavailable(ConnectionError):
    pass


class UnsupportedVersion(RpcError):
    def __init__(self, version: int):
        super().__init__("unsupported-version", f"wire version {version}")


def encode_frame(kind: int, msg_id: int, body: dict, version: int = WIRE_VERSION) -> bytes:
    payload = json.dumps(body, separators=(",", ":")).encode()
    return _HEADER.pack(len(payload) + 6, version, kind, msg_id) + payload


def notification(method: str, params: dict | None = None) -> bytes:
    return encode_frame(NOTIFY, 0, {"m": method, "p": params or {}})


async def read_frame(reader: asyncio.StreamReader, prefix: bytes = b"") -> tuple[int, int, int, dict]:
    head = prefix + await reader.readexactly(_HEADER.size - len(prefix))
    length, version, kind, msg_id = _HEADER.unpack(head)
    if length < 6 or length > MAX_FRAME:
        raise RpcError("bad-frame", f"length {length}")
    payload = await reader.readexactly(length - 6)
    if version != WIRE_VERSION:
        return version, kind, msg_id, {}
    return version, kind, msg_id, json.loads(payload)


def split_frames(buf: bytearray) -> list[tuple[int, int, int, bytes]]:
    """Remove every complete frame from ``buf``; returns (version, kind, id, payload)."""
    out = []
    pos, n = 0, len(buf)
    while n - pos >= _HEADER.size:
        length, version, kind, msg_id = _HEADER.unpack_from(buf, pos)
        if length < 6 or length > MAX_FRAME:
            raise RpcError("bad-frame", f"length {length}")
        end = pos + 4 + length
        if end > n:
            break
        out.append((version, kind, msg_id, bytes(buf[pos + _HEADER.size:end])))
        pos = end
    if pos:
        del buf[:pos]
    return out


class _Outbox:
    """Coalesces frames written in one loop iteration into a single send."""

    __slots__ = ("writer", "buf")

    def __init__(self, writer):
        self.writer = writer  # a transport or a StreamWriter
        self.buf: list[bytes] = []

    def write(self, data: bytes):
        if not self.buf:
            asyncio.get_running_loop().call_soon(self.flush)
        self.buf.append(data)

    def flush(self):
        data, self.buf = b"".join(self.buf), []
        if data and not self.writer.is_closing():
            self.writer.write(data)

    def is_closing(self) -> bool:
        return self.writer.is_closing()


class _ServerProtocol(asyncio.Protocol):
    def __init__(self, server: RpcServer):
        self.server = server
        self.buf = bytearray()
        self.transport = None
        self.out: _Outbox | None = None

    def connection_made(self, transport):
        self.transport = transport
        self.out = _Outbox(transport)
        self.server._conns.add(transport)

    def data_received(self, data):
        self.buf += data
        try:
            frames = split_frames(self.buf)
        except RpcError:
            self.transport.close()
            return
        for version, kind, msg_id, payload in frames:
            if not self.server._handle_frame(self.out, version, kind, msg_id, payload):
                self.out.flush()
                self.transport.close()
                return

    def connection_lost(self, exc):
        self.server._conns.discard(self.transport)


class RpcServer:
    """Dispatches ``{"m": method, "p": params}`` requests to handlers.

    Handlers may be plain functions (answered inline) or coroutines (each runs
    as its own task so a slow call never blocks the connection).
    """

    def __init__(self, handlers: dict, host: str = "127.0.0.1", port: int = 0):
        self.handlers = dict(handlers)
        self.host = host
        self.port = port
        self._server: asyncio.base_events.Server | None = None
        self._conns: set = set()

    async def start(self):
        loop = asyncio.get_running_loop()
        self._server = await loop.create_server(lambda: _ServerProtocol(self), self.host, self.port,
                                                reuse_address=True, backlog=1024)
        self.port = self._server.sockets[0].getsockname()[1]
        return self

    async def stop(self):
        if self._server:
            self._server.close()
            for c in list(self._conns):
                c.close()
            try:
                await asyncio.wait_for(self._server.wait_closed(), 1.0)
            except asyncio.TimeoutError:
                pass

    async def serve_connection(self, reader, writer, prefix: bytes = b""):
        """Serve frames on a stream connection accepted elsewhere; ``prefix`` holds bytes already consumed."""
        self._conns.add(writer)
        out = _Outbox(writer)
        try:
            while True:
                try:
                    version, kind, msg_id, body = await read_frame(reader, prefix)
                    prefix = b""
                except (asyncio.IncompleteReadError, ConnectionError):
                    return
                if not self._handle(out, version, kind, msg_id, body):
                    return
        except Exception:
            log.exception("rpc connection failed")
        finally:
            self._conns.discard(writer)
            out.flush()
            writer.close()

    def _handle_frame(self, out, version, kind, msg_id, payload: bytes) -> bool:
        body = json.loads(payload) if version == WIRE_VERSION else {}
        return self._handle(out, version, kind, msg_id, body)

    def _handle(self, out, version, kind, msg_id, body) -> bool:
        """Process one inbound frame; False means the connection must close."""
        if version != WIRE_VERSION:
            out.write(encode_frame(ERROR, msg_id, {"e": "unsupported-version", "msg": f"version {version}"}))
            return False
        if kind == REQUEST:
            self._dispatch(out, msg_id, body)
        elif kind == NOTIFY:
            self._notify(body)
        return True

    def _dispatch(self, out, msg_id, body):
        handler = self.handlers.get(body.get("m"))
        if handler is None:
            out.write(encode_frame(ERROR, msg_id, {"e": "no-such-method", "msg": str(body.get("m"))}))
            return
        try:
            result = handler(body.get("p") or {})
        except RpcError as e:
            out.write(encode_frame(ERROR, msg_id, {"e": e.code, "msg": str(e), "d": e.data}))
            return
        except Exception as e:
            log.exception("handler %s failed", body.get("m"))
            out.write(encode_frame(ERROR, msg_id, {"e": "internal", "msg": repr(e)}))
            return
        if inspect.isawaitable(result):
            asyncio.ensure_future(self._finish(out, msg_id, body.get("m"), result))
        else:
            out.write(encode_frame(RESPONSE, msg_id, {"r": result}))

    def _notify(self, body):
        handler = self.handlers.get(body.get("m"))
        if handler is None:
            log.debug("notification for unknown method %s", body.get("m"))
            return
        try:
            result = handler(body.get("p") or {})
            if inspect.isawaitable(result):
                asyncio.ensure_future(self._swallow(body.get("m"), result))
        except Exception as e:
            log.debug("notification %s failed: %r", body.get("m"), e)

    @staticmethod
    async def _swallow(method, aw):
        try:
            await aw
        except Exception as e:
            log.debug("notification %s failed: %r", method, e)

    async def _finish(self, out, msg_id, method, aw):
        try:
            result = await aw
            frame = encode_frame(RESPONSE, msg_id, {"r": result})
        except RpcError as e:
            frame = encode_frame(ERROR, msg_id, {"e": e.code, "msg": str(e), "d": e.data})
        except Exception as e:
            log.exception("handler %s failed", method)
            frame = encode_frame(ERROR, msg_id, {"e": "internal", "msg": repr(e)})
        if not out.is_closing():
            out.write(frame)


class _ClientProtocol(asyncio.Protocol):
    def __init__(self, client: RpcClient):
        self.client = client
        self.buf = bytearray()
        self.transport = None

    def connection_made(self, transport):
        self.transport = transport

    def data_received(self, data):
        self.buf += data
        try:
            frames = split_frames(self.buf)
        except RpcError:
            self.transport.close()
            return
        for version, kind, msg_id, payload in frames:
            if not self.client._on_frame(version, kind, msg_id, payload):
                self.transport.close()
                return

    def connection_lost(self, exc):
        self.client._on_lost(self)


def _expire(fut: asyncio.Future, err: Exception):
    if not fut.done():
        fut.set_exception(err)


class RpcClient:
    """Multiplexed client for one peer; reconnects lazily after failures."""

    def __init__(self, host: str, port: int, connect_timeout: float = 1.0):
        self.host = host
        self.port = port
        self.connect_timeout = connect_timeout
        self._proto: _ClientProtocol | None = None
        self._out: _Outbox | None = None
        self._pending: dict[int, asyncio.Future] = {}
        self._ids = itertools.count(1)
        self._connecting: asyncio.Future | None = None

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    @property
    def connected(self) -> bool:
        return self._proto is not None and not self._proto.transport.is_closing()

    async def _connect(self):
        if self.connected:
            return
        if self._connecting is not None:
            await asyncio.shield(self._connecting)
            return
        loop = asyncio.get_running_loop()
        self._connecting = loop.create_future()
        try:
            _, proto = await asyncio.wait_for(
                loop.create_connection(lambda: _ClientProtocol(self), self.host, self.port), self.connect_timeout
            )
            self._proto = proto
            self._out = _Outbox(proto.transport)
            self._connecting.set_result(None)
        except (OSError, asyncio.TimeoutError) as e:
            err = RpcUnavailable(f"{self.address}: {e!r}")
            self._connecting.set_exception(err)
            self._connecting.exception()  # mark retrieved
            raise err from None
        finally:
            self._connecting = None

    def _on_frame(self, version, kind, msg_id, payload) -> bool:
        fut = self._pending.pop(msg_id, None)
        if version != WIRE_VERSION:
            if fut is not None and not fut.done():
                fut.set_exception(UnsupportedVersion(version))
            return False
        if fut is None or fut.done():
            return True
        try:
            body = json.loads(payload)
        except ValueError:
            fut.set_exception(RpcError("bad-frame", "undecodable response"))
            return False
        if kind == RESPONSE:
            fut.set_result(body.get("r"))
        else:
            fut.set_exception(RpcError(body.get("e", "error"), body.get("msg", ""), body.get("d")))
        return True

    def _on_lost(self, proto: _ClientProtocol):
        if self._proto is not proto:
            return
        self._proto = None
        self._out = None
        pending, self._pending = self._pending, {}
        for fut in pending.values():
            if not fut.done():
                fut.set_exception(RpcUnavailable(f"{self.address}: connection lost"))

    async def call(self, method: str, params: dict | None = None, timeout: float | None = 5.0):
        await self._connect()
        out = self._out
        if out is None or out.is_closing():
            raise RpcUnavailable(f"{self.address}: connection lost")
        msg_id = next(self._ids)
        loop = asyncio.get_running_loop()
        fut = loop.create_future()
        self._pending[msg_id] = fut
        out.write(encode_frame(REQUEST, msg_id, {"m": method, "p": params or {}}))
        timer = None
        if timeout is not None:
            timer = loop.call_later(timeout, _expire, fut,
                                    RpcUnavailable(f"{self.address}: timeout calling {method}"))
        try:
            return await fut
        finally:
            self._pending.pop(msg_id, None)
            if timer is not None:
                timer.cancel()

    async def notify(self, method: str, params: dict | None = None, frame: bytes | None = None):
        """Fire-and-forget; delivery is best effort over the current connection.

        ``frame`` may carry a pre-encoded notification shared across peers.
        """
        await self._connect()
        out = self._out
        if out is None or out.is_closing():
            raise RpcUnavailable(f"{self.address}: connection lost")
        out.write(frame or notification(method, params))

    def close(self):
        proto = self._proto
        if proto is not None:
            proto.transport.close()
            self._on_lost(proto)


class LeaderClient:
    """Calls whichever control plane replica currently leads.

    A ``not-leader`` error carries a hint that is followed; unreachable
    replicas are skipped in round-robin order.
    """

    def __init__(self, addresses: list[tuple[str, int]]):
        if not addresses:
            raise ValueError("need at least one control plane address")
        self.clients = {f"{h}:{p}": RpcClient(h, p) for h, p in addresses}
        self.order = list(self.clients)
        self.current = self.order[0]

    async def call(self, method: str, params: dict | None = None, timeout: float = 5.0, attempts: int | None = None):
        attempts = attempts or 2 * len(self.order) + 1
        last: Exception | None = None
        for _ in range(attempts):
            client = self.clients[self.current]
            try:
                return await client.call(method, params, timeout)
            except RpcError as e:
                if e.code == "unavailable":
                    last = e
                    await asyncio.sleep(0.02)
                    continue
                if e.code != "not-leader":
                    raise
                last = e
                hint = e.data.get("leader")
                if hint and hint in self.clients and hint != self.current:
                    self.current = hint
                    continue
                self._rotate()
                await asyncio.sleep(0.02)
            except RpcUnavailable as e:
                last = e
                self._rotate()
                await asyncio.sleep(0.01)
        raise RpcUnavailable(f"no control plane leader reachable ({last})")

    async def notify(self, method: str, params: dict | None = None):
        """Best-effort notification to the presumed leader; a replica found
        unreachable is rotated past so later calls try the next one."""
        try:
            await self.clients[self.current].notify(method, params)
        except RpcUnavailable:
            self._rotate()
            raise

    def _rotate(self):
        i = self.order.index(self.current)
        self.current = self.order[(i + 1) % len(self.order)]

    def close(self):
        for c in self.clients.values():
            c.close()


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


def parse_addresses(text: str | list[str]) -> list[tuple[str, int]]:
    items = text if isinstance(text, list) else text.split(",")
    return [parse_address(x.strip()) for x in items if x.strip()]
