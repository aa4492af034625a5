"""Just enough HTTP/1.1 for the invocation path.

Supports Content-Length bodies and keep-alive only; no chunked encoding.
Header names are lower-cased on read.
"""

from __future__ import annotations

import asyncio

MAX_HEAD = 64 * 1024
DEFAULT_BODY_CAP = 8 << 20

REASONS = {
    200: "OK", 202: "Accepted", 400: "Bad Request", 404: "Not Found", 405: "Method Not Allowed",
    413: "Payload Too Large", 500: "Internal Server Error", 502: "Bad Gateway", 503: "Service Unavailable",
    504: "Gateway Timeout",
}


class HttpError(Exception):
    pass


class Message:
    __slots__ = ("start", "headers", "body", "raw_head")

    def __init__(self, start: list[str], headers: dict[str, str], body: bytes, raw_head: bytes):
        self.start = start
        self.headers = headers
        self.body = body
        self.raw_head = raw_head

    # request view
    @property
    def method(self) -> str:
        return self.start[0]

    @property
    def path(self) -> str:
        return self.start[1]

    # response view
    @property
    def status(self) -> int:
        return int(self.start[1])

    @property
    def keep_alive(self) -> bool:
        return self.headers.get("connection", "").lower() != "close"


def parse_head(head: bytes) -> tuple[list[str], dict[str, str]]:
    """Split a raw head (ending in a blank line) into start line and lower-cased headers."""
    lines = head.rstrip(b"\r\n").decode("latin-1").split("\r\n")
    start = lines[0].split(" ", 2)
    if len(start) < 2:
        raise HttpError(f"bad start line {lines[0]!r}")
    headers = {}
    for line in lines[1:]:
        k, sep, v = line.partition(":")
        if not sep:
            raise HttpError(f"bad header line {line!r}")
        headers[k.strip().lower()] = v.strip()
    return start, headers


def _content_length(headers: dict[str, str], body_cap: int) -> int:
    try:
        n = int(headers.get("content-length", "0") or 0)
    except ValueError:
        raise HttpError("bad content-length") from None
    if n < 0 or n > body_cap:
        raise HttpError("body too large" if n > 0 else "bad content-length")
    return n


async def read_message(reader: asyncio.StreamReader, body_cap: int = DEFAULT_BODY_CAP,
                       prefix: bytes = b"") -> Message | None:
    """Read one request or response; None on clean EOF before any byte."""
    try:
        head = prefix + await reader.readuntil(b"\r\n\r\n")
    except asyncio.IncompleteReadError as e:
        if not e.partial and not prefix:
            return None
        raise HttpError("truncated head") from None
    except asyncio.LimitOverrunError:
        raise HttpError("head too large") from None
    start, headers = parse_head(head)
    n = _content_length(headers, body_cap)
    body = await reader.readexactly(n) if n else b""
    return Message(start, headers, body, head)


def split_messages(buf: bytearray, body_cap: int = DEFAULT_BODY_CAP) -> list[Message]:
    """Remove every complete message from ``buf`` (for protocol-based servers)."""
    out = []
    while True:
        end = buf.find(b"\r\n\r\n")
        if end < 0:
            if len(buf) > MAX_HEAD:
                raise HttpError("head too large")
            return out
        head = bytes(buf[:end + 4])
        start, headers = parse_head(head)
        n = _content_length(headers, body_cap)
        if len(buf) < end + 4 + n:
            return out
        body = bytes(buf[end + 4:end + 4 + n])
        del buf[:end + 4 + n]
        out.append(Message(start, headers, body, head))


def build_request(method: str, path: str, headers: dict[str, str] | None = None, body: bytes = b"") -> bytes:
    parts = [f"{method} {path} HTTP/1.1\r\nHost: cluster\r\nContent-Length: {len(body)}\r\n"]
    if headers:
        parts.extend(f"{k}: {v}\r\n" for k, v in headers.items())
    parts.append("\r\n")
    return "".join(parts).encode("latin-1") + body


def build_response(status: int, body: bytes = b"", headers: dict[str, str] | None = None) -> bytes:
    parts = [f"HTTP/1.1 {status} {REASONS.get(status, 'Unknown')}\r\nContent-Length: {len(body)}\r\n"]
    if headers:
        parts.extend(f"{k}: {v}\r\n" for k, v in headers.items())
    parts.append("\r\n")
    return "".join(parts).encode("latin-1") + body


class ConnectionPool:
    """Keep-alive connections per upstream address."""

    def __init__(self, connect_timeout: float = 1.0, max_idle: int = 64):
        self.connect_timeout = connect_timeout
        self.max_idle = max_idle
        self._idle: dict[tuple[str, int], list] = {}

    async def acquire(self, addr: tuple[str, int]):
        idle = self._idle.get(addr)
        while idle:
            reader, writer = idle.pop()
            if not writer.is_closing() and not reader.at_eof():
                return reader, writer, True
            writer.close()
        reader, writer = await asyncio.wait_for(asyncio.open_connection(*addr), self.connect_timeout)
        return reader, writer, False

    def release(self, addr, reader, writer):
        idle = self._idle.setdefault(addr, [])
        if len(idle) < self.max_idle and not writer.is_closing():
            idle.append((reader, writer))
        else:
            writer.close()

    def drop(self, addr):
        for _, w in self._idle.pop(addr, []):
            w.close()

    def close(self):
        for addr in list(self._idle):
            self.drop(addr)


class UpstreamConnectError(ConnectionError):
    """Could not open (or reuse) a connection before the request was sent."""


class UpstreamBrokenError(ConnectionError):
    """The request was sent but the connection died before a full response."""


async def exchange(pool: ConnectionPool, addr, request: bytes, timeout: float | None = None) -> Message:
    """Send a request upstream and return the response.

    Failures before the request is written raise UpstreamConnectError (safe to
    retry elsewhere); failures afterwards raise UpstreamBrokenError, because
    the upstream may already have executed the request.
    """
    try:
        reader, writer, _ = await pool.acquire(addr)
    except (OSError, asyncio.TimeoutError) as e:
        raise UpstreamConnectError(f"{addr}: {e!r}") from None
    try:
        writer.write(request)
        if timeout is None:
            resp = await read_message(reader)
        else:
            resp = await asyncio.wait_for(read_message(reader), timeout)
    except (OSError, asyncio.IncompleteReadError, HttpError) as e:
        writer.close()
        raise UpstreamBrokenError(f"{addr}: {e!r}") from None
    except BaseException:
        writer.close()
        raise
    if resp is None:
        writer.close()
        raise UpstreamBrokenError(f"{addr}: closed before response")
    if resp.keep_alive:
        pool.release(addr, reader, writer)
    else:
        writer.close()
    return resp
