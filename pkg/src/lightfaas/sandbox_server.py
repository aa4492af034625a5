"""Tiny HTTP function server run inside a sandbox process.

Behaviors (selected by the function image):
  echo        return the request body
  spin:N      run N floating-point square roots, then echo
  sleep:MS    sleep MS milliseconds, then echo

Every execution appends ``<request id> <pid>`` to the file named by
LIGHTFAAS_EXEC_LOG, when set, before the work starts.
"""

from __future__ import annotations

import argparse
import math
import os
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

EXEC_LOG_ENV = "LIGHTFAAS_EXEC_LOG"


def parse_behavior(image: str) -> tuple[str, float]:
    kind, _, arg = image.partition(":")
    if kind == "echo":
        return kind, 0.0
    if kind in ("spin", "sleep") and arg:
        return kind, float(arg)
    raise ValueError(f"unknown sandbox behavior {image!r}")


def spin(iterations: int) -> float:
    x = 0.0
    for i in range(int(iterations)):
        x += math.sqrt(i + 1.5)
    return x


def execute(kind: str, arg: float):
    if kind == "spin":
        spin(int(arg))
    elif kind == "sleep":
        time.sleep(arg / 1000)


def make_handler(kind: str, arg: float, exec_log: str | None):
    log_file = open(exec_log, "a", buffering=1) if exec_log else None

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            pass

        def _reply(self, status: int, body: bytes, service_ms: float | None = None):
            self.send_response(status)
            self.send_header("Content-Length", str(len(body)))
            if service_ms is not None:
                self.send_header("X-Service-Time", f"{service_ms:.3f}")
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            if self.path == "/healthz":
                self._reply(200, b"ok")
            else:
                self._reply(404, b"")

        def do_POST(self):
            body = self.rfile.read(int(self.headers.get("Content-Length") or 0))
            if log_file is not None:
                log_file.write(f"{self.headers.get('X-Request-Id', '-')} {os.getpid()}\n")
            t0 = time.perf_counter()
            execute(kind, arg)
            self._reply(200, body, (time.perf_counter() - t0) * 1000)

    return Handler


def main(argv=None):
    ap = argparse.ArgumentParser(description="sandbox function server")
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--port", type=int, required=True)
    ap.add_argument("--image", default="echo")
    args = ap.parse_args(argv)
    kind, arg = parse_behavior(args.image)
    server = ThreadingHTTPServer((args.host, args.port), make_handler(kind, arg, os.environ.get(EXEC_LOG_ENV)))
    server.daemon_threads = True
    server.serve_forever(poll_interval=0.5)


if __name__ == "__main__":
    main()
