"""Plain-text metrics endpoint shared by all components."""

from __future__ import annotations

import asyncio
import json
import logging

from .httpio import HttpError, build_response, read_message

log = logging.getLogger(__name__)


def render(metrics: dict, prefix: str = "") -> list[str]:
    """Flatten nested dicts into ``a.b.c value`` lines."""
    lines = []
    for k in sorted(metrics, key=str):
        v = metrics[k]
        name = f"{prefix}{k}"
        if isinstance(v, dict):
            lines.extend(render(v, name + "."))
        elif isinstance(v, (list, tuple)):
            lines.append(f"{name} {json.dumps(v)}")
        else:
            lines.append(f"{name} {v}")
    return lines


async def serve_metrics(host: str, port: int, collect) -> asyncio.base_events.Server:
    """GET /metrics returns ``collect()`` as key-value lines."""

    async def handle(reader, writer):
        try:
            while True:
                req = await read_message(reader)
                if req is None:
                    break
                if req.path.startswith("/metrics"):
                    body = ("\n".join(render(collect())) + "\n").encode()
                    writer.write(build_response(200, body, {"Content-Type": "text/plain"}))
                else:
                    writer.write(build_response(404, b"not found\n"))
        except (HttpError, ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            writer.close()

    return await asyncio.start_server(handle, host, port, reuse_address=True)


def parse_metrics(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        k, _, v = line.partition(" ")
        if k:
            out[k] = v
    return out
