"""Scheduled fault injection against a supervised cluster."""

from __future__ import annotations

import asyncio
import logging
import re
import time
from dataclasses import dataclass

from .cluster import Cluster, FaultEvent

log = logging.getLogger(__name__)

# "60s kill cp-leader", "30 kill dp1 restart=5", "10 kill w0,w1,w2"
_LINE = re.compile(r"^\s*(\d+(?:\.\d+)?)s?\s+(kill|restart)\s+(\S+)(?:\s+restart=(\d+(?:\.\d+)?)s?)?\s*$")


@dataclass
class Fault:
    at: float
    action: str
    targets: list[str]
    restart_after: float | None = None


def parse_schedule(text: str) -> list[Fault]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0]
        if not line.strip():
            continue
        m = _LINE.match(line)
        if not m:
            raise ValueError(f"fault schedule line {lineno}: cannot parse {line.strip()!r}")
        out.append(Fault(float(m.group(1)), m.group(2), m.group(3).split(","),
                         float(m.group(4)) if m.group(4) else None))
    return sorted(out, key=lambda f: f.at)


async def resolve(cluster: Cluster, target: str) -> str:
    if target == "cp-leader":
        name = await cluster.leader()
        if name is None:
            raise LookupError("no control plane leader to kill")
        return name
    if target not in cluster.components:
        raise KeyError(f"unknown component {target!r}")
    return target


async def inject(cluster: Cluster, schedule: list[Fault], t0: float | None = None) -> list[FaultEvent]:
    """Apply ``schedule`` relative to ``t0`` (perf_counter seconds)."""
    t0 = time.perf_counter() if t0 is None else t0
    events = []
    pending = []
    for fault in schedule:
        delay = t0 + fault.at - time.perf_counter()
        if delay > 0:
            await asyncio.sleep(delay)
        for target in fault.targets:
            name = await resolve(cluster, target)
            if fault.action == "kill":
                cluster.kill(name)
            else:
                cluster.restart(name)
            ev = FaultEvent(time.perf_counter() - t0, fault.action, name, target)
            log.warning("fault: %s %s at %.3fs", fault.action, name, ev.t)
            events.append(ev)
            if fault.restart_after is not None:
                pending.append(asyncio.ensure_future(_restart_later(cluster, name, fault.restart_after, t0, events)))
    if pending:
        await asyncio.gather(*pending)
    cluster.events.extend(events)
    return events


async def _restart_later(cluster: Cluster, name: str, delay: float, t0: float, events: list):
    await asyncio.sleep(delay)
    cluster.spawn(name)
    events.append(FaultEvent(time.perf_counter() - t0, "start", name))
