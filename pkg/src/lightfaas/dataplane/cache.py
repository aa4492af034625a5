from __future__ import annotations

import threading
from collections import deque

from ..model import EndpointSet, FunctionSpec, SandboxRecord


class Endpoint:
    __slots__ = ("record", "inflight", "draining", "max_inflight", "served")

    def __init__(self, record: SandboxRecord):
        self.record = record
        self.inflight = 0
        self.draining = False
        self.max_inflight = 0  # shadow high-water mark, audited by tests
        self.served = 0

    def __repr__(self):
        return f"Endpoint({self.record.id}, inflight={self.inflight}, draining={self.draining})"


class FunctionCache:
    """Per-function routing state on one data plane replica.

    Slot reservation and release take a short per-function lock, so they are
    safe from any thread; everything else runs on the event loop.
    """

    def __init__(self, spec: FunctionSpec):
        self.spec = spec
        self.target = spec.sched.concurrency_target
        self.version = -1
        self.endpoints: dict[int, Endpoint] = {}
        self.queue: deque = deque()  # (future, enqueue time)
        self.inflight = 0  # executing + queued
        self.last_nonzero: float | None = None
        self.ok = 0
        self.failed = 0
        self.lock = threading.Lock()

    def pick_endpoint(self, exclude: Endpoint | None = None) -> Endpoint | None:
        """Reserve a slot on the least-loaded endpoint that has one free."""
        with self.lock:
            best = None
            for ep in self.endpoints.values():
                if ep.draining or ep.inflight >= self.target or ep is exclude:
                    continue
                if best is None or ep.inflight < best.inflight:
                    best = ep
                    if ep.inflight == 0:
                        break
            if best is not None:
                best.inflight += 1
                if best.inflight > best.max_inflight:
                    best.max_inflight = best.inflight
            return best

    def release(self, ep: Endpoint):
        with self.lock:
            ep.inflight -= 1
            ep.served += 1
            if ep.draining and ep.inflight == 0:
                cur = self.endpoints.get(ep.record.id)
                if cur is ep:
                    del self.endpoints[ep.record.id]

    def forget(self, ep: Endpoint):
        """Stop routing to an endpoint that refused connections."""
        with self.lock:
            ep.draining = True
            if ep.inflight == 0 and self.endpoints.get(ep.record.id) is ep:
                del self.endpoints[ep.record.id]

    def apply(self, update: EndpointSet) -> bool:
        """Install ``update`` iff it is newer than the cached version.

        Endpoints missing from the update drain: running requests finish, no
        new reservations land on them.
        """
        if update.version <= self.version:
            return False
        with self.lock:
            self.version = update.version
            new_ids = set()
            for rec in update.endpoints:
                new_ids.add(rec.id)
                ep = self.endpoints.get(rec.id)
                if ep is None or ep.record != rec:
                    self.endpoints[rec.id] = Endpoint(rec)
                else:
                    ep.draining = False
            for sid in [s for s in self.endpoints if s not in new_ids]:
                ep = self.endpoints[sid]
                if ep.inflight == 0:
                    del self.endpoints[sid]
                else:
                    ep.draining = True
        return True

    def routable(self) -> list[Endpoint]:
        return [ep for ep in self.endpoints.values() if not ep.draining]

    def has_free_slot(self) -> bool:
        return any(not ep.draining and ep.inflight < self.target for ep in self.endpoints.values())
