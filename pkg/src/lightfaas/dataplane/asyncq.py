from __future__ import annotations

import enum
import json
import logging
import os
from dataclasses import asdict, dataclass

log = logging.getLogger(__name__)


class AsyncStatus(str, enum.Enum):
    QUEUED = "Queued"
    RUNNING = "Running"
    DONE = "Done"
    FAILED = "Failed"


TERMINAL = (AsyncStatus.DONE, AsyncStatus.FAILED)


@dataclass
class AsyncEnvelope:
    id: str
    function: str
    payload: bytes
    attempts: int = 0
    status: AsyncStatus = AsyncStatus.QUEUED
    result: bytes | None = None
    error: str = ""

    def to_json(self) -> dict:
        d = asdict(self)
        d["status"] = self.status.value
        d["payload"] = self.payload.hex()
        d["result"] = None if self.result is None else self.result.hex()
        return d

    @classmethod
    def from_json(cls, d: dict) -> AsyncEnvelope:
        return cls(d["id"], d["function"], bytes.fromhex(d["payload"]), d["attempts"], AsyncStatus(d["status"]),
                   None if d["result"] is None else bytes.fromhex(d["result"]), d.get("error", ""))


class AsyncLog:
    """Replica-local append-only record of async requests (one JSON line per state change)."""

    def __init__(self, path: str, fsync: bool = True):
        self.path = path
        self.fsync = fsync
        self.envelopes: dict[str, AsyncEnvelope] = {}
        self.writes = 0
        self._f = None

    def open(self):
        os.makedirs(os.path.dirname(self.path) or ".", exist_ok=True)
        if os.path.exists(self.path):
            with open(self.path, "rb") as f:
                data = f.read()
            good = 0
            for line in data.splitlines(keepends=True):
                if not line.endswith(b"\n"):
                    break
                try:
                    env = AsyncEnvelope.from_json(json.loads(line))
                except (ValueError, KeyError):
                    break
                self.envelopes[env.id] = env
                good += len(line)
            if good < len(data):
                log.warning("async log %s: dropping %d torn bytes", self.path, len(data) - good)
                with open(self.path, "r+b") as f:
                    f.truncate(good)
        self._f = open(self.path, "ab")
        return self

    def close(self):
        if self._f:
            self._f.close()
            self._f = None

    def record(self, env: AsyncEnvelope):
        self.envelopes[env.id] = env
        self._f.write(json.dumps(env.to_json(), separators=(",", ":")).encode() + b"\n")
        self._f.flush()
        if self.fsync:
            os.fsync(self._f.fileno())
        self.writes += 1

    def pending(self) -> list[AsyncEnvelope]:
        return [e for e in self.envelopes.values() if e.status not in TERMINAL]
