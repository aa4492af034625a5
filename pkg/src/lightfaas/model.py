"""Domain types shared by every component, plus the sandbox codec and config parsing."""

from __future__ import annotations

import dataclasses
import enum
import ipaddress
import json
import re
import struct
from dataclasses import dataclass, field
from typing import Any

SANDBOX_RECORD_SIZE = 16
_SANDBOX_STRUCT = struct.Struct(">Q4sHH")


class ConfigError(ValueError):
    pass


class MalformedRecord(ValueError):
    pass


@dataclass(frozen=True)
class SchedulingConfig:
    concurrency_target: int = 1
    stable_window: float = 60.0
    panic_window: float = 6.0
    panic_threshold: float = 2.0
    scale_to_zero_grace: float = 30.0
    min_scale: int = 0
    max_scale: int | None = None  # None means unbounded
    cpu_request: int = 10  # millicores
    mem_request: int = 128  # MiB
    queue_timeout: float = 30.0

    def __post_init__(self):
        if self.concurrency_target < 1:
            raise ConfigError("concurrency_target must be >= 1")
        if self.panic_window <= 0 or self.stable_window <= 0:
            raise ConfigError("windows must be positive")
        if self.panic_window > self.stable_window:
            raise ConfigError("panic_window must not exceed stable_window")
        if self.panic_threshold <= 0:
            raise ConfigError("panic_threshold must be positive")
        if self.scale_to_zero_grace < 0 or self.queue_timeout <= 0:
            raise ConfigError("grace must be >= 0 and queue_timeout > 0")
        if self.min_scale < 0:
            raise ConfigError("min_scale must be >= 0")
        if self.max_scale is not None and (self.max_scale < 1 or self.min_scale > self.max_scale):
            raise ConfigError("need 1 <= max_scale and min_scale <= max_scale")
        if self.cpu_request < 0 or self.mem_request < 0:
            raise ConfigError("resource requests must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SchedulingConfig:
        return cls(**d)


@dataclass(frozen=True)
class FunctionSpec:
    name: str
    image: str
    port: int = 8080
    sched: SchedulingConfig = field(default_factory=SchedulingConfig)

    def __post_init__(self):
        if not self.name:
            raise ConfigError("function name must be non-empty")
        if not 1 <= self.port <= 65535:
            raise ConfigError(f"port out of range: {self.port}")

    def to_dict(self) -> dict:
        return {"name": self.name, "image": self.image, "port": self.port, "sched": self.sched.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> FunctionSpec:
        return cls(d["name"], d["image"], d.get("port", 8080), SchedulingConfig.from_dict(d.get("sched", {})))

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_bytes(cls, b: bytes) -> FunctionSpec:
        return cls.from_dict(json.loads(b))


@dataclass(frozen=True, slots=True)
class SandboxRecord:
    id: int
    ip: str
    port: int
    worker_index: int

    @property
    def address(self) -> tuple[str, int]:
        return self.ip, self.port


def encode_sandbox(record: SandboxRecord) -> bytes:
    """Pack a record as id(8) | ipv4(4) | port(2) | worker_index(2), big-endian."""
    return _SANDBOX_STRUCT.pack(
        record.id, ipaddress.IPv4Address(record.ip).packed, record.port, record.worker_index
    )


def decode_sandbox(data: bytes) -> SandboxRecord:
    if len(data) != SANDBOX_RECORD_SIZE:
        raise MalformedRecord(f"sandbox record must be {SANDBOX_RECORD_SIZE} bytes, got {len(data)}")
    sid, ip, port, widx = _SANDBOX_STRUCT.unpack(data)
    return SandboxRecord(sid, str(ipaddress.IPv4Address(ip)), port, widx)


def encode_sandboxes(records) -> bytes:
    return b"".join(encode_sandbox(r) for r in records)


def decode_sandboxes(data: bytes) -> list[SandboxRecord]:
    if len(data) % SANDBOX_RECORD_SIZE:
        raise MalformedRecord(f"record list length {len(data)} is not a multiple of {SANDBOX_RECORD_SIZE}")
    return [decode_sandbox(data[i:i + SANDBOX_RECORD_SIZE]) for i in range(0, len(data), SANDBOX_RECORD_SIZE)]


class ComponentKind(str, enum.Enum):
    DATA_PLANE = "DataPlane"
    WORKER_NODE = "WorkerNode"


@dataclass(frozen=True)
class ComponentRecord:
    kind: ComponentKind
    name: str
    ip: str
    port: int
    cpu_capacity: int = 0
    mem_capacity: int = 0
    index: int = -1  # assigned by the control plane on registration

    @property
    def key(self) -> str:
        return f"{self.ip}:{self.port}"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ComponentRecord:
        d = dict(d)
        d["kind"] = ComponentKind(d["kind"])
        return cls(**d)

    def same_identity(self, other: ComponentRecord) -> bool:
        """Equal apart from the assigned index."""
        return dataclasses.replace(self, index=-1) == dataclasses.replace(other, index=-1)


@dataclass(frozen=True)
class EndpointSet:
    function: str
    version: int
    endpoints: tuple[SandboxRecord, ...] = ()

    def to_dict(self) -> dict:
        return {"function": self.function, "version": self.version, "endpoints": encode_sandboxes(self.endpoints).hex()}

    @classmethod
    def from_dict(cls, d: dict) -> EndpointSet:
        return cls(d["function"], d["version"], tuple(decode_sandboxes(bytes.fromhex(d["endpoints"]))))


@dataclass(frozen=True, slots=True)
class MetricsSample:
    function: str
    inflight: int
    timestamp: float


# --- configuration ---------------------------------------------------------

_DURATION = re.compile(r"^\s*(-?\d+(?:\.\d+)?)\s*(ms|s|m|h)?\s*$")
_UNITS = {None: 1.0, "s": 1.0, "ms": 1e-3, "m": 60.0, "h": 3600.0}


def parse_duration(text: str) -> float:
    m = _DURATION.match(str(text))
    if not m:
        raise ConfigError(f"not a duration: {text!r}")
    return float(m.group(1)) * _UNITS[m.group(2)]


def _coerce(raw: str, typ: Any, key: str):
    raw = raw.strip()
    t = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    try:
        if "None" in t and raw.lower() in ("", "none", "unbounded", "inf"):
            return None
        if t.startswith("float") or t.startswith("Duration"):
            return parse_duration(raw)
        if t.startswith("int"):
            return int(raw)
        if t.startswith("bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if t.startswith("list"):
            return [x.strip() for x in raw.split(",") if x.strip()]
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from None


def parse_config(text: str, cls=SchedulingConfig, overrides: dict[str, str] | None = None):
    """Parse a flat ``key = value`` document into the dataclass ``cls``.

    Absent keys take the dataclass defaults, ``#`` starts a comment, and
    ``overrides`` (e.g. command-line flags) win over the document.
    Unknown keys, malformed lines and unparseable values raise ConfigError.
    Durations accept ``ms``/``s``/``m``/``h`` suffixes; bare numbers are seconds.
    """
    fields = {f.name: f for f in dataclasses.fields(cls)}
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = value
    for key, value in (overrides or {}).items():
        if key not in fields:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = value
    kwargs = {k: _coerce(v, fields[k].type, k) for k, v in values.items()}
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def load_config(cls, path: str | None = None, overrides: dict[str, str] | None = None):
    text = ""
    if path:
        with open(path) as f:
            text = f.read()
    return parse_config(text, cls, overrides)


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)

