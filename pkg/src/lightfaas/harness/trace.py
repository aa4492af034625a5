"""Invocation traces: synthetic generation, Azure-format ingestion, CSV I/O.

Trace file format: CSV with header ``t_ms,function,exec_ms,memory_mb``, one
row per invocation, sorted by submission time. ``exec_ms`` is constant per
function (it fixes the spin iteration count).
"""

from __future__ import annotations

import csv
import logging
import math
import random
import re
from dataclasses import dataclass, field

log = logging.getLogger(__name__)

HEADER = ["t_ms", "function", "exec_ms", "memory_mb"]
MINUTES_PER_DAY = 1440


class TraceError(ValueError):
    pass


@dataclass
class TraceFunction:
    name: str
    exec_ms: float
    memory_mb: int
    counts: list[int] = field(default_factory=list)  # invocations per minute

    def __post_init__(self):
        if self.exec_ms <= 0:
            raise TraceError(f"{self.name}: exec_ms must be positive")
        if any(c < 0 for c in self.counts):
            raise TraceError(f"{self.name}: negative invocation count")

    @property
    def total(self) -> int:
        return sum(self.counts)


@dataclass(frozen=True, order=True)
class Invocation:
    t_ms: float
    function: str
    exec_ms: float
    memory_mb: int


@dataclass
class GenerateConfig:
    n_functions: int = 50
    duration_s: float = 600.0
    seed: int = 1
    profile: str = "poisson"  # poisson | timer | burst:N@T
    rate_per_function: float = 0.2  # mean invocations/s per function (poisson, timer)
    exec_median_ms: float = 50.0
    exec_sigma: float = 1.0
    exec_max_ms: float = 1000.0
    exec_min_ms: float = 1.0
    memory_choices: tuple = (128, 256, 512)
    timer_period_s: float = 60.0


def _exec_ms(rng: random.Random, cfg: GenerateConfig) -> float:
    x = rng.lognormvariate(math.log(cfg.exec_median_ms), cfg.exec_sigma)
    return round(min(max(x, cfg.exec_min_ms), cfg.exec_max_ms), 3)


_BURST = re.compile(r"^burst:(\d+)@(\d+(?:\.\d+)?)$")


def generate_trace(cfg: GenerateConfig) -> tuple[list[TraceFunction], list[Invocation]]:
    """Deterministic synthetic trace for ``cfg.seed``."""
    if cfg.n_functions <= 0 or cfg.duration_s <= 0:
        raise TraceError("n_functions and duration_s must be positive")
    rng = random.Random(cfg.seed)
    minutes = max(1, math.ceil(cfg.duration_s / 60))
    funcs = [TraceFunction(f"fn-{i:04d}", _exec_ms(rng, cfg), rng.choice(cfg.memory_choices), [0] * minutes)
             for i in range(cfg.n_functions)]
    invs: list[Invocation] = []
    burst = _BURST.match(cfg.profile)
    if burst:
        n, at = int(burst.group(1)), float(burst.group(2))
        if at >= cfg.duration_s:
            raise TraceError("burst time beyond trace duration")
        for i in range(n):
            f = funcs[i % len(funcs)]
            invs.append(Invocation(at * 1000, f.name, f.exec_ms, f.memory_mb))
    elif cfg.profile == "poisson":
        for f in funcs:
            # per-function rates spread log-uniformly around the mean
            rate = cfg.rate_per_function * math.exp(rng.uniform(-1.0, 1.0)) / 1.1752
            t = rng.expovariate(rate)
            while t < cfg.duration_s:
                invs.append(Invocation(round(t * 1000, 3), f.name, f.exec_ms, f.memory_mb))
                t += rng.expovariate(rate)
    elif cfg.profile == "timer":
        period = cfg.timer_period_s
        phase = rng.uniform(0, period)
        per_tick = max(1, round(cfg.rate_per_function * period))
        t = phase
        while t < cfg.duration_s:
            for f in funcs:
                for _ in range(per_tick):
                    invs.append(Invocation(round(t * 1000, 3), f.name, f.exec_ms, f.memory_mb))
            t += period
    else:
        raise TraceError(f"unknown profile {cfg.profile!r}")
    invs.sort()
    by_name = {f.name: f for f in funcs}
    for inv in invs:
        by_name[inv.function].counts[min(int(inv.t_ms // 60000), minutes - 1)] += 1
    return funcs, invs


def write_trace(path: str, invocations: list[Invocation]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HEADER)
        for inv in invocations:
            w.writerow([f"{inv.t_ms:.3f}", inv.function, f"{inv.exec_ms:.3f}", inv.memory_mb])


def read_trace(path: str) -> list[Invocation]:
    out = []
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r, None)
        if header != HEADER:
            raise TraceError(f"{path}: expected header {','.join(HEADER)}")
        for lineno, row in enumerate(r, 2):
            try:
                out.append(Invocation(float(row[0]), row[1], float(row[2]), int(row[3])))
            except (ValueError, IndexError):
                raise TraceError(f"{path}:{lineno}: malformed row {row!r}") from None
    out.sort()
    return out


def functions_of(invocations: list[Invocation]) -> dict[str, Invocation]:
    """First invocation of every function, which carries its exec time and memory."""
    seen: dict[str, Invocation] = {}
    for inv in invocations:
        seen.setdefault(inv.function, inv)
    return seen


# --- Azure Functions public trace format ---------------------------------------

def _read_rows(path: str):
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r, None)
        if not header:
            raise TraceError(f"{path}: empty file")
        for lineno, row in enumerate(r, 2):
            if row:
                yield header, lineno, row


def _load_invocations(path: str) -> dict[str, list[int]]:
    out = {}
    for header, lineno, row in _read_rows(path):
        if "HashFunction" not in header:
            raise TraceError(f"{path}: missing HashFunction column")
        first = header.index("1") if "1" in header else None
        if first is None or len(header) - first < MINUTES_PER_DAY:
            raise TraceError(f"{path}: expected per-minute columns 1..{MINUTES_PER_DAY}")
        if len(row) != len(header):
            raise TraceError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            counts = [int(x) for x in row[first:first + MINUTES_PER_DAY]]
        except ValueError:
            raise TraceError(f"{path}:{lineno}: non-integer invocation count") from None
        if any(c < 0 for c in counts):
            raise TraceError(f"{path}:{lineno}: negative invocation count")
        out[row[header.index("HashFunction")]] = counts
    return out


def _load_percentile(path: str, key_col: str, value_col: str) -> dict[str, float]:
    out = {}
    for header, lineno, row in _read_rows(path):
        if key_col not in header or value_col not in header:
            raise TraceError(f"{path}: needs columns {key_col} and {value_col}")
        if len(row) != len(header):
            raise TraceError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            out[row[header.index(key_col)]] = float(row[header.index(value_col)])
        except ValueError:
            raise TraceError(f"{path}:{lineno}: bad {value_col} value") from None
    return out


@dataclass
class IngestConfig:
    start_minute: int = 0
    end_minute: int = MINUTES_PER_DAY
    n_functions: int | None = None
    seed: int = 1
    duration_column: str = "percentile_Average_50"
    memory_column: str = "AverageAllocatedMb"
    memory_key: str = "HashFunction"
    exec_max_ms: float | None = None


def ingest_trace(invocations_csv: str, durations_csv: str, memory_csv: str,
                 cfg: IngestConfig | None = None) -> tuple[list[TraceFunction], list[Invocation]]:
    """Normalize Azure-format CSVs into a trace.

    Invocations inside a minute are spread uniformly at seeded random offsets.
    Functions missing from any file are dropped with a warning.
    """
    cfg = cfg or IngestConfig()
    if not 0 <= cfg.start_minute < cfg.end_minute <= MINUTES_PER_DAY:
        raise TraceError("bad minute window")
    counts = _load_invocations(invocations_csv)
    durations = _load_percentile(durations_csv, "HashFunction", cfg.duration_column)
    memory = _load_percentile(memory_csv, cfg.memory_key, cfg.memory_column)
    names = []
    for name in counts:
        if name not in durations or name not in memory:
            log.warning("function %s missing from duration or memory file; dropped", name)
            continue
        names.append(name)
    rng = random.Random(cfg.seed)
    if cfg.n_functions is not None and cfg.n_functions < len(names):
        names = sorted(rng.sample(names, cfg.n_functions), key=names.index)
    funcs, invs = [], []
    for name in names:
        exec_ms = max(durations[name], 1.0)
        if cfg.exec_max_ms:
            exec_ms = min(exec_ms, cfg.exec_max_ms)
        window = counts[name][cfg.start_minute:cfg.end_minute]
        f = TraceFunction(name, exec_ms, int(math.ceil(memory[name])), window)
        funcs.append(f)
        for minute, c in enumerate(window):
            for _ in range(c):
                t = (minute + rng.random()) * 60000
                invs.append(Invocation(round(t, 3), name, exec_ms, f.memory_mb))
    invs.sort()
    return funcs, invs
