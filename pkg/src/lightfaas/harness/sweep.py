"""Constant-rate throughput sweeps (cold and warm starts) and knee detection."""

from __future__ import annotations

import asyncio
import logging
import time
from dataclasses import asdict, dataclass, field

from ..model import FunctionSpec, SchedulingConfig
from .loadgen import Invoker, open_loop, register_functions
from .report import InvocationRecord, Outcome, percentile

log = logging.getLogger(__name__)


@dataclass
class SweepStep:
    rate: float
    submitted: int
    ok: int
    errors: int
    timeouts: int
    p50_ms: float | None
    p99_ms: float | None
    overhead_p50_ms: float | None = None
    overhead_p99_ms: float | None = None
    duration_s: float = 0.0
    max_drift_ms: float = 0.0

    @property
    def completion(self) -> float:
        return self.ok / self.submitted if self.submitted else 0.0

    @property
    def error_rate(self) -> float:
        return (self.errors + self.timeouts) / self.submitted if self.submitted else 1.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["completion"] = self.completion
        d["error_rate"] = self.error_rate
        return d


def summarize_step(rate: float, records: list[InvocationRecord], drift: list[float], duration: float) -> SweepStep:
    ok = [r for r in records if r.outcome == Outcome.OK]
    lat = [r.e2e_ms for r in ok]
    over = [r.overhead_ms for r in ok if r.overhead_ms is not None]
    return SweepStep(
        rate, len(records), len(ok), sum(1 for r in records if r.outcome == Outcome.ERROR),
        sum(1 for r in records if r.outcome == Outcome.TIMEOUT),
        percentile(lat, 50) if lat else None, percentile(lat, 99) if lat else None,
        percentile(over, 50) if over else None, percentile(over, 99) if over else None,
        duration, max(drift) if drift else 0.0,
    )


def step_ok(step: SweepStep, baseline_p50: float, latency_factor: float = 2.0, min_completion: float = 0.95,
            max_errors: float = 0.01) -> bool:
    return (step.p50_ms is not None and step.p50_ms <= latency_factor * baseline_p50
            and step.completion >= min_completion and step.error_rate <= max_errors)


def find_knee(steps: list[SweepStep], latency_factor: float = 2.0) -> float | None:
    """Largest rate such that it and every lower rate keep p50 within
    ``latency_factor`` of the lowest-rate p50 with >= 95% completion and <= 1% errors."""
    steps = sorted(steps, key=lambda s: s.rate)
    if not steps or steps[0].p50_ms is None:
        return None
    base = steps[0].p50_ms
    knee = None
    for s in steps:
        if not step_ok(s, base, latency_factor):
            break
        knee = s.rate
    return knee


def monotone_past_knee(steps: list[SweepStep], knee: float | None, tolerance: float = 0.0) -> bool:
    """p50 latency never decreases (beyond ``tolerance`` relative) at rates above the knee."""
    past = [s for s in sorted(steps, key=lambda s: s.rate) if knee is None or s.rate >= knee]
    lat = [s.p50_ms if s.p50_ms is not None else float("inf") for s in past]
    return all(b >= a * (1 - tolerance) for a, b in zip(lat, lat[1:]))


@dataclass
class ColdSweepConfig:
    entry: str = "127.0.0.1:20300"
    control_planes: list[str] = field(default_factory=lambda: ["127.0.0.1:20000"])
    rates: list[float] = field(default_factory=lambda: [50, 100, 200, 300, 400, 500, 650, 800])
    step_duration: float = 5.0
    gap: float = 6.0
    timeout: float = 20.0
    image: str = "echo"
    prefix: str = "cold"
    stable_window: float = 2.0
    panic_window: float = 1.0
    grace: float = 1.0


def cold_schedule(rate: float, duration: float, names: list[str]) -> list[tuple[float, str]]:
    n = int(round(rate * duration))
    if n > len(names):
        raise ValueError(f"need {n} distinct functions, have {len(names)}")
    return [(i / rate, names[i]) for i in range(n)]


def cold_functions(cfg: ColdSweepConfig) -> list[FunctionSpec]:
    pool = int(max(cfg.rates) * cfg.step_duration) + 1
    sched = SchedulingConfig(stable_window=cfg.stable_window, panic_window=cfg.panic_window,
                             scale_to_zero_grace=cfg.grace, queue_timeout=cfg.timeout)
    return [FunctionSpec(f"{cfg.prefix}-{i:05d}", cfg.image, sched=sched) for i in range(pool)]


async def cold_sweep(cfg: ColdSweepConfig, on_step=None, register: bool = True) -> list[SweepStep]:
    """Each step invokes distinct idle functions once each at a constant rate."""
    specs = cold_functions(cfg)
    if register:
        await register_functions(cfg.control_planes, specs)
    names = [s.name for s in specs]
    pool = len(names)
    inv = Invoker(cfg.entry, cfg.timeout)
    steps = []
    try:
        for k, rate in enumerate(cfg.rates):
            if k:
                await asyncio.sleep(cfg.gap)  # let the previous step's sandboxes scale to zero
            # rotate so consecutive steps start on different functions
            off = (k * 7919) % pool
            rotated = names[off:] + names[:off]

            async def fire(name, t, t0):
                return await inv.timed(name, t, t0, 1.0)

            t = time.perf_counter()
            records, drift = await open_loop(cold_schedule(rate, cfg.step_duration, rotated), fire)
            step = summarize_step(rate, records, drift, time.perf_counter() - t)
            log.info("cold rate %s: p50 %s p99 %s ok %d/%d", rate, step.p50_ms, step.p99_ms, step.ok, step.submitted)
            steps.append(step)
            if on_step:
                on_step(step)
    finally:
        inv.close()
    return steps


@dataclass
class WarmConfig:
    entry: str = "127.0.0.1:20300"
    control_planes: list[str] = field(default_factory=lambda: ["127.0.0.1:20000"])
    rates: list[float] = field(default_factory=lambda: [100, 250, 500, 750, 1000])
    step_duration: float = 10.0
    function: str = "warm-echo"
    image: str = "echo"
    min_scale: int = 16
    max_scale: int | None = 16  # a fixed pool: the warm path is measured without scaling churn
    concurrency_target: int = 1
    timeout: float = 10.0
    prewarm_s: float = 2.0


async def prepare_warm(cfg: WarmConfig):
    sched = SchedulingConfig(concurrency_target=cfg.concurrency_target, min_scale=cfg.min_scale,
                             max_scale=cfg.max_scale)
    await register_functions(cfg.control_planes, [FunctionSpec(cfg.function, cfg.image, sched=sched)])
    inv = Invoker(cfg.entry, cfg.timeout)
    try:
        deadline = time.monotonic() + 30
        while time.monotonic() < deadline:
            resp = await inv.invoke(cfg.function)
            if resp.status == 200:
                break
            await asyncio.sleep(0.1)
        await asyncio.sleep(cfg.prewarm_s)
    finally:
        inv.close()


async def warm_step(cfg: WarmConfig, rate: float, duration: float) -> tuple[SweepStep, list[InvocationRecord]]:
    inv = Invoker(cfg.entry, cfg.timeout)

    async def fire(_, t, t0):
        return await inv.timed(cfg.function, t, t0, 1.0, b"x")

    n = int(rate * duration)
    try:
        t = time.perf_counter()
        records, drift = await open_loop(((i / rate, i) for i in range(n)), fire)
    finally:
        inv.close()
    return summarize_step(rate, records, drift, time.perf_counter() - t), records


async def warm_sweep(cfg: WarmConfig, on_step=None) -> list[SweepStep]:
    await prepare_warm(cfg)
    steps = []
    for rate in cfg.rates:
        step, _ = await warm_step(cfg, rate, cfg.step_duration)
        steps.append(step)
        if on_step:
            on_step(step)
    return steps
