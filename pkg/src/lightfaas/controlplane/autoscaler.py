"""In-flight-request autoscaler with stable/panic windows and scale-to-zero.

Per function, samples of in-flight requests are kept for one stable window.
At each evaluation:

* ``stable_desired = ceil(mean(stable samples) / target)`` and likewise
  ``panic_desired`` over the panic window (means are over samples, computed
  with exact integer arithmetic; no samples means 0).
* If ``panic_desired > panic_threshold * current`` the function panics; the
  panic lasts until a full stable window passes without the condition.
  While panicking, ``desired = max(panic_desired, previous desired)``.
* Otherwise ``desired = stable_desired``.
* ``desired`` may only reach 0 after ``scale_to_zero_grace`` has elapsed
  since the last positive sample (it is held at 1 before that).
* Until ``suppressed_until`` (recovery after failover), ``desired`` is never
  below ``current``.
* Finally ``desired`` is clamped to ``[min_scale, max_scale]``.
"""

from __future__ import annotations

from collections import deque

from ..model import MetricsSample, SchedulingConfig


class AutoscalerState:
    __slots__ = ("cfg", "samples", "stable_sum", "panicking", "panic_until", "last_positive",
                 "suppressed_until", "desired")

    def __init__(self, cfg: SchedulingConfig):
        self.cfg = cfg
        self.samples: deque[tuple[float, int]] = deque()
        self.stable_sum = 0
        self.panicking = False
        self.panic_until = 0.0
        self.last_positive: float | None = None
        self.suppressed_until: float | None = None
        self.desired = cfg.min_scale

    def record(self, sample: MetricsSample):
        self.record_value(sample.timestamp, sample.inflight)

    def record_value(self, ts: float, inflight: int):
        if inflight < 0:
            raise ValueError("inflight must be non-negative")
        samples = self.samples
        if samples and ts < samples[-1][0]:
            # out-of-order sample (e.g. two data planes); keep the deque sorted
            items = sorted([*samples, (ts, inflight)], key=lambda x: x[0])
            samples.clear()
            samples.extend(items)
        else:
            samples.append((ts, inflight))
        self.stable_sum += inflight
        if inflight > 0 and (self.last_positive is None or ts > self.last_positive):
            self.last_positive = ts

    def _prune(self, now: float):
        horizon = now - self.cfg.stable_window
        samples = self.samples
        while samples and samples[0][0] <= horizon:
            self.stable_sum -= samples.popleft()[1]

    def window_totals(self, now: float) -> tuple[int, int, int, int]:
        """(stable_sum, stable_count, panic_sum, panic_count) for samples in (now-w, now]."""
        self._prune(now)
        s_sum, s_n = self.stable_sum, len(self.samples)
        future_sum = future_n = 0
        p_sum = p_n = 0
        horizon = now - self.cfg.panic_window
        for ts, v in reversed(self.samples):
            if ts > now:
                future_sum += v
                future_n += 1
                continue
            if ts <= horizon:
                break
            p_sum += v
            p_n += 1
        return s_sum - future_sum, s_n - future_n, p_sum, p_n

    def idle(self, now: float) -> bool:
        """True when ``evaluate(now, 0)`` is certain to return 0 without side effects beyond ``desired``."""
        cfg = self.cfg
        return (not self.samples and not self.panicking and cfg.min_scale == 0
                and (self.last_positive is None or now - self.last_positive >= cfg.scale_to_zero_grace))

    def evaluate(self, now: float, current: int) -> int:
        cfg = self.cfg
        target = cfg.concurrency_target
        s_sum, s_n, p_sum, p_n = self.window_totals(now)
        stable_desired = -(-s_sum // (s_n * target)) if s_n else 0
        panic_desired = -(-p_sum // (p_n * target)) if p_n else 0

        if panic_desired > cfg.panic_threshold * current:
            self.panicking = True
            self.panic_until = now + cfg.stable_window
        elif self.panicking and now >= self.panic_until:
            self.panicking = False

        if self.panicking:
            desired = max(panic_desired, self.desired)
        else:
            desired = stable_desired

        if desired == 0 and self.last_positive is not None and now - self.last_positive < cfg.scale_to_zero_grace:
            desired = 1
        if self.suppressed_until is not None and now <= self.suppressed_until:
            desired = max(desired, current)
        desired = max(desired, cfg.min_scale)
        if cfg.max_scale is not None:
            desired = min(desired, cfg.max_scale)
        self.desired = desired
        return desired
