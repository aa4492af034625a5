"""Autoscaler checked against a from-scratch reference evaluator."""

import math
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from lightfaas.controlplane.autoscaler import AutoscalerState
from lightfaas.model import SchedulingConfig


class Reference:
    """Keeps every sample forever and recomputes each window with exact fractions."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.samples = []
        self.prev = cfg.min_scale
        self.panic_since_quiet = None  # time the last panic condition held

    def record(self, ts, v):
        self.samples.append((ts, v))

    def _ceil_mean(self, now, width):
        vals = [v for ts, v in self.samples if now - width < ts <= now]
        if not vals:
            return 0
        return math.ceil(Fraction(sum(vals), len(vals)) / self.cfg.concurrency_target)

    def evaluate(self, now, current):
        cfg = self.cfg
        stable = self._ceil_mean(now, cfg.stable_window)
        panic = self._ceil_mean(now, cfg.panic_window)
        if Fraction(panic) > Fraction(cfg.panic_threshold) * current:
            self.panic_since_quiet = now
        in_panic = self.panic_since_quiet is not None and now < self.panic_since_quiet + cfg.stable_window
        if not in_panic:
            self.panic_since_quiet = None
        d = max(panic, self.prev) if in_panic else stable
        positives = [ts for ts, v in self.samples if v > 0]
        if d == 0 and positives and now - max(positives) < cfg.scale_to_zero_grace:
            d = 1
        if getattr(self, "suppressed_until", None) is not None and now <= self.suppressed_until:
            d = max(d, current)
        d = max(d, cfg.min_scale)
        if cfg.max_scale is not None:
            d = min(d, cfg.max_scale)
        self.prev = d
        return d


def random_config(rng):
    stable = rng.choice([2.0, 5.0, 6.0, 10.0, 60.0])
    mn = rng.choice([0, 0, 0, 1, 2])
    return SchedulingConfig(
        concurrency_target=rng.choice([1, 1, 2, 3, 10]),
        stable_window=stable,
        panic_window=rng.choice([stable, stable / 10, stable / 2, 1.0 if stable >= 1 else stable]),
        panic_threshold=rng.choice([1.0, 1.5, 2.0, 3.0]),
        scale_to_zero_grace=rng.choice([0.0, 1.0, 5.0, 30.0]),
        min_scale=mn,
        max_scale=rng.choice([None, None, mn + 1, mn + 5, 50]) or None,
    )


def run_trace(seed):
    rng = random.Random(seed)
    cfg = random_config(rng)
    impl, ref = AutoscalerState(cfg), Reference(cfg)
    if rng.random() < 0.2:
        impl.suppressed_until = ref.suppressed_until = rng.uniform(0, 20)
    now, current = 0.0, 0
    for _ in range(rng.randint(1, 60)):
        now += rng.choice([0.0, 0.1, 0.5, 1.0, 2.0, 7.0, 40.0])
        for _ in range(rng.randint(0, 3)):
            burst = rng.random() < 0.1
            v = rng.randint(0, 200) if burst else rng.choice([0, 0, rng.randint(0, 12)])
            ts = round(now - rng.choice([0.0, 0.0, 0.05, 0.3]), 3)
            impl.record_value(ts, v)
            ref.record(ts, v)
        a, b = impl.evaluate(now, current), ref.evaluate(now, current)
        assert a == b, (seed, cfg, now, current, a, b)
        # the actuator trails desired
        current = rng.choice([a, current, max(0, a - 1), rng.randint(0, 20)])


def test_matches_reference_on_10000_random_traces():
    for seed in range(10_000):
        run_trace(seed)


def test_steady_load_sizes_pool():
    s = AutoscalerState(SchedulingConfig(concurrency_target=1, stable_window=60, panic_window=6))
    for t in range(60):
        s.record_value(float(t), 10)
    assert s.evaluate(59.0, 10) == 10


def test_concurrency_target_divides_with_ceiling():
    s = AutoscalerState(SchedulingConfig(concurrency_target=4))
    for t in range(5):
        s.record_value(float(t), 9)
    assert s.evaluate(4.0, 3) == 3


def test_panic_on_burst_then_holds():
    cfg = SchedulingConfig(stable_window=60, panic_window=6, panic_threshold=2.0)
    s = AutoscalerState(cfg)
    for t in range(54):
        s.record_value(float(t), 1)
    for t in range(54, 60):
        s.record_value(float(t), 9)
    assert s.evaluate(59.0, 2) == 9 and s.panicking
    # load drops, but panic keeps the high-water desired
    for t in range(60, 70):
        s.record_value(float(t), 1)
    assert s.evaluate(69.0, 9) == 9
    # a full stable window after the last trigger, panic ends
    assert s.evaluate(119.5, 9) < 9 and not s.panicking


def test_scale_to_zero_waits_for_grace():
    s = AutoscalerState(SchedulingConfig(stable_window=10, panic_window=1, scale_to_zero_grace=30))
    s.record_value(0.0, 3)
    assert s.evaluate(15.0, 3) == 1
    assert s.evaluate(29.9, 1) == 1
    assert s.evaluate(30.0, 1) == 0
    assert s.idle(31.0)


def test_suppression_never_scales_below_current():
    s = AutoscalerState(SchedulingConfig(stable_window=5, panic_window=1, scale_to_zero_grace=0))
    s.suppressed_until = 10.0
    assert s.evaluate(3.0, 7) == 7
    assert s.evaluate(10.5, 7) == 0


def test_min_and_max_scale_clamp():
    s = AutoscalerState(SchedulingConfig(min_scale=2, max_scale=4))
    assert s.evaluate(0.0, 0) == 2
    for t in range(5):
        s.record_value(float(t), 100)
    assert s.evaluate(4.0, 4) == 4


def test_negative_sample_rejected():
    with pytest.raises(ValueError):
        AutoscalerState(SchedulingConfig()).record_value(0.0, -1)


@settings(max_examples=200)
@given(st.lists(st.integers(0, 50), min_size=1, max_size=30), st.integers(1, 8), st.integers(0, 10))
def test_more_load_never_wants_fewer(loads, target, extra):
    cfg = SchedulingConfig(concurrency_target=target, stable_window=100, panic_window=100, panic_threshold=1e9)
    lo, hi = AutoscalerState(cfg), AutoscalerState(cfg)
    for i, v in enumerate(loads):
        lo.record_value(float(i), v)
        hi.record_value(float(i), v + extra)
    now = float(len(loads))
    assert hi.evaluate(now, 0) >= lo.evaluate(now, 0)
    assert lo.evaluate(now, 0) == max(1 if any(loads) else 0, math.ceil(sum(loads) / len(loads) / target))
