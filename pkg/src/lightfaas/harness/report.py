"""Metrics over invocation records: percentiles, slowdown, failure rates, series."""

from __future__ import annotations

import csv
import enum
import math
from collections import defaultdict
from dataclasses import dataclass

PERCENTILES = (50, 90, 99, 99.9)


class Outcome(str, enum.Enum):
    OK = "OK"
    TIMEOUT = "Timeout"
    ERROR = "Error"


@dataclass
class InvocationRecord:
    function: str
    t_scheduled: float  # seconds since run start
    t_submit: float
    t_response: float
    outcome: Outcome
    exec_reference_ms: float
    status: int = 0
    service_ms: float | None = None
    error: str = ""

    @property
    def e2e_ms(self) -> float:
        return (self.t_response - self.t_submit) * 1000

    @property
    def scheduling_ms(self) -> float:
        return self.e2e_ms - self.exec_reference_ms

    @property
    def slowdown(self) -> float:
        return self.e2e_ms / self.exec_reference_ms

    @property
    def overhead_ms(self) -> float | None:
        """End-to-end latency minus the service time the sandbox reported."""
        return None if self.service_ms is None else self.e2e_ms - self.service_ms


CSV_FIELDS = ["function", "t_scheduled", "t_submit", "t_response", "outcome", "status", "exec_reference_ms",
              "service_ms", "e2e_ms", "scheduling_ms", "slowdown", "error"]


def percentile(values, p: float) -> float | None:
    """Nearest-rank percentile; None for an empty sample."""
    if not 0 < p <= 100:
        raise ValueError(f"percentile out of range: {p}")
    xs = sorted(values)
    if not xs:
        return None
    rank = math.ceil(p / 100 * len(xs))
    return xs[max(rank, 1) - 1]


def percentiles(values, ps=PERCENTILES) -> dict[str, float | None]:
    xs = sorted(values)
    return {f"p{p:g}": percentile(xs, p) for p in ps}


def geomean(values) -> float:
    xs = list(values)
    if not xs:
        raise ValueError("geomean of empty sequence")
    return math.exp(sum(math.log(x) for x in xs) / len(xs))


def per_function_slowdown(records) -> dict[str, float]:
    by_fn = defaultdict(list)
    for r in records:
        if r.outcome == Outcome.OK:
            by_fn[r.function].append(max(r.slowdown, 1e-9))
    return {fn: geomean(v) for fn, v in sorted(by_fn.items())}


def summarize(records: list[InvocationRecord], warmup_s: float = 0.0, bucket_s: float = 10.0) -> dict:
    """Summary document over records scheduled at or after ``warmup_s``."""
    recs = [r for r in records if r.t_scheduled >= warmup_s]
    if not recs:
        raise ValueError("no records after warm-up")
    ok = [r for r in recs if r.outcome == Outcome.OK]
    fn_slow = per_function_slowdown(ok)
    failures = {o.value: sum(1 for r in recs if r.outcome == o) for o in Outcome}
    series = defaultdict(lambda: {"n": 0, "failed": 0, "slowdowns": []})
    for r in recs:
        b = series[int(r.t_scheduled // bucket_s)]
        b["n"] += 1
        if r.outcome == Outcome.OK:
            b["slowdowns"].append(max(r.slowdown, 1e-9))
        else:
            b["failed"] += 1
    return {
        "invocations": len(recs),
        "ok": len(ok),
        "outcomes": failures,
        "failure_rate": 1 - len(ok) / len(recs),
        "e2e_ms": percentiles(r.e2e_ms for r in ok),
        "scheduling_ms": percentiles(r.scheduling_ms for r in ok),
        "slowdown": percentiles(r.slowdown for r in ok),
        "per_function_geomean_slowdown": percentiles(fn_slow.values()),
        "functions": len({r.function for r in recs}),
        "function_slowdown": fn_slow,
        "series": [{"t": k * bucket_s, "n": v["n"], "failure_rate": v["failed"] / v["n"],
                    "geomean_slowdown": geomean(v["slowdowns"]) if v["slowdowns"] else None}
                   for k, v in sorted(series.items())],
    }


def write_records(path: str, records):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in records:
            w.writerow([r.function, f"{r.t_scheduled:.6f}", f"{r.t_submit:.6f}", f"{r.t_response:.6f}",
                        r.outcome.value, r.status, f"{r.exec_reference_ms:.3f}",
                        "" if r.service_ms is None else f"{r.service_ms:.3f}", f"{r.e2e_ms:.3f}",
                        f"{r.scheduling_ms:.3f}", f"{r.slowdown:.4f}", r.error])


def read_records(path: str) -> list[InvocationRecord]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(InvocationRecord(
                row["function"], float(row["t_scheduled"]), float(row["t_submit"]), float(row["t_response"]),
                Outcome(row["outcome"]), float(row["exec_reference_ms"]), int(row["status"] or 0),
                float(row["service_ms"]) if row["service_ms"] else None, row.get("error", "")))
    return out


def _fmt(x) -> str:
    return "undefined" if x is None else f"{x:.2f}"


def format_summary(s: dict) -> str:
    lines = [f"invocations {s['invocations']}  ok {s['ok']}  failure rate {s['failure_rate']:.4f}  "
             f"functions {s['functions']}",
             "outcomes " + "  ".join(f"{k}={v}" for k, v in s["outcomes"].items())]
    for key, label in (("e2e_ms", "e2e latency ms"), ("scheduling_ms", "scheduling latency ms"),
                       ("slowdown", "slowdown"), ("per_function_geomean_slowdown", "per-function geomean slowdown")):
        lines.append(f"{label:32s} " + "  ".join(f"{k}={_fmt(v)}" for k, v in s[key].items()))
    return "\n".join(lines)


def write_series(path: str, s: dict):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t_s", "invocations", "failure_rate", "geomean_slowdown"])
        for b in s["series"]:
            w.writerow([b["t"], b["n"], f"{b['failure_rate']:.4f}",
                        "" if b["geomean_slowdown"] is None else f"{b['geomean_slowdown']:.4f}"])


def write_function_slowdowns(path: str, s: dict):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["function", "geomean_slowdown"])
        for fn, v in s["function_slowdown"].items():
            w.writerow([fn, f"{v:.4f}"])
