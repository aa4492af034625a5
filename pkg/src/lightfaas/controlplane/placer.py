from __future__ import annotations

import enum
from dataclasses import dataclass

from ..model import ComponentRecord


class WorkerStatus(str, enum.Enum):
    HEALTHY = "Healthy"
    SUSPECT = "Suspect"
    DEAD = "Dead"


class NoFeasibleWorker(Exception):
    pass


@dataclass
class WorkerState:
    record: ComponentRecord
    last_heartbeat: float
    cpu_committed: int = 0
    mem_committed: int = 0
    status: WorkerStatus = WorkerStatus.HEALTHY

    @property
    def index(self) -> int:
        return self.record.index

    def fits(self, cpu: int, mem: int) -> bool:
        r = self.record
        return self.cpu_committed + cpu <= r.cpu_capacity and self.mem_committed + mem <= r.mem_capacity


def score(w: WorkerState, cpu: int, mem: int) -> float:
    """Mean free fraction of CPU and memory left after placing the request."""
    r = w.record
    return 0.5 * ((r.cpu_capacity - w.cpu_committed - cpu) / r.cpu_capacity) + \
        0.5 * ((r.mem_capacity - w.mem_committed - mem) / r.mem_capacity)


def place(cpu_request: int, mem_request: int, workers, commit: bool = True) -> WorkerState:
    """Pick the healthy, feasible worker with the most balanced free capacity.

    Ties go to the lowest worker index. On success the request is committed
    to the chosen worker unless ``commit`` is False.
    """
    best = None
    best_key = None
    for w in workers:
        if w.status != WorkerStatus.HEALTHY or not w.fits(cpu_request, mem_request):
            continue
        key = (-score(w, cpu_request, mem_request), w.index)
        if best_key is None or key < best_key:
            best, best_key = w, key
    if best is None:
        raise NoFeasibleWorker(f"no healthy worker fits cpu={cpu_request}m mem={mem_request}Mi")
    if commit:
        best.cpu_committed += cpu_request
        best.mem_committed += mem_request
    return best


def release(w: WorkerState, cpu_request: int, mem_request: int):
    w.cpu_committed = max(0, w.cpu_committed - cpu_request)
    w.mem_committed = max(0, w.mem_committed - mem_request)
